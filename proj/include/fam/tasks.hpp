#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fam/rope.hpp"
#include "fam/tensor.hpp"

namespace fam {

// Fixed word-level vocabulary for the synthetic tasks.
class ToyVocab {
 public:
  ToyVocab();

  std::size_t size() const noexcept { return symbols_.size(); }
  int id(const std::string& symbol) const;  // throws std::out_of_range for unknown symbols
  const std::string& symbol(int id) const;

  std::vector<int> encode(const std::string& text) const;  // whitespace-separated symbols
  std::string decode(std::span<const int> ids) const;

  int pad() const { return id("<pad>"); }
  int digit(int d) const { return id(std::string(1, static_cast<char>('0' + d))); }
  std::span<const int> data_ids() const noexcept { return data_ids_; }
  std::span<const int> filler_ids() const noexcept { return filler_ids_; }
  std::vector<int> repeat_marker() const { return encode("[repeat random segment]:"); }

 private:
  std::vector<std::string> symbols_;
  std::vector<int> data_ids_;
  std::vector<int> filler_ids_;
};

struct PackedExample {
  std::vector<int> tokens;
  std::vector<double> weights;
  PositionIds positions;
  std::pair<std::size_t, std::size_t> answer_span{0, 0};  // [begin, end)

  std::size_t size() const noexcept { return tokens.size(); }
  void validate() const;
};

enum class Filler { Repeat, Random };

struct PassKeyOptions {
  std::size_t filler_len = 0;
  std::size_t key_digits = 3;
  Filler filler = Filler::Repeat;
};

PackedExample gen_passkey(const ToyVocab& vocab, const PassKeyOptions& opts, Rng& rng);

// Appends the repeat marker and a random span of seg_len tokens copied from the
// example; the span is weighted `weight` and the marker 0.
PackedExample repeat_segment_augment(const PackedExample& ex, const ToyVocab& vocab, Rng& rng,
                                     std::size_t seg_len = 256, double weight = 0.1);

// prefix_len random data tokens, gap_len filler tokens, the repeat marker, then
// the prefix again with weight 1.
PackedExample gen_copy_task(const ToyVocab& vocab, std::size_t prefix_len, std::size_t gap_len, Rng& rng);

// Exact match over the answer span: every answer token is the argmax of the
// logits one position earlier. logits is [T x vocab] for this example.
template <class T>
bool passkey_correct(const Tensor<T>& logits, const PackedExample& ex);

double mean_accuracy(std::span<const bool> correct);

// ids<TAB>weights<TAB>begin,end per line.
void write_dataset(std::ostream& out, std::span<const PackedExample> examples);

}  // namespace fam
