#include "fam/tasks.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "fam/config.hpp"

namespace fam {

namespace {

const char* const kSymbols[] = {
    "<pad>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "the", "pass", "key", "is", "remember", "it", "what", "find", ".", "?",
    "grass", "green", "sky", "blue", "sun", "yellow", "here", "we", "go", "there", "and", "back", "again",
    "[repeat", "random", "segment]:",
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
};

}  // namespace

ToyVocab::ToyVocab() : symbols_(std::begin(kSymbols), std::end(kSymbols)) {
  for (char c = 'a'; c <= 'p'; ++c) data_ids_.push_back(id(std::string(1, c)));
  for (const char* w : {"grass", "green", "sky", "blue", "sun", "yellow", "here", "we", "go", "there", "and",
                        "back", "again"}) {
    filler_ids_.push_back(id(w));
  }
}

int ToyVocab::id(const std::string& symbol) const {
  const auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) throw std::out_of_range("symbol '" + symbol + "' is not in the vocabulary");
  return static_cast<int>(it - symbols_.begin());
}

const std::string& ToyVocab::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " is not in the vocabulary");
  }
  return symbols_[static_cast<std::size_t>(id)];
}

std::vector<int> ToyVocab::encode(const std::string& text) const {
  std::istringstream in(text);
  std::vector<int> ids;
  std::string word;
  while (in >> word) ids.push_back(id(word));
  return ids;
}

std::string ToyVocab::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += symbol(ids[i]);
  }
  return out;
}

void PackedExample::validate() const {
  if (weights.size() != tokens.size()) throw ShapeError("example weights do not match tokens");
  if (positions.size() != tokens.size()) throw ShapeError("example positions do not match tokens");
  if (answer_span.first > answer_span.second || answer_span.second > tokens.size()) {
    throw ShapeError("example answer span out of bounds");
  }
}

namespace {

void append(PackedExample& ex, std::span<const int> ids, double weight) {
  ex.tokens.insert(ex.tokens.end(), ids.begin(), ids.end());
  ex.weights.insert(ex.weights.end(), ids.size(), weight);
}

void finish(PackedExample& ex) { ex.positions = PositionIds::range(0, ex.tokens.size()); }

}  // namespace

PackedExample gen_passkey(const ToyVocab& vocab, const PassKeyOptions& opts, Rng& rng) {
  if (opts.key_digits == 0) throw std::invalid_argument("key_digits must be >= 1");
  std::uniform_int_distribution<int> digit(0, 9);
  std::vector<int> key;
  for (std::size_t i = 0; i < opts.key_digits; ++i) key.push_back(vocab.digit(digit(rng)));

  PackedExample ex;
  append(ex, vocab.encode("find and remember the pass key ."), 0.0);
  append(ex, vocab.encode("the pass key is"), 0.0);
  append(ex, key, 0.0);
  append(ex, vocab.encode(". remember it ."), 0.0);
  append(ex, key, 0.0);
  append(ex, vocab.encode("is the pass key ."), 0.0);
  if (opts.filler == Filler::Repeat) {
    ex.tokens.insert(ex.tokens.end(), opts.filler_len, vocab.id("grass"));
  } else {
    const auto fill = vocab.filler_ids();
    std::uniform_int_distribution<std::size_t> pick(0, fill.size() - 1);
    for (std::size_t i = 0; i < opts.filler_len; ++i) ex.tokens.push_back(fill[pick(rng)]);
  }
  ex.weights.resize(ex.tokens.size(), 0.0);
  append(ex, vocab.encode("what is the pass key ? the pass key is"), 0.0);
  ex.answer_span = {ex.tokens.size(), ex.tokens.size() + key.size()};
  append(ex, key, 1.0);
  finish(ex);
  return ex;
}

PackedExample repeat_segment_augment(const PackedExample& ex, const ToyVocab& vocab, Rng& rng, std::size_t seg_len,
                                     double weight) {
  if (seg_len == 0 || ex.tokens.size() < seg_len) {
    throw std::invalid_argument("repeat_segment_augment: sequence of " + std::to_string(ex.tokens.size()) +
                                " tokens is shorter than segment " + std::to_string(seg_len));
  }
  std::uniform_int_distribution<std::size_t> start(0, ex.tokens.size() - seg_len);
  const std::size_t s = start(rng);
  PackedExample out = ex;
  append(out, vocab.repeat_marker(), 0.0);
  const std::vector<int> span(ex.tokens.begin() + static_cast<long>(s),
                              ex.tokens.begin() + static_cast<long>(s + seg_len));
  append(out, span, weight);
  finish(out);
  return out;
}

PackedExample gen_copy_task(const ToyVocab& vocab, std::size_t prefix_len, std::size_t gap_len, Rng& rng) {
  if (prefix_len == 0) throw std::invalid_argument("gen_copy_task: prefix_len must be >= 1");
  const auto data = vocab.data_ids();
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<int> prefix;
  for (std::size_t i = 0; i < prefix_len; ++i) prefix.push_back(data[pick(rng)]);
  PackedExample ex;
  append(ex, prefix, 0.0);
  ex.tokens.insert(ex.tokens.end(), gap_len, vocab.id("grass"));
  ex.weights.resize(ex.tokens.size(), 0.0);
  append(ex, vocab.repeat_marker(), 0.0);
  ex.answer_span = {ex.tokens.size(), ex.tokens.size() + prefix.size()};
  append(ex, prefix, 1.0);
  finish(ex);
  return ex;
}

template <class T>
bool passkey_correct(const Tensor<T>& logits, const PackedExample& ex) {
  if (logits.rank() != 2 || logits.rows() != ex.tokens.size()) {
    throw ShapeError("passkey_correct: logits " + shape_string(logits.shape()) + " for " +
                     std::to_string(ex.tokens.size()) + " tokens");
  }
  const auto [begin, end] = ex.answer_span;
  if (begin == 0 || begin >= end) throw ShapeError("passkey_correct: empty or unpredictable answer span");
  for (std::size_t t = begin; t < end; ++t) {
    const auto row = logits.row(t - 1);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best != ex.tokens[t]) return false;
  }
  return true;
}

double mean_accuracy(std::span<const bool> correct) {
  if (correct.empty()) return 0.0;
  std::size_t hits = 0;
  for (bool c : correct) hits += c ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(correct.size());
}

void write_dataset(std::ostream& out, std::span<const PackedExample> examples) {
  for (const PackedExample& ex : examples) {
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << (i ? "," : "") << ex.tokens[i];
    out << '\t';
    for (std::size_t i = 0; i < ex.weights.size(); ++i) out << (i ? "," : "") << format_number(ex.weights[i]);
    out << '\t' << ex.answer_span.first << ',' << ex.answer_span.second << '\n';
  }
}

template bool passkey_correct(const Tensor<float>&, const PackedExample&);
template bool passkey_correct(const Tensor<double>&, const PackedExample&);

}  // namespace fam
