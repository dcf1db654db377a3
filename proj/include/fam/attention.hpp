#pragma once

#include <cstddef>
#include <vector>

#include "fam/autograd.hpp"
#include "fam/mask.hpp"
#include "fam/ops.hpp"
#include "fam/rope.hpp"

namespace fam {

// softmax(scale * Q K^T restricted by mask) V for one lane, split over heads.
template <class T>
Var<T> attend(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask& mask, T scale,
              std::size_t heads = 1) {
  const Var<T> keys[] = {k};
  const Var<T> values[] = {v};
  const Var<T> probs = attention_probs<T>(q, keys, mask, 1, heads, scale);
  return attention_mix<T>(probs, values, 1, heads);
}

template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionMask& mask,
                 T scale, std::size_t heads = 1) {
  NoGradGuard guard;
  return attend(Var<T>::constant(q), Var<T>::constant(k), Var<T>::constant(v), mask, scale, heads).value();
}

// One cached block: unrotated keys, values and the positions they were seen at.
template <class T>
struct CachedBlock {
  Var<T> keys;
  Var<T> values;
  PositionIds positions;
};

// Fixed-capacity store of the most recent blocks. Slots are reused in place, so
// the footprint after warm-up does not depend on how many blocks were pushed.
template <class T>
class KVRingBuffer {
 public:
  explicit KVRingBuffer(std::size_t capacity = 0) : slots_(capacity) {}

  std::size_t capacity() const noexcept { return slots_.size(); }
  std::size_t size() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }

  void push(Var<T> keys, Var<T> values, PositionIds positions) {
    if (slots_.empty()) return;
    CachedBlock<T>& slot = slots_[next_];
    slot.keys = std::move(keys);
    slot.values = std::move(values);
    slot.positions = std::move(positions);
    next_ = (next_ + 1) % slots_.size();
    if (count_ < slots_.size()) ++count_;
  }

  // Oldest to newest.
  std::vector<const CachedBlock<T>*> read() const {
    std::vector<const CachedBlock<T>*> out;
    out.reserve(count_);
    const std::size_t first = (next_ + slots_.size() - count_) % std::max<std::size_t>(slots_.size(), 1);
    for (std::size_t i = 0; i < count_; ++i) out.push_back(&slots_[(first + i) % slots_.size()]);
    return out;
  }

  std::size_t tokens() const noexcept {
    std::size_t n = 0;
    for (const CachedBlock<T>* b : read()) n += b->positions.size();
    return n;
  }

  std::size_t resident_bytes() const noexcept {
    std::size_t n = slots_.capacity() * sizeof(CachedBlock<T>);
    for (const CachedBlock<T>& s : slots_) {
      if (s.keys.defined()) n += s.keys.value().bytes();
      if (s.values.defined()) n += s.values.value().bytes();
      n += s.positions.positions.capacity() * sizeof(long);
    }
    return n;
  }

  void clear() {
    for (CachedBlock<T>& s : slots_) s = CachedBlock<T>{};
    next_ = 0;
    count_ = 0;
  }

 private:
  std::vector<CachedBlock<T>> slots_;
  std::size_t next_ = 0;
  std::size_t count_ = 0;
};

}  // namespace fam
