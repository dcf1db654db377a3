#pragma once

// Differentiable operations over rank-2 activations. Batched activations are
// lane-major: a tensor of `lanes` sequences with n rows each stores lane l in
// rows [l*n, (l+1)*n).

#include <cstddef>
#include <span>
#include <vector>

#include "fam/autograd.hpp"
#include "fam/mask.hpp"
#include "fam/rope.hpp"
#include "fam/tensor.hpp"

namespace fam {

template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& x, T factor);
// x [r x c] + bias [c] broadcast over rows.
template <class T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> mean(const Var<T>& x);
template <class T> Var<T> mean_square(const Var<T>& x);

// Per-row normalisation over the last axis with eps added to the variance.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

// tanh approximation.
template <class T> Var<T> gelu(const Var<T>& x);

template <class T> Var<T> embedding(const Var<T>& table, std::span<const int> ids);

template <class T> Var<T> broadcast_lanes(const Var<T>& x, std::size_t lanes);
template <class T> Var<T> concat_lanes(std::span<const Var<T>> parts, std::size_t lanes);
template <class T>
Var<T> slice_lanes(const Var<T>& x, std::size_t lanes, std::size_t begin, std::size_t count);

// Rotary embedding of every head in x; row r of each lane uses positions[r].
template <class T>
Var<T> rope(const Var<T>& x, std::span<const double> positions, const RopeConfig& cfg);

// Row-wise softmax restricted to admissible entries; masked entries are 0.
template <class T> Tensor<T> softmax_masked(const Tensor<T>& logits, const AttentionMask& mask);
template <class T> Var<T> softmax_masked(const Var<T>& logits, const AttentionMask& mask);

// Multi-head attention probabilities. q is [lanes*nq x heads*hd]; keys is a
// list of segments [lanes*n_s x heads*hd] concatenated along the key axis in
// order; mask is [nq x sum(n_s)] and shared by lanes and heads. Result rows are
// ordered (lane, head, query): [lanes*heads*nq x sum(n_s)].
template <class T>
Var<T> attention_probs(const Var<T>& q, std::span<const Var<T>> keys, const AttentionMask& mask,
                       std::size_t lanes, std::size_t heads, T scale);

// Weighted sum of value segments by attention_probs output.
template <class T>
Var<T> attention_mix(const Var<T>& probs, std::span<const Var<T>> values, std::size_t lanes,
                     std::size_t heads);

// sum_i w_i * -log softmax(logits_i)[target_i]; rows with w_i == 0 are skipped.
template <class T>
Var<T> weighted_nll_sum(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights);

// Rows are split into consecutive groups; each group's rows are averaged into
// p_bar and the result is sum over groups of sum_k p_bar_k log p_bar_k.
template <class T>
Var<T> neg_entropy_sum(const Var<T>& probs, std::size_t rows_per_group);

}  // namespace fam
