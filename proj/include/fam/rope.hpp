#pragma once

#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "fam/tensor.hpp"

namespace fam {

using Rng = std::mt19937_64;

struct RopeConfig {
  double base_frequency = 10000.0;
  std::size_t head_dim = 16;

  // Longest rotation period, in tokens.
  double max_wavelength() const noexcept { return 2.0 * std::numbers::pi * base_frequency; }
  // theta_i = base^(-2i / head_dim)
  double frequency(std::size_t pair) const;
  void validate() const;
};

// Integer token positions plus one real-valued offset shared by every token.
struct PositionIds {
  std::vector<long> positions;
  double offset = 0.0;

  std::size_t size() const noexcept { return positions.size(); }
  double at(std::size_t i) const noexcept { return static_cast<double>(positions[i]) + offset; }
  std::vector<double> resolved() const;

  static PositionIds range(long start, std::size_t count, double offset = 0.0);
};

// Rotates each (x[2i], x[2i+1]) pair of every head by angle position * theta_i.
// Rows are grouped in runs of positions.size(); row r uses positions[r % seq].
// `cols` may hold several heads side by side.
template <class T>
void rope_apply(const T* in, T* out, std::size_t rows, std::size_t cols, std::span<const double> positions,
                const RopeConfig& cfg, bool inverse);

// x: [... x seq x head_dim]; pos.size() == seq.
template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, const PositionIds& pos, const RopeConfig& cfg);

// FAM produced from a block takes the last fam_len positions of that block.
PositionIds fam_positions(long block_start, std::size_t block_size, std::size_t fam_len);

enum class RunMode { Train, Inference };

// Random Position Offset: zero with probability 1/2, otherwise uniform on
// [0, max_wavelength). Inference always gets 0.
double sample_rpo(const RopeConfig& cfg, Rng& rng, RunMode mode = RunMode::Train);

}  // namespace fam
