#include "fam/rope.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fam {

double RopeConfig::frequency(std::size_t pair) const {
  return std::pow(base_frequency, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
}

void RopeConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ShapeError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(base_frequency > 0.0)) throw std::invalid_argument("rope base_frequency must be positive");
}

std::vector<double> PositionIds::resolved() const {
  std::vector<double> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) out[i] = at(i);
  return out;
}

PositionIds PositionIds::range(long start, std::size_t count, double offset) {
  PositionIds p;
  p.positions.resize(count);
  for (std::size_t i = 0; i < count; ++i) p.positions[i] = start + static_cast<long>(i);
  p.offset = offset;
  return p;
}

template <class T>
void rope_apply(const T* in, T* out, std::size_t rows, std::size_t cols, std::span<const double> positions,
                const RopeConfig& cfg, bool inverse) {
  cfg.validate();
  const std::size_t hd = cfg.head_dim;
  if (cols % hd != 0) {
    throw ShapeError("rope: width " + std::to_string(cols) + " is not a multiple of head_dim " +
                     std::to_string(hd));
  }
  const std::size_t seq = positions.size();
  if (seq == 0 || rows % seq != 0) {
    throw ShapeError("rope: " + std::to_string(rows) + " rows do not tile " + std::to_string(seq) +
                     " positions");
  }
  const std::size_t pairs = hd / 2;
  std::vector<double> freq(pairs);
  for (std::size_t i = 0; i < pairs; ++i) freq[i] = cfg.frequency(i);
  // Angles are formed in double so that large offsets keep their phase.
  std::vector<T> cosv(seq * pairs), sinv(seq * pairs);
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = positions[s] * freq[i];
      cosv[s * pairs + i] = static_cast<T>(std::cos(angle));
      sinv[s * pairs + i] = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t s = r % seq;
    const T* x = in + r * cols;
    T* y = out + r * cols;
    for (std::size_t h = 0; h < cols; h += hd) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const T c = cosv[s * pairs + i];
        const T sn = sinv[s * pairs + i];
        const T x0 = x[h + 2 * i];
        const T x1 = x[h + 2 * i + 1];
        y[h + 2 * i] = x0 * c - x1 * sn;
        y[h + 2 * i + 1] = x0 * sn + x1 * c;
      }
    }
  }
}

template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, const PositionIds& pos, const RopeConfig& cfg) {
  if (x.rank() < 2) throw ShapeError("rope_rotate expects [... x seq x head_dim]");
  if (x.cols() != cfg.head_dim) {
    throw ShapeError("rope_rotate: last extent " + std::to_string(x.cols()) + " != head_dim " +
                     std::to_string(cfg.head_dim));
  }
  const std::size_t seq = x.shape()[x.rank() - 2];
  if (pos.size() != seq) {
    throw ShapeError("rope_rotate: " + std::to_string(pos.size()) + " positions for sequence of " +
                     std::to_string(seq));
  }
  Tensor<T> out(x.shape());
  const std::vector<double> p = pos.resolved();
  rope_apply(x.data(), out.data(), x.rows(), x.cols(), std::span<const double>(p), cfg, false);
  return out;
}

PositionIds fam_positions(long block_start, std::size_t block_size, std::size_t fam_len) {
  if (fam_len == 0 || fam_len > block_size) {
    throw std::invalid_argument("fam_positions: need 1 <= fam_len <= block_size, got fam_len=" +
                                std::to_string(fam_len) + " block_size=" + std::to_string(block_size));
  }
  return PositionIds::range(block_start + static_cast<long>(block_size - fam_len), fam_len);
}

double sample_rpo(const RopeConfig& cfg, Rng& rng, RunMode mode) {
  if (mode == RunMode::Inference) return 0.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double offset = unit(rng) * cfg.max_wavelength();
  const double keep = std::round(unit(rng));
  return offset * keep;
}

template void rope_apply<float>(const float*, float*, std::size_t, std::size_t, std::span<const double>,
                                const RopeConfig&, bool);
template void rope_apply<double>(const double*, double*, std::size_t, std::size_t, std::span<const double>,
                                 const RopeConfig&, bool);
template Tensor<float> rope_rotate<float>(const Tensor<float>&, const PositionIds&, const RopeConfig&);
template Tensor<double> rope_rotate<double>(const Tensor<double>&, const PositionIds&, const RopeConfig&);

}  // namespace fam
