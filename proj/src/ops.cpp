#include "fam/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "fam/kernels.hpp"

namespace fam {
namespace {

void expect(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const std::size_t r = a.rows(), k = a.cols(), n = b.cols();
  expect(b.value().rank() == 2 && b.rows() == k,
         "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor<T> out(r, n);
  kernels::matmul(a.value().data(), b.value().data(), out.data(), r, k, n, false);
  return record<T>("matmul", std::move(out), {a, b}, [r, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.input_wants_grad(0)) {
      kernels::matmul_a_bt(g, self.input_value(1).data(), self.input_grad(0).data(), r, n, k, true);
    }
    if (self.input_wants_grad(1)) {
      kernels::matmul_at_b(self.input_value(0).data(), g, self.input_grad(1).data(), r, k, n, true);
    }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  expect(a.shape() == b.shape(), "add: " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  return record<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (self.input_wants_grad(i)) accumulate(self.input_grad(i), self.grad);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  expect(a.shape() == b.shape(), "mul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return record<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t s = 0; s < 2; ++s) {
      if (!self.input_wants_grad(s)) continue;
      Tensor<T>& d = self.input_grad(s);
      const Tensor<T>& other = self.input_value(1 - s);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * other[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
  return record<T>("scale", std::move(out), {x}, [factor](Node<T>& self) {
    Tensor<T>& d = self.input_grad(0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * factor;
  });
}

template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  expect(bias.value().size() == c, "add_bias: bias " + shape_string(bias.shape()) + " for width " +
                                       std::to_string(c));
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bias.value()[j];
  }
  return record<T>("add_bias", std::move(out), {x, bias}, [r, c](Node<T>& self) {
    if (self.input_wants_grad(0)) accumulate(self.input_grad(0), self.grad);
    if (self.input_wants_grad(1)) {
      Tensor<T>& db = self.input_grad(1);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) db[j] += self.grad.at(i, j);
      }
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().values()) s += v;
  return record<T>("sum", Tensor<T>(Shape{1}, s), {x}, [](Node<T>& self) {
    Tensor<T>& d = self.input_grad(0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <class T>
Var<T> mean_square(const Var<T>& x) {
  const std::size_t n = x.value().size();
  T s{0};
  for (T v : x.value().values()) s += v * v;
  s /= static_cast<T>(n);
  return record<T>("mean_square", Tensor<T>(Shape{1}, s), {x}, [n](Node<T>& self) {
    Tensor<T>& d = self.input_grad(0);
    const Tensor<T>& xv = self.input_value(0);
    const T g = self.grad[0] * T{2} / static_cast<T>(n);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * xv[i];
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t r = x.rows(), c = x.cols();
  expect(c > 0, "layer_norm: empty feature axis");
  expect(gain.value().size() == c && bias.value().size() == c,
         "layer_norm: affine parameters do not match width " + std::to_string(c));
  Tensor<T> out(x.shape());
  std::vector<T> xhat(r * c), inv(r);
  const T* xv = x.value().data();
  const T* gv = gain.value().data();
  const T* bv = bias.value().data();
  const long rows = static_cast<long>(r);
#pragma omp parallel for schedule(static) if (r * c >= kernels::kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    const T* xi = xv + i * c;
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    inv[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xi[j] - mu) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  return record<T>("layer_norm", std::move(out), {x, gain, bias},
                   [r, c, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.input_wants_grad(0)) {
      T* dx = self.input_grad(0).data();
      const T* gv = self.input_value(1).data();
      const long rows = static_cast<long>(r);
#pragma omp parallel for schedule(static) if (r * c >= kernels::kParallelThreshold)
      for (long i = 0; i < rows; ++i) {
        T m1{0}, m2{0};
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = g[i * c + j] * gv[j];
          m1 += dh;
          m2 += dh * xhat[i * c + j];
        }
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = g[i * c + j] * gv[j];
          dx[i * c + j] += inv[i] * (dh - m1 - xhat[i * c + j] * m2);
        }
      }
    }
    if (self.input_wants_grad(1)) {
      T* dg = self.input_grad(1).data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) dg[j] += g[i * c + j] * xhat[i * c + j];
      }
    }
    if (self.input_wants_grad(2)) {
      T* db = self.input_grad(2).data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
      }
    }
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kCubic = static_cast<T>(0.044715);
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T{0.5} * v * (T{1} + std::tanh(kAlpha * (v + kCubic * v * v * v)));
  }
  return record<T>("gelu", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>& d = self.input_grad(0);
    const Tensor<T>& xv = self.input_value(0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T v = xv[i];
      const T t = std::tanh(kAlpha * (v + kCubic * v * v * v));
      const T dt = (T{1} - t * t) * kAlpha * (T{1} + T{3} * kCubic * v * v);
      d[i] += self.grad[i] * (T{0.5} * (T{1} + t) + T{0.5} * v * dt);
    }
  });
}

template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor<T> out(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    expect(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab,
           "embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    const auto src = table.value().row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return record<T>("embedding", std::move(out), {table}, [d, idv = std::move(idv)](Node<T>& self) {
    Tensor<T>& dt = self.input_grad(0);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      T* row = dt.data() + static_cast<std::size_t>(idv[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad.at(i, j);
    }
  });
}

template <class T>
Var<T> broadcast_lanes(const Var<T>& x, std::size_t lanes) {
  const std::size_t n = x.value().size();
  Tensor<T> out(Shape{lanes * x.rows(), x.cols()});
  for (std::size_t l = 0; l < lanes; ++l) {
    std::copy(x.value().data(), x.value().data() + n, out.data() + l * n);
  }
  return record<T>("broadcast_lanes", std::move(out), {x}, [lanes, n](Node<T>& self) {
    Tensor<T>& d = self.input_grad(0);
    for (std::size_t l = 0; l < lanes; ++l) {
      for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[l * n + i];
    }
  });
}

template <class T>
Var<T> concat_lanes(std::span<const Var<T>> parts, std::size_t lanes) {
  expect(!parts.empty() && lanes > 0, "concat_lanes: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::vector<std::size_t> per_lane;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    expect(p.cols() == c && p.rows() % lanes == 0,
           "concat_lanes: part " + shape_string(p.shape()) + " does not fit " + std::to_string(lanes) +
               " lanes of width " + std::to_string(c));
    per_lane.push_back(p.rows() / lanes);
    total += per_lane.back();
  }
  Tensor<T> out(lanes * total, c);
  for (std::size_t l = 0; l < lanes; ++l) {
    std::size_t at = l * total;
    for (std::size_t s = 0; s < parts.size(); ++s) {
      const T* src = parts[s].value().data() + l * per_lane[s] * c;
      std::copy(src, src + per_lane[s] * c, out.data() + at * c);
      at += per_lane[s];
    }
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return record<T>("concat_lanes", std::move(out), std::move(inputs),
                   [lanes, c, total, per_lane = std::move(per_lane)](Node<T>& self) {
    for (std::size_t l = 0; l < lanes; ++l) {
      std::size_t at = l * total;
      for (std::size_t s = 0; s < per_lane.size(); ++s) {
        if (self.input_wants_grad(s)) {
          T* dst = self.input_grad(s).data() + l * per_lane[s] * c;
          const T* src = self.grad.data() + at * c;
          for (std::size_t i = 0; i < per_lane[s] * c; ++i) dst[i] += src[i];
        }
        at += per_lane[s];
      }
    }
  });
}

template <class T>
Var<T> slice_lanes(const Var<T>& x, std::size_t lanes, std::size_t begin, std::size_t count) {
  const std::size_t c = x.cols();
  expect(lanes > 0 && x.rows() % lanes == 0, "slice_lanes: rows do not split into lanes");
  const std::size_t n = x.rows() / lanes;
  expect(begin + count <= n && count > 0, "slice_lanes: range [" + std::to_string(begin) + ", " +
                                              std::to_string(begin + count) + ") outside " +
                                              std::to_string(n) + " rows per lane");
  Tensor<T> out(lanes * count, c);
  for (std::size_t l = 0; l < lanes; ++l) {
    const T* src = x.value().data() + (l * n + begin) * c;
    std::copy(src, src + count * c, out.data() + l * count * c);
  }
  return record<T>("slice_lanes", std::move(out), {x}, [lanes, n, begin, count, c](Node<T>& self) {
    T* d = self.input_grad(0).data();
    for (std::size_t l = 0; l < lanes; ++l) {
      T* dst = d + (l * n + begin) * c;
      const T* src = self.grad.data() + l * count * c;
      for (std::size_t i = 0; i < count * c; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var<T> rope(const Var<T>& x, std::span<const double> positions, const RopeConfig& cfg) {
  Tensor<T> out(x.shape());
  rope_apply(x.value().data(), out.data(), x.rows(), x.cols(), positions, cfg, false);
  std::vector<double> pos(positions.begin(), positions.end());
  return record<T>("rope", std::move(out), {x}, [pos = std::move(pos), cfg](Node<T>& self) {
    Tensor<T> back(self.grad.shape());
    rope_apply(self.grad.data(), back.data(), back.rows(), back.cols(), std::span<const double>(pos), cfg,
               true);
    accumulate(self.input_grad(0), back);
  });
}

namespace {

template <class T>
void softmax_row(const T* logits, T* out, std::size_t n, const AttentionMask& mask, std::size_t row) {
  T peak = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (mask.allowed(row, j)) peak = std::max(peak, logits[j]);
  }
  if (peak == -std::numeric_limits<T>::infinity()) {
    throw std::invalid_argument("softmax over fully masked row " + std::to_string(row));
  }
  T total{0};
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = mask.allowed(row, j) ? std::exp(logits[j] - peak) : T{0};
    total += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= total;
}

template <class T>
void softmax_row_backward(const T* p, const T* g, T* d, std::size_t n) {
  T dot{0};
  for (std::size_t j = 0; j < n; ++j) dot += g[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) d[j] += p[j] * (g[j] - dot);
}

}  // namespace

template <class T>
Tensor<T> softmax_masked(const Tensor<T>& logits, const AttentionMask& mask) {
  expect(logits.rows() == mask.rows() && logits.cols() == mask.cols(),
         "softmax_masked: logits " + shape_string(logits.shape()) + " vs mask " +
             std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    softmax_row(logits.data() + r * logits.cols(), out.data() + r * logits.cols(), logits.cols(), mask, r);
  }
  return out;
}

template <class T>
Var<T> softmax_masked(const Var<T>& logits, const AttentionMask& mask) {
  Tensor<T> out = softmax_masked(logits.value(), mask);
  return record<T>("softmax_masked", std::move(out), {logits}, [](Node<T>& self) {
    const std::size_t r = self.value.rows(), c = self.value.cols();
    T* d = self.input_grad(0).data();
    for (std::size_t i = 0; i < r; ++i) {
      softmax_row_backward(self.value.data() + i * c, self.grad.data() + i * c, d + i * c, c);
    }
  });
}

namespace {

// Maps each key column to (segment, row within a lane of that segment).
struct KeyIndex {
  std::vector<std::size_t> segment;
  std::vector<std::size_t> local;
  std::vector<std::size_t> seg_rows;  // rows per lane of each segment
};

template <class T>
KeyIndex index_keys(std::span<const Var<T>> segs, std::size_t lanes, std::size_t width) {
  KeyIndex ix;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    expect(segs[s].cols() == width && segs[s].rows() % lanes == 0,
           "attention: key/value segment " + shape_string(segs[s].shape()) + " does not match width " +
               std::to_string(width) + " over " + std::to_string(lanes) + " lanes");
    const std::size_t n = segs[s].rows() / lanes;
    ix.seg_rows.push_back(n);
    for (std::size_t r = 0; r < n; ++r) {
      ix.segment.push_back(s);
      ix.local.push_back(r);
    }
  }
  return ix;
}

}  // namespace

template <class T>
Var<T> attention_probs(const Var<T>& q, std::span<const Var<T>> keys, const AttentionMask& mask,
                       std::size_t lanes, std::size_t heads, T scale) {
  const std::size_t width = q.cols();
  expect(lanes > 0 && heads > 0 && width % heads == 0 && q.rows() % lanes == 0,
         "attention_probs: query " + shape_string(q.shape()) + " with " + std::to_string(lanes) +
             " lanes and " + std::to_string(heads) + " heads");
  const std::size_t hd = width / heads;
  const std::size_t nq = q.rows() / lanes;
  KeyIndex ix = index_keys(keys, lanes, width);
  const std::size_t nk = ix.segment.size();
  expect(mask.rows() == nq && mask.cols() == nk,
         "attention_probs: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
             " for " + std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");

  Tensor<T> probs(lanes * heads * nq, nk);
  std::vector<const T*> key_data;
  for (const Var<T>& k : keys) key_data.push_back(k.value().data());
  const T* qd = q.value().data();
  mask.validate();
  const long pairs = static_cast<long>(lanes * heads);
#pragma omp parallel for schedule(static) if (lanes * heads * nq * nk * hd >= kernels::kParallelThreshold)
  for (long lh = 0; lh < pairs; ++lh) {
    const std::size_t l = static_cast<std::size_t>(lh) / heads, h = static_cast<std::size_t>(lh) % heads;
    std::vector<T> scores(nk);
    for (std::size_t i = 0; i < nq; ++i) {
      const T* qi = qd + (l * nq + i) * width + h * hd;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!mask.allowed(i, j)) {
          scores[j] = T{0};
          continue;
        }
        const std::size_t s = ix.segment[j];
        const T* kj = key_data[s] + (l * ix.seg_rows[s] + ix.local[j]) * width + h * hd;
        T dot{0};
        for (std::size_t e = 0; e < hd; ++e) dot += qi[e] * kj[e];
        scores[j] = dot * scale;
      }
      T* out = probs.data() + ((l * heads + h) * nq + i) * nk;
      softmax_row(scores.data(), out, nk, mask, i);
    }
  }
  std::vector<Var<T>> inputs{q};
  inputs.insert(inputs.end(), keys.begin(), keys.end());
  return record<T>("attention_probs", std::move(probs), std::move(inputs),
                   [lanes, heads, hd, nq, nk, width, scale, ix = std::move(ix)](Node<T>& self) {
    const std::size_t segs = ix.seg_rows.size();
    const bool q_grad = self.input_wants_grad(0);
    T* dq = q_grad ? self.input_grad(0).data() : nullptr;
    std::vector<T*> dk(segs, nullptr);
    std::vector<const T*> kd(segs);
    for (std::size_t s = 0; s < segs; ++s) {
      kd[s] = self.input_value(s + 1).data();
      if (self.input_wants_grad(s + 1)) dk[s] = self.input_grad(s + 1).data();
    }
    const T* qd = self.input_value(0).data();
    const long pairs = static_cast<long>(lanes * heads);
#pragma omp parallel for schedule(static) if (lanes * heads * nq * nk * hd >= kernels::kParallelThreshold)
    for (long lh = 0; lh < pairs; ++lh) {
      const std::size_t l = static_cast<std::size_t>(lh) / heads, h = static_cast<std::size_t>(lh) % heads;
      std::vector<T> ds(nk);
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t row = (l * heads + h) * nq + i;
        const T* p = self.value.data() + row * nk;
        const T* g = self.grad.data() + row * nk;
        std::fill(ds.begin(), ds.end(), T{0});
        softmax_row_backward(p, g, ds.data(), nk);
        const std::size_t qoff = (l * nq + i) * width + h * hd;
        for (std::size_t j = 0; j < nk; ++j) {
          if (p[j] == T{0}) continue;
          const std::size_t s = ix.segment[j];
          const std::size_t koff = (l * ix.seg_rows[s] + ix.local[j]) * width + h * hd;
          const T w = ds[j] * scale;
          if (dq) {
            for (std::size_t e = 0; e < hd; ++e) dq[qoff + e] += w * kd[s][koff + e];
          }
          if (dk[s]) {
            for (std::size_t e = 0; e < hd; ++e) dk[s][koff + e] += w * qd[qoff + e];
          }
        }
      }
    }
  });
}

template <class T>
Var<T> attention_mix(const Var<T>& probs, std::span<const Var<T>> values, std::size_t lanes,
                     std::size_t heads) {
  expect(!values.empty(), "attention_mix: no value segments");
  const std::size_t width = values[0].cols();
  expect(width % heads == 0, "attention_mix: width not divisible by heads");
  const std::size_t hd = width / heads;
  KeyIndex ix = index_keys(values, lanes, width);
  const std::size_t nk = ix.segment.size();
  expect(probs.cols() == nk && probs.rows() % (lanes * heads) == 0,
         "attention_mix: probabilities " + shape_string(probs.shape()) + " for " + std::to_string(nk) +
             " values");
  const std::size_t nq = probs.rows() / (lanes * heads);

  Tensor<T> out(lanes * nq, width);
  std::vector<const T*> vd;
  for (const Var<T>& v : values) vd.push_back(v.value().data());
  const T* pd = probs.value().data();
  const long pairs = static_cast<long>(lanes * heads);
#pragma omp parallel for schedule(static) if (lanes * heads * nq * nk * hd >= kernels::kParallelThreshold)
  for (long lh = 0; lh < pairs; ++lh) {
    const std::size_t l = static_cast<std::size_t>(lh) / heads, h = static_cast<std::size_t>(lh) % heads;
    for (std::size_t i = 0; i < nq; ++i) {
      const T* p = pd + ((l * heads + h) * nq + i) * nk;
      T* o = out.data() + (l * nq + i) * width + h * hd;
      for (std::size_t j = 0; j < nk; ++j) {
        if (p[j] == T{0}) continue;
        const std::size_t s = ix.segment[j];
        const T* v = vd[s] + (l * ix.seg_rows[s] + ix.local[j]) * width + h * hd;
        for (std::size_t e = 0; e < hd; ++e) o[e] += p[j] * v[e];
      }
    }
  }

  std::vector<Var<T>> inputs{probs};
  inputs.insert(inputs.end(), values.begin(), values.end());
  return record<T>("attention_mix", std::move(out), std::move(inputs),
                   [lanes, heads, hd, nq, nk, width, ix = std::move(ix)](Node<T>& self) {
    const std::size_t segs = ix.seg_rows.size();
    T* dp = self.input_wants_grad(0) ? self.input_grad(0).data() : nullptr;
    const T* pd = self.input_value(0).data();
    std::vector<T*> dv(segs, nullptr);
    std::vector<const T*> vd(segs);
    for (std::size_t s = 0; s < segs; ++s) {
      vd[s] = self.input_value(s + 1).data();
      if (self.input_wants_grad(s + 1)) dv[s] = self.input_grad(s + 1).data();
    }
    const long pairs = static_cast<long>(lanes * heads);
#pragma omp parallel for schedule(static) if (lanes * heads * nq * nk * hd >= kernels::kParallelThreshold)
    for (long lh = 0; lh < pairs; ++lh) {
      const std::size_t l = static_cast<std::size_t>(lh) / heads, h = static_cast<std::size_t>(lh) % heads;
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t row = (l * heads + h) * nq + i;
        const T* g = self.grad.data() + (l * nq + i) * width + h * hd;
        for (std::size_t j = 0; j < nk; ++j) {
          const std::size_t s = ix.segment[j];
          const std::size_t voff = (l * ix.seg_rows[s] + ix.local[j]) * width + h * hd;
          if (dp) {
            T dot{0};
            for (std::size_t e = 0; e < hd; ++e) dot += g[e] * vd[s][voff + e];
            dp[row * nk + j] += dot;
          }
          const T p = pd[row * nk + j];
          if (dv[s] && p != T{0}) {
            for (std::size_t e = 0; e < hd; ++e) dv[s][voff + e] += p * g[e];
          }
        }
      }
    }
  });
}

template <class T>
Var<T> weighted_nll_sum(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights) {
  const std::size_t n = logits.rows(), v = logits.cols();
  expect(targets.size() == n && weights.size() == n,
         "weighted_nll_sum: " + std::to_string(n) + " rows, " + std::to_string(targets.size()) +
             " targets, " + std::to_string(weights.size()) + " weights");
  std::vector<T> softmax(n * v, T{0});
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == T{0}) continue;
    expect(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < v,
           "weighted_nll_sum: target " + std::to_string(targets[i]) + " outside vocabulary");
    const T* row = logits.value().data() + i * v;
    T peak = row[0];
    for (std::size_t j = 1; j < v; ++j) peak = std::max(peak, row[j]);
    T z{0};
    for (std::size_t j = 0; j < v; ++j) {
      softmax[i * v + j] = std::exp(row[j] - peak);
      z += softmax[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) softmax[i * v + j] /= z;
    total += weights[i] * (std::log(z) + peak - row[targets[i]]);
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<T> wv(weights.begin(), weights.end());
  return record<T>("weighted_nll_sum", Tensor<T>(Shape{1}, total), {logits},
                   [n, v, softmax = std::move(softmax), tv = std::move(tv), wv = std::move(wv)](Node<T>& self) {
    T* d = self.input_grad(0).data();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      if (wv[i] == T{0}) continue;
      const T w = g * wv[i];
      for (std::size_t j = 0; j < v; ++j) d[i * v + j] += w * softmax[i * v + j];
      d[i * v + static_cast<std::size_t>(tv[i])] -= w;
    }
  });
}

template <class T>
Var<T> neg_entropy_sum(const Var<T>& probs, std::size_t rows_per_group) {
  const std::size_t r = probs.rows(), k = probs.cols();
  expect(rows_per_group > 0 && r % rows_per_group == 0,
         "neg_entropy_sum: " + std::to_string(r) + " rows in groups of " + std::to_string(rows_per_group));
  const std::size_t groups = r / rows_per_group;
  std::vector<T> pbar(groups * k, T{0});
  T total{0};
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < rows_per_group; ++i) {
      const T* row = probs.value().data() + (g * rows_per_group + i) * k;
      for (std::size_t j = 0; j < k; ++j) pbar[g * k + j] += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) {
      T& p = pbar[g * k + j];
      p /= static_cast<T>(rows_per_group);
      if (p > T{0}) total += p * std::log(p);
    }
  }
  return record<T>("neg_entropy_sum", Tensor<T>(Shape{1}, total), {probs},
                   [k, groups, rows_per_group, pbar = std::move(pbar)](Node<T>& self) {
    T* d = self.input_grad(0).data();
    const T g = self.grad[0] / static_cast<T>(rows_per_group);
    for (std::size_t grp = 0; grp < groups; ++grp) {
      for (std::size_t j = 0; j < k; ++j) {
        const T p = pbar[grp * k + j];
        if (!(p > T{0})) continue;
        const T dj = g * (std::log(p) + T{1});
        for (std::size_t i = 0; i < rows_per_group; ++i) d[(grp * rows_per_group + i) * k + j] += dj;
      }
    }
  });
}

#define FAM_INSTANTIATE_OPS(T)                                                                      \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> scale(const Var<T>&, T);                                                          \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sum(const Var<T>&);                                                               \
  template Var<T> mean(const Var<T>&);                                                              \
  template Var<T> mean_square(const Var<T>&);                                                       \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                       \
  template Var<T> gelu(const Var<T>&);                                                              \
  template Var<T> embedding(const Var<T>&, std::span<const int>);                                   \
  template Var<T> broadcast_lanes(const Var<T>&, std::size_t);                                      \
  template Var<T> concat_lanes(std::span<const Var<T>>, std::size_t);                               \
  template Var<T> slice_lanes(const Var<T>&, std::size_t, std::size_t, std::size_t);                \
  template Var<T> rope(const Var<T>&, std::span<const double>, const RopeConfig&);                  \
  template Tensor<T> softmax_masked(const Tensor<T>&, const AttentionMask&);                        \
  template Var<T> softmax_masked(const Var<T>&, const AttentionMask&);                              \
  template Var<T> attention_probs(const Var<T>&, std::span<const Var<T>>, const AttentionMask&,     \
                                  std::size_t, std::size_t, T);                                     \
  template Var<T> attention_mix(const Var<T>&, std::span<const Var<T>>, std::size_t, std::size_t);  \
  template Var<T> weighted_nll_sum(const Var<T>&, std::span<const int>, std::span<const T>);        \
  template Var<T> neg_entropy_sum(const Var<T>&, std::size_t);

FAM_INSTANTIATE_OPS(float)
FAM_INSTANTIATE_OPS(double)

}  // namespace fam
