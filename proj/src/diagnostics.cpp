#include "fam/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fam/ops.hpp"

namespace fam {

template <class T>
GradCheckResult grad_check(const std::function<Var<T>()>& loss_fn, std::span<Parameter<T>* const> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");
  for (Parameter<T>* p : params) p->zero_grad();
  const Var<T> loss = loss_fn();
  if (loss.value().size() != 1) throw ShapeError("grad_check: loss must be scalar");
  backward(loss);

  auto eval = [&] {
    NoGradGuard guard;
    return loss_fn().value()[0];
  };
  const T base = eval();
  if (eval() != base || base != loss.value()[0]) {
    throw std::runtime_error("grad_check: loss function is not deterministic");
  }

  GradCheckResult r;
  for (Parameter<T>* p : params) {
    Tensor<T>& w = p->value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T saved = w[i];
      w[i] = static_cast<T>(saved + h);
      const T up = eval();
      w[i] = static_cast<T>(saved - h);
      const T down = eval();
      w[i] = saved;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * h);
      const double analytic = static_cast<double>(p->grad()[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++r.coordinates;
      if (rel > r.max_relative_error || r.worst_parameter.empty()) {
        r.max_relative_error = rel;
        r.worst_parameter = p->name();
        r.worst_index = i;
        r.analytic = analytic;
        r.numeric = numeric;
      }
    }
  }
  return r;
}

template <class T>
std::vector<double> receptive_field_probe(Model<T>& model, std::span<const int> tokens, std::size_t kmax) {
  model.zero_grad();
  std::vector<LayerState<T>> states = model.initial_state();
  const BoundWeights<T> w = model.bind();
  const auto blocks = model.forward(w, tokens, 1, states, ForwardOptions{});
  backward(mean(blocks.back().hidden));
  std::vector<double> out(kmax + 1, 0.0);
  for (std::size_t k = 0; k <= kmax && k < blocks.size(); ++k) {
    const Tensor<T> g = blocks[blocks.size() - 1 - k].input.grad();
    double s = 0.0;
    for (T v : g.values()) s += std::abs(static_cast<double>(v));
    out[k] = s;
  }
  model.zero_grad();
  return out;
}

template GradCheckResult grad_check(const std::function<Var<float>()>&, std::span<Parameter<float>* const>, double);
template GradCheckResult grad_check(const std::function<Var<double>()>&, std::span<Parameter<double>* const>, double);
template std::vector<double> receptive_field_probe(Model<float>&, std::span<const int>, std::size_t);
template std::vector<double> receptive_field_probe(Model<double>&, std::span<const int>, std::size_t);

}  // namespace fam
