#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fam/model.hpp"

namespace fam {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares backprop gradients of loss_fn with central differences
// (f(x+h) - f(x-h)) / 2h for every coordinate of every parameter. The relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator. loss_fn must
// bind the parameters it reads and return a scalar. Throws std::runtime_error
// if two evaluations at the same point differ.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>()>& loss_fn, std::span<Parameter<T>* const> params, double h);

// L1 norm of d(mean of last-block outputs)/d(embedded inputs of block last-k)
// for k = 0..kmax, from one backward pass over a single sequence.
template <class T>
std::vector<double> receptive_field_probe(Model<T>& model, std::span<const int> tokens, std::size_t kmax);

}  // namespace fam
