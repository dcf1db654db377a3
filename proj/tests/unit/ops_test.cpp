#include <gtest/gtest.h>

#include <cmath>

#include "fam/attention.hpp"
#include "fam/ops.hpp"

using namespace fam;

namespace {

AttentionMask full(std::size_t r, std::size_t c) {
  AttentionMask m(std::vector<Role>(r, Role::Input), std::vector<Role>(c, Role::Cur));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) m.set(i, j, true);
  }
  return m;
}

Tensor<double> randn(Shape s, std::uint64_t seed) {
  Tensor<double> t(std::move(s));
  Rng rng(seed);
  std::normal_distribution<double> d;
  for (double& x : t.values()) x = d(rng);
  return t;
}

}  // namespace

TEST(SoftmaxMasked, UniformLogitsGiveUniformRows) {
  const auto p = softmax_masked(Tensor<double>(1, 4), full(1, 4));
  for (double v : p.values()) EXPECT_EQ(v, 0.25);
}

TEST(SoftmaxMasked, MaskedEntryIsExactlyZero) {
  AttentionMask m = full(1, 2);
  m.set(0, 1, false);
  const auto p = softmax_masked(Tensor<double>::from_values({1, 2}, {0.0, 1e6}), m);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 0.0);
}

TEST(SoftmaxMasked, RowsSumToOne) {
  const auto p = softmax_masked(randn({3, 5}, 2), full(3, 5));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(SoftmaxMasked, FullyMaskedRowThrows) {
  AttentionMask m = full(2, 2);
  m.set(1, 0, false);
  m.set(1, 1, false);
  EXPECT_THROW(softmax_masked(Tensor<double>(2, 2), m), std::invalid_argument);
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  NoGradGuard g;
  const auto y = layer_norm(Var<double>::constant(Tensor<double>(1, 4, 3.0)),
                            Var<double>::constant(Tensor<double>({4}, 1.0)),
                            Var<double>::constant(Tensor<double>({4})), 1e-6);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalisedRowUnchanged) {
  NoGradGuard g;
  const auto y = layer_norm(Var<double>::constant(Tensor<double>::from_values({1, 2}, {1.0, -1.0})),
                            Var<double>::constant(Tensor<double>({2}, 1.0)),
                            Var<double>::constant(Tensor<double>({2})), 0.0);
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_EQ(y.value()[1], -1.0);
}

TEST(LayerNorm, RandomRowMoments) {
  NoGradGuard g;
  Tensor<double> x = randn({1, 32}, 5);
  for (double& v : x.values()) v *= 2.0;
  double xmu = 0, xvar = 0;
  for (double v : x.values()) xmu += v / 32;
  for (double v : x.values()) xvar += (v - xmu) * (v - xmu) / 32;
  const auto y = layer_norm(Var<double>::constant(x), Var<double>::constant(Tensor<double>({32}, 1.0)),
                            Var<double>::constant(Tensor<double>({32})), 1e-6);
  double mu = 0, var = 0;
  for (double v : y.value().values()) mu += v / 32;
  for (double v : y.value().values()) var += (v - mu) * (v - mu) / 32;
  EXPECT_LE(std::abs(mu), 1e-12);
  EXPECT_LE(std::abs(var - 1.0), 1e-6);
  // eps enters the variance: the normalised variance is exactly s2 / (s2 + eps).
  EXPECT_NEAR(var, xvar / (xvar + 1e-6), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  NoGradGuard g;
  EXPECT_THROW(matmul(Var<double>::constant(Tensor<double>(2, 3)), Var<double>::constant(Tensor<double>(2, 3))),
               ShapeError);
}

TEST(Attend, SingleAdmissibleKeyCopiesValue) {
  AttentionMask m = full(1, 3);
  m.set(0, 0, false);
  m.set(0, 2, false);
  const auto v = randn({3, 4}, 7);
  const auto out = attend(randn({1, 4}, 8), randn({3, 4}, 9), v, m, 0.5);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out[c], v.at(1, c));
}

TEST(Attend, IdenticalKeysAverageValues) {
  Tensor<double> k(3, 2, 0.7);
  const auto v = randn({3, 2}, 3);
  const auto out = attend(randn({1, 2}, 4), k, v, full(1, 3), 1.0);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[c], (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3, 1e-15);
}

TEST(Attend, HeadsSplitColumns) {
  // Two heads over 4 columns equal two separate single-head calls.
  const auto q = randn({2, 4}, 1), k = randn({3, 4}, 2), v = randn({3, 4}, 3);
  const auto both = attend(q, k, v, full(2, 3), 0.5, 2);
  auto half = [](const Tensor<double>& t, std::size_t h) {
    Tensor<double> o(t.rows(), 2);
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < 2; ++c) o.at(r, c) = t.at(r, h * 2 + c);
    }
    return o;
  };
  for (std::size_t h = 0; h < 2; ++h) {
    const auto one = attend(half(q, h), half(k, h), half(v, h), full(2, 3), 0.5);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(both.at(r, h * 2 + c), one.at(r, c), 1e-15);
    }
  }
}

TEST(WeightedNll, UniformLogitsGiveLogV) {
  NoGradGuard g;
  const std::vector<int> t = {1, 2};
  const std::vector<double> w = {1.0, 1.0};
  const auto l = weighted_nll_sum<double>(Var<double>::constant(Tensor<double>(2, 8)), t, w);
  EXPECT_NEAR(l.value()[0], 2 * std::log(8.0), 1e-12);
}
