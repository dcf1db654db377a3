#include <gtest/gtest.h>

#include <random>

#include "fam/kernels.hpp"

using namespace fam;

namespace {

std::vector<double> random(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(Kernels, IdentityTimesIdentity) {
  const double i2[] = {1, 0, 0, 1};
  double c[4];
  kernels::matmul(i2, i2, c, 2, 2, 2, false);
  EXPECT_EQ(std::vector<double>(c, c + 4), std::vector<double>(i2, i2 + 4));
}

TEST(Kernels, HandComputedProduct) {
  const double a[] = {1, 2, 3, 4}, b[] = {1, 1};
  double c[2];
  kernels::matmul(a, b, c, 2, 2, 1, false);
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 7.0);
}

TEST(Kernels, MatchesTripleLoop) {
  const auto a = random(12, 1), b = random(8, 2);
  std::vector<double> c(6);
  kernels::matmul(a.data(), b.data(), c.data(), 3, 4, 2, false);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      EXPECT_NEAR(c[i * 2 + j], s, 1e-12);
    }
  }
}

TEST(Kernels, TransposedVariantsAgreeWithExplicitTranspose) {
  const std::size_t r = 5, k = 7, n = 3;
  const auto a = random(r * k, 3), b = random(n * k, 4), g = random(r * n, 5);
  std::vector<double> bt(k * n), at(k * r);
  kernels::serial::transpose(b.data(), bt.data(), n, k);
  kernels::serial::transpose(a.data(), at.data(), r, k);
  std::vector<double> c1(r * n), c2(r * n), d1(k * n), d2(k * n);
  kernels::matmul_a_bt(a.data(), b.data(), c1.data(), r, k, n, false);
  kernels::matmul(a.data(), bt.data(), c2.data(), r, k, n, false);
  EXPECT_EQ(c1, c2);
  kernels::matmul_at_b(a.data(), g.data(), d1.data(), r, k, n, false);
  kernels::matmul(at.data(), g.data(), d2.data(), k, r, n, false);
  for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_NEAR(d1[i], d2[i], 1e-12);
}

TEST(Kernels, ParallelIsBitwiseSerial) {
  // Wide enough to cross the parallel threshold.
  const std::size_t r = 96, k = 80, n = 72;
  const auto a = random(r * k, 6), b = random(k * n, 7), bt = random(n * k, 8), g = random(r * n, 9);
  std::vector<double> s(r * n, 1.0), p(r * n, 1.0);
  kernels::serial::matmul(a.data(), b.data(), s.data(), r, k, n, true);
  kernels::parallel::matmul(a.data(), b.data(), p.data(), r, k, n, true);
  EXPECT_EQ(s, p);
  kernels::serial::matmul_a_bt(a.data(), bt.data(), s.data(), r, k, n, false);
  kernels::parallel::matmul_a_bt(a.data(), bt.data(), p.data(), r, k, n, false);
  EXPECT_EQ(s, p);
  std::vector<double> sa(k * n), pa(k * n);
  kernels::serial::matmul_at_b(a.data(), g.data(), sa.data(), r, k, n, false);
  kernels::parallel::matmul_at_b(a.data(), g.data(), pa.data(), r, k, n, false);
  EXPECT_EQ(sa, pa);
}

TEST(Kernels, AccumulateAdds) {
  const double a[] = {2}, b[] = {3};
  double c[] = {1};
  kernels::matmul(a, b, c, 1, 1, 1, true);
  EXPECT_EQ(c[0], 7.0);
}
