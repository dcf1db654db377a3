#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fam/tensor.hpp"

using namespace fam;

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_EQ(shape_string(t.shape()), "[2x3x4]");
}

TEST(Tensor, FromValuesRejectsWrongCount) {
  EXPECT_THROW(Tensor<double>::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  const auto t = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, RequireFiniteRejectsNan) {
  Tensor<float> t(2, 2);
  EXPECT_NO_THROW(require_finite(t, "test"));
  t[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(require_finite(t, "test"), NumericError);
  t[3] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, LiveBytesTrackStorage) {
  const auto before = memory::live_bytes();
  {
    Tensor<double> t(10, 10);
    EXPECT_EQ(memory::live_bytes() - before, static_cast<std::int64_t>(100 * sizeof(double)));
  }
  EXPECT_EQ(memory::live_bytes(), before);
}

TEST(Tensor, CastConvertsPrecision) {
  const auto t = Tensor<double>::from_values({2}, {0.5, -1.25});
  const Tensor<float> f = t.cast<float>();
  EXPECT_EQ(f[0], 0.5f);
  EXPECT_EQ(f[1], -1.25f);
}
