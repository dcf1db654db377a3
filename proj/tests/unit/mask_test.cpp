#include <gtest/gtest.h>

#include <stdexcept>
#include <string>

#include "fam/mask.hpp"
#include "oracle.hpp"

namespace {

using fam::AttentionMask;
using fam::BlockGeometry;
using fam::BlockLayout;
using fam::Role;

bool same(const AttentionMask& mask, const oracle::Grid& grid) {
  if (mask.rows() != grid.size()) return false;
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    if (grid[r].size() != mask.cols()) return false;
    for (std::size_t c = 0; c < mask.cols(); ++c) {
      if (mask.allowed(r, c) != grid[r][c]) return false;
    }
  }
  return true;
}

BlockLayout layout(std::size_t b, std::size_t m, std::size_t f, std::optional<std::size_t> w = std::nullopt) {
  BlockLayout l;
  l.block_size = b;
  l.memory_segments = m;
  l.fam_len = f;
  l.xl_window = w;
  return l;
}

TEST(BswaMask, MatchesBruteForceExhaustively) {
  int checked = 0;
  for (std::size_t T = 1; T <= 16; ++T) {
    for (std::size_t b = 1; b <= 4; ++b) {
      for (std::size_t m = 0; m <= 3; ++m) {
        EXPECT_TRUE(same(fam::build_bswa_mask(T, layout(b, m, 0)), oracle::brute_force_mask({T, b, m, 0, {}})))
            << "T=" << T << " b=" << b << " m=" << m;
        ++checked;
        for (std::size_t w : {b, 2 * b}) {
          if (w > m * b) continue;  // a window wider than the cache is rejected
          EXPECT_TRUE(same(fam::build_bswa_mask(T, layout(b, m, 0, w)), oracle::brute_force_mask({T, b, m, 0, w})))
              << "T=" << T << " b=" << b << " m=" << m << " w=" << w;
          ++checked;
        }
      }
    }
  }
  EXPECT_GT(checked, 16 * 4 * 4);
}

TEST(BswaMask, GoldenGrid) {
  const std::string expected =
      "b=2 m=1 f=0 w=-\n"
      "#...\n"
      "##..\n"
      "###.\n"
      "####\n";
  EXPECT_EQ(fam::format_mask(fam::build_bswa_mask(4, layout(2, 1, 0)), layout(2, 1, 0)), expected);
}

TEST(BswaMask, ZeroMemoryIsBlockDiagonal) {
  const AttentionMask mask = fam::build_bswa_mask(6, layout(2, 0, 0));
  EXPECT_TRUE(mask.allowed(3, 2));
  EXPECT_FALSE(mask.allowed(2, 1));
  EXPECT_FALSE(mask.allowed(4, 3));
}

TEST(BswaMask, WindowOfOneBlockGivesSlidingWindow) {
  // w = b keeps exactly the last b tokens for every query once warm.
  for (std::size_t b = 1; b <= 4; ++b) {
    const AttentionMask mask = fam::build_bswa_mask(12, layout(b, 1, 0, b));
    for (std::size_t t = 0; t < 12; ++t) {
      for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(mask.allowed(t, k), k <= t && t - k < b);
    }
  }
}

TEST(BswaMask, WindowRestrictsPlainBswa) {
  for (std::size_t b = 1; b <= 4; ++b) {
    for (std::size_t m = 1; m <= 3; ++m) {
      const AttentionMask plain = fam::build_bswa_mask(16, layout(b, m, 0));
      const AttentionMask xl = fam::build_bswa_mask(16, layout(b, m, 0, m * b));
      for (std::size_t t = 0; t < 16; ++t) {
        for (std::size_t k = 0; k < 16; ++k) {
          if (xl.allowed(t, k)) EXPECT_TRUE(plain.allowed(t, k));
        }
      }
    }
  }
}

TEST(BswaMask, RejectsInvalidLayouts) {
  EXPECT_THROW(fam::build_bswa_mask(4, layout(0, 1, 0)), std::invalid_argument);
  EXPECT_THROW(fam::build_bswa_mask(4, layout(2, 1, 1)), std::invalid_argument);
  EXPECT_THROW(fam::build_bswa_mask(4, layout(2, 1, 0, 3)), std::invalid_argument);
  EXPECT_THROW(fam::build_bswa_mask(4, layout(2, 1, 0, 0)), std::invalid_argument);
  EXPECT_THROW(layout(2, 1, 3).validate(), std::invalid_argument);
}

TEST(FamMask, MatchesBruteForce) {
  for (std::size_t b = 1; b <= 4; ++b) {
    for (std::size_t m = 0; m <= 3; ++m) {
      for (std::size_t f = 1; f <= b; ++f) {
        EXPECT_TRUE(same(fam::build_fam_block_mask(layout(b, m, f)), oracle::brute_force_fam_mask({0, b, m, f, {}})))
            << "b=" << b << " m=" << m << " f=" << f;
        for (std::size_t w : {b, 2 * b}) {
          if (w > m * b) continue;
          EXPECT_TRUE(
              same(fam::build_fam_block_mask(layout(b, m, f, w)), oracle::brute_force_fam_mask({0, b, m, f, w})));
        }
      }
    }
  }
}

TEST(FamMask, RolePartition) {
  const AttentionMask mask = fam::build_fam_block_mask(layout(4, 2, 2));
  ASSERT_EQ(mask.rows(), 4u + 2u);
  ASSERT_EQ(mask.cols(), 8u + 2u + 4u);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    EXPECT_EQ(mask.row_role(r), r < 4 ? Role::Input : Role::FamQuery);
    EXPECT_GE(mask.admitted_in_row(r), 1u);
  }
  for (std::size_t c = 0; c < mask.cols(); ++c) {
    const Role want = c < 8 ? Role::Mem : c < 10 ? Role::FamKey : Role::Cur;
    EXPECT_EQ(mask.col_role(c), want);
  }
  // FAM queries never look at memory and always see the whole block.
  for (std::size_t r = 4; r < 6; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_FALSE(mask.allowed(r, c));
    for (std::size_t c = 8; c < 14; ++c) EXPECT_TRUE(mask.allowed(r, c));
  }
  // Every input query sees all FAM keys.
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_TRUE(mask.allowed(r, 8));
    EXPECT_TRUE(mask.allowed(r, 9));
  }
}

TEST(FamMask, GoldenGrid) {
  const std::string expected =
      "b=2 m=1 f=1 w=-\n"
      "mmfcc\n"
      "####. i\n"
      "##### i\n"
      "..### q\n";
  EXPECT_EQ(fam::format_mask(fam::build_fam_block_mask(layout(2, 1, 1)), layout(2, 1, 1)), expected);
}

TEST(FamMask, ShortBlockAndHistory) {
  BlockGeometry g;
  g.block_start = 8;
  g.cur_len = 2;
  g.mem_len = 4;
  g.fam_keys = 4;  // two FAM sets of two rows
  g.fam_queries = true;
  const AttentionMask mask = fam::build_block_mask(layout(4, 1, 2), g);
  ASSERT_EQ(mask.rows(), 4u);
  ASSERT_EQ(mask.cols(), 10u);
  // Inputs see both FAM sets; FAM queries only the newest.
  for (std::size_t c = 4; c < 8; ++c) EXPECT_TRUE(mask.allowed(0, c));
  EXPECT_FALSE(mask.allowed(2, 4));
  EXPECT_FALSE(mask.allowed(2, 5));
  EXPECT_TRUE(mask.allowed(2, 6));
  EXPECT_TRUE(mask.allowed(2, 9));
  EXPECT_FALSE(mask.allowed(0, 9));
}

TEST(FamMask, RejectsBadGeometry) {
  BlockGeometry g;
  g.cur_len = 5;
  EXPECT_THROW(fam::build_block_mask(layout(4, 1, 2), g), std::invalid_argument);
  g.cur_len = 4;
  g.fam_queries = true;
  g.fam_keys = 1;
  EXPECT_THROW(fam::build_block_mask(layout(4, 1, 2), g), std::invalid_argument);
  EXPECT_THROW(fam::build_block_mask(layout(4, 1, 0), g), std::invalid_argument);
  EXPECT_THROW(fam::build_fam_block_mask(layout(4, 1, 0)), std::invalid_argument);
}

TEST(AttentionMask, ValidateFlagsEmptyRows) {
  AttentionMask mask({Role::Input, Role::Input}, {Role::Cur, Role::Cur});
  mask.set(0, 0, true);
  EXPECT_THROW(mask.validate(), std::invalid_argument);
  mask.set(1, 1, true);
  EXPECT_NO_THROW(mask.validate());
}

}  // namespace
