#include "fam/mask.hpp"

#include <stdexcept>

namespace fam {

void BlockLayout::validate() const {
  if (block_size < 1) throw std::invalid_argument("block_size must be >= 1");
  if (fam_len > block_size) {
    throw std::invalid_argument("fam_len " + std::to_string(fam_len) + " exceeds block_size " +
                                std::to_string(block_size));
  }
  if (xl_window) {
    if (*xl_window < 1) throw std::invalid_argument("xl_window must be >= 1");
    if (*xl_window > memory_tokens()) {
      throw std::invalid_argument("xl_window " + std::to_string(*xl_window) +
                                  " exceeds memory_segments * block_size = " +
                                  std::to_string(memory_tokens()));
    }
  }
}

char role_code(Role r) noexcept {
  switch (r) {
    case Role::Input: return 'i';
    case Role::FamQuery: return 'q';
    case Role::Mem: return 'm';
    case Role::FamKey: return 'f';
    case Role::Cur: return 'c';
  }
  return '?';
}

AttentionMask::AttentionMask(std::vector<Role> row_roles, std::vector<Role> col_roles)
    : row_roles_(std::move(row_roles)),
      col_roles_(std::move(col_roles)),
      admissible_(row_roles_.size() * col_roles_.size(), 0) {}

std::size_t AttentionMask::admitted_in_row(std::size_t r) const noexcept {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols(); ++c) n += allowed(r, c) ? 1 : 0;
  return n;
}

void AttentionMask::validate() const {
  for (std::size_t r = 0; r < rows(); ++r) {
    if (admitted_in_row(r) == 0) {
      throw std::invalid_argument("attention mask row " + std::to_string(r) + " admits no key");
    }
  }
}

namespace {

bool inside_window(const BlockLayout& layout, long query_pos, long key_pos) {
  return !layout.xl_window || query_pos - key_pos < static_cast<long>(*layout.xl_window);
}

}  // namespace

AttentionMask build_bswa_mask(std::size_t seq_len, const BlockLayout& layout) {
  layout.validate();
  if (layout.fam_len != 0) throw std::invalid_argument("build_bswa_mask needs fam_len == 0");
  AttentionMask mask(std::vector<Role>(seq_len, Role::Input), std::vector<Role>(seq_len, Role::Cur));
  const std::size_t b = layout.block_size;
  const std::size_t m = layout.memory_segments;
  for (std::size_t t = 0; t < seq_len; ++t) {
    const std::size_t block = t / b;
    const std::size_t first = block >= m ? (block - m) * b : 0;
    for (std::size_t k = first; k <= t; ++k) {
      if (inside_window(layout, static_cast<long>(t), static_cast<long>(k))) mask.set(t, k, true);
    }
  }
  return mask;
}

AttentionMask build_block_mask(const BlockLayout& layout, const BlockGeometry& g) {
  layout.validate();
  if (g.cur_len == 0 || g.cur_len > layout.block_size) {
    throw std::invalid_argument("block of " + std::to_string(g.cur_len) + " tokens with block_size " +
                                std::to_string(layout.block_size));
  }
  if (g.fam_queries && layout.fam_len == 0) {
    throw std::invalid_argument("FAM queries requested with fam_len == 0");
  }
  if (g.fam_queries && g.fam_keys < layout.fam_len) {
    throw std::invalid_argument("FAM queries need the previous FAM among the keys");
  }
  const std::size_t f_rows = g.fam_queries ? layout.fam_len : 0;

  std::vector<Role> rows(g.cur_len, Role::Input);
  rows.insert(rows.end(), f_rows, Role::FamQuery);
  std::vector<Role> cols(g.mem_len, Role::Mem);
  cols.insert(cols.end(), g.fam_keys, Role::FamKey);
  cols.insert(cols.end(), g.cur_len, Role::Cur);
  AttentionMask mask(std::move(rows), std::move(cols));

  const std::size_t fam_begin = g.mem_len;
  const std::size_t cur_begin = g.mem_len + g.fam_keys;
  const long mem_start = g.block_start - static_cast<long>(g.mem_len);

  for (std::size_t i = 0; i < g.cur_len; ++i) {
    const long q = g.block_start + static_cast<long>(i);
    for (std::size_t j = 0; j < g.mem_len; ++j) {
      if (inside_window(layout, q, mem_start + static_cast<long>(j))) mask.set(i, j, true);
    }
    for (std::size_t j = 0; j < g.fam_keys; ++j) mask.set(i, fam_begin + j, true);
    for (std::size_t j = 0; j <= i; ++j) {
      if (inside_window(layout, q, g.block_start + static_cast<long>(j))) mask.set(i, cur_begin + j, true);
    }
  }
  // FAM queries see only the immediately previous FAM and the whole block.
  const std::size_t prev_fam = fam_begin + g.fam_keys - layout.fam_len;
  for (std::size_t i = 0; i < f_rows; ++i) {
    const std::size_t r = g.cur_len + i;
    for (std::size_t j = 0; j < layout.fam_len; ++j) mask.set(r, prev_fam + j, true);
    for (std::size_t j = 0; j < g.cur_len; ++j) mask.set(r, cur_begin + j, true);
  }
  return mask;
}

AttentionMask build_fam_block_mask(const BlockLayout& layout) {
  if (layout.fam_len == 0) throw std::invalid_argument("build_fam_block_mask needs fam_len >= 1");
  BlockGeometry g;
  g.block_start = static_cast<long>(layout.memory_tokens());
  g.cur_len = layout.block_size;
  g.mem_len = layout.memory_tokens();
  g.fam_keys = layout.fam_len;
  g.fam_queries = true;
  return build_block_mask(layout, g);
}

std::string format_mask(const AttentionMask& mask, const BlockLayout& layout) {
  std::string out = "b=" + std::to_string(layout.block_size) + " m=" +
                    std::to_string(layout.memory_segments) + " f=" + std::to_string(layout.fam_len) +
                    " w=" + (layout.xl_window ? std::to_string(*layout.xl_window) : std::string("-")) +
                    "\n";
  bool labelled = false;
  for (Role r : mask.row_roles()) labelled = labelled || r == Role::FamQuery;
  for (Role c : mask.col_roles()) labelled = labelled || c == Role::FamKey;
  if (labelled) {
    for (Role c : mask.col_roles()) out += role_code(c);
    out += "\n";
  }
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t c = 0; c < mask.cols(); ++c) out += mask.allowed(r, c) ? '#' : '.';
    if (labelled) {
      out += ' ';
      out += role_code(mask.row_role(r));
    }
    out += "\n";
  }
  return out;
}

}  // namespace fam
