#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fam {

// Block geometry shared by every mask and cache.
struct BlockLayout {
  std::size_t block_size = 16;       // tokens per block, also the sliding stride
  std::size_t memory_segments = 3;   // past blocks kept in the KV cache
  std::size_t fam_len = 4;           // feedback memory rows; 0 disables FAM
  std::optional<std::size_t> xl_window;  // TransformerXL-style key window in tokens

  void validate() const;
  std::size_t memory_tokens() const noexcept { return memory_segments * block_size; }
};

enum class Role : std::uint8_t { Input, FamQuery, Mem, FamKey, Cur };

char role_code(Role r) noexcept;

class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::vector<Role> row_roles, std::vector<Role> col_roles);

  std::size_t rows() const noexcept { return row_roles_.size(); }
  std::size_t cols() const noexcept { return col_roles_.size(); }
  bool allowed(std::size_t r, std::size_t c) const noexcept { return admissible_[r * cols() + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) noexcept { admissible_[r * cols() + c] = v ? 1 : 0; }
  Role row_role(std::size_t r) const noexcept { return row_roles_[r]; }
  Role col_role(std::size_t c) const noexcept { return col_roles_[c]; }
  const std::vector<Role>& row_roles() const noexcept { return row_roles_; }
  const std::vector<Role>& col_roles() const noexcept { return col_roles_; }

  std::size_t admitted_in_row(std::size_t r) const noexcept;
  // Throws if any query row has no admissible key.
  void validate() const;

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::vector<Role> row_roles_;
  std::vector<Role> col_roles_;
  std::vector<std::uint8_t> admissible_;
};

// Monolithic [T x T] mask of block sliding-window attention. Query t of block
// tau admits every key of blocks tau-m..tau-1 and keys <= t of its own block;
// in XL mode it additionally needs t - key < w.
AttentionMask build_bswa_mask(std::size_t seq_len, const BlockLayout& layout);

// Geometry of one blockwise attention call. Keys are laid out as
// [memory | FAM keys | current block].
struct BlockGeometry {
  long block_start = 0;
  std::size_t cur_len = 0;
  std::size_t mem_len = 0;    // memory tokens, contiguous and ending at block_start - 1
  std::size_t fam_keys = 0;   // FAM key rows, oldest set first
  bool fam_queries = false;   // append fam_len FAM query rows after the inputs
};

AttentionMask build_block_mask(const BlockLayout& layout, const BlockGeometry& geometry);

// Steady-state FAM block: full memory, full block, one previous FAM.
AttentionMask build_fam_block_mask(const BlockLayout& layout);

// Text grid: header `b=<b> m=<m> f=<f> w=<w|->`, one row per query with `#`
// admissible and `.` masked. When FAM roles are present a column-role line
// precedes the grid and every row carries its role code.
std::string format_mask(const AttentionMask& mask, const BlockLayout& layout);

}  // namespace fam
