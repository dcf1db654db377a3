#pragma once

// Brute-force references for the test suite. Everything here is written from
// the definitions with plain loops over std::vector<double> and shares no code
// with the library.

#include <cstddef>
#include <optional>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;
using Grid = std::vector<std::vector<bool>>;

struct MaskSpec {
  std::size_t T = 0;
  std::size_t b = 1;
  std::size_t m = 0;
  std::size_t f = 0;
  std::optional<std::size_t> w;
};

// Token-level BSWA mask [T x T]: key k is visible to query t when k <= t and
// k's block is at most m blocks behind t's, and t - k < w if a window is set.
Grid brute_force_mask(const MaskSpec& s);

// Single-block FAM mask with full memory. Rows: b inputs then f FAM queries.
// Columns: m*b memory keys, f previous-FAM keys, b current keys.
Grid brute_force_fam_mask(const MaskSpec& s);

// softmax(q k^T / sqrt(cols)) v, one query at a time.
Mat naive_full_attention(const Mat& q, const Mat& k, const Mat& v, bool causal);

struct LayerWeights {
  Vec g1, b1;
  Mat wq, wk, wv, wo;
  Vec g2, b2;
  Mat w1;
  Vec c1;
  Mat w2;
  Vec c2;
};

struct Weights {
  Mat embed;     // [vocab x d]
  Mat fam_init;  // [f x d], empty without FAM
  std::vector<LayerWeights> layers;
  Vec gf, bf;
  Mat head;  // [d x vocab]
  std::size_t heads = 1;
  double eps = 1e-6;
  double rope_base = 10000.0;
};

struct MemoryBlock {
  Mat k, v;  // unrotated
  std::vector<double> pos;
};

struct Alg2Out {
  Mat out;  // [L x d]
  Mat fam;  // [f x d]
  Mat k, v;  // unrotated current-block keys and values
};

// One layer over one block, line by line: Z = [I; F], H = LN(Z), QKV, rotary
// positions, masked attention (inputs see memory, previous FAM and the causal
// block; FAM queries see previous FAM and the whole block), A = attn Wo + [I;
// F or 0], out = FF(LN(A)) + A. With an empty F this is the BSWA layer.
Alg2Out alg2_reference(const Mat& input, const Mat& fam_prev, bool zero_fam_residual, const LayerWeights& w,
                       const Weights& cfg, long block_start, const std::vector<double>& fam_pos,
                       const std::vector<MemoryBlock>& memory);

// Whole model, block by block, with memory capacity m and FAM length f. Returns
// next-token logits [T x vocab].
Mat reference_model_logits(const Weights& w, const std::vector<int>& tokens, std::size_t b, std::size_t m,
                           std::size_t f);

// Negative entropy of head- and query-averaged attention, averaged over batch
// and blocks. p is laid out [B x blocks x H x Lq x Lk] row-major.
double diversity_loop(const Vec& p, std::size_t B, std::size_t blocks, std::size_t H, std::size_t Lq,
                      std::size_t Lk);

// Plain causal transformer over the whole sequence at once (no blocks, no FAM).
Mat naive_causal_model_logits(const Weights& w, const std::vector<int>& tokens);

}  // namespace oracle
