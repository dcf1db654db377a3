#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fam/attention.hpp"
#include "fam/autograd.hpp"
#include "fam/mask.hpp"
#include "fam/rope.hpp"

namespace fam {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t ff_multiplier = 4;
  std::size_t vocab_size = 64;
  BlockLayout layout;
  double rope_base = 10000.0;
  bool stop_grad_memory = false;
  std::size_t num_fam_blocks = 1;  // previous FAM sets visible to input queries
  double ln_eps = 1e-6;

  std::size_t head_dim() const noexcept { return d_model / num_heads; }
  std::size_t ff_hidden() const noexcept { return ff_multiplier * d_model; }
  RopeConfig rope() const { return RopeConfig{rope_base, head_dim()}; }
  bool uses_fam() const noexcept { return layout.fam_len > 0; }
  void validate() const;
};

// Exact count of learnable scalars for a configuration.
std::size_t param_count(const ModelConfig& cfg);

// Per-layer streaming state. Its size is fixed by the configuration and the
// lane count, never by the number of tokens processed.
template <class T>
struct LayerState {
  KVRingBuffer<T> memory;
  KVRingBuffer<T> fam_history;  // K/V of FAM sets older than the previous one
  Var<T> fam;                   // previous FAM activations, [lanes*f x d]
  PositionIds fam_pos;
  bool first_block = true;

  std::size_t resident_bytes() const;
};

template <class T>
struct LayerWeights {
  Var<T> norm1_gain, norm1_bias, wq, wk, wv, wo;
  Var<T> norm2_gain, norm2_bias, ff_w1, ff_b1, ff_w2, ff_b2;
};

// Parameters bound as graph leaves for one forward pass.
template <class T>
struct BoundWeights {
  Var<T> embed;
  Var<T> fam_init;
  Var<T> final_gain, final_bias, head;
  std::vector<LayerWeights<T>> layers;
};

struct ForwardOptions {
  double position_offset = 0.0;   // Random Position Offset for this pass
  bool keep_attention = false;    // return attention probabilities per layer
};

template <class T>
struct BlockResult {
  Var<T> input;    // embedded tokens [lanes*L x d]
  Var<T> hidden;   // last-layer output [lanes*L x d]
  Var<T> logits;   // [lanes*L x vocab]
  std::vector<Var<T>> attention;  // per layer, [lanes*heads*queries x keys]
  std::size_t length = 0;
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }

  // Name-sorted.
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>* find(const std::string& name);
  std::size_t param_count() const;
  void zero_grad();

  BoundWeights<T> bind();
  // Binds constant copies; safe to use while the model is shared read-only.
  BoundWeights<T> bind_frozen() const;

  std::vector<LayerState<T>> initial_state() const;

  // One block of `lanes` sequences through every layer. tokens is lane-major
  // [lanes x L] with L <= block_size.
  BlockResult<T> forward_block(const BoundWeights<T>& w, std::span<const int> tokens, std::size_t lanes,
                               long block_start, std::vector<LayerState<T>>& states,
                               const ForwardOptions& opts) const;

  // Whole sequences, block by block. tokens is lane-major [lanes x T].
  std::vector<BlockResult<T>> forward(const BoundWeights<T>& w, std::span<const int> tokens, std::size_t lanes,
                                      std::vector<LayerState<T>>& states, const ForwardOptions& opts) const;

 private:
  Var<T> layer_forward(const LayerWeights<T>& w, const Var<T>& x, LayerState<T>& state, std::size_t lanes,
                       long block_start, const ForwardOptions& opts, Var<T>* probs) const;

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;  // name-sorted
};

// Logits of a blockwise forward regrouped to [lanes x T x vocab].
template <class T>
Tensor<T> gather_logits(const std::vector<BlockResult<T>>& blocks, std::size_t lanes);

// Streaming inference: blocks arrive one at a time and the per-layer state
// persists between calls. No graph is recorded.
template <class T>
class StreamSession {
 public:
  explicit StreamSession(const Model<T>& model, std::size_t lanes = 1);
  // Resumes from previously persisted state; throws ShapeError if it does not
  // fit this model and lane count.
  StreamSession(const Model<T>& model, std::size_t lanes, std::vector<LayerState<T>> persisted,
                long next_position);

  // Logits [lanes*L x vocab] for one block of lane-major tokens.
  Tensor<T> feed(std::span<const int> tokens);

  long position() const noexcept { return next_start_; }
  std::size_t blocks_seen() const noexcept { return blocks_; }
  const std::vector<LayerState<T>>& states() const noexcept { return states_; }
  std::size_t state_bytes() const;

 private:
  const Model<T>* model_;
  std::size_t lanes_;
  BoundWeights<T> weights_;
  std::vector<LayerState<T>> states_;
  long next_start_ = 0;
  std::size_t blocks_ = 0;
  bool closed_ = false;
};

}  // namespace fam
