#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fam/model.hpp"
#include "fam/rope.hpp"
#include "fam/tasks.hpp"

namespace fam {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t steps = 500;
  double rsp_probability = 0.8;
  bool rpo_enabled = true;
  double diversity_weight = 0.0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;

  void validate() const;
};

// End-of-step FAM of the first batch lane, one [f x d] tensor per layer.
template <class T>
struct SavedFamStore {
  std::vector<Tensor<T>> fam;
  bool valid = false;

  void clear() {
    fam.clear();
    valid = false;
  }
};

// Overwrites every layer's FAM with the saved tensors broadcast over lanes, as
// if a previous block had just been processed.
template <class T>
void restore_fam(const SavedFamStore<T>& store, std::vector<LayerState<T>>& states, std::size_t lanes,
                 long block_start = 0);

template <class T>
void save_fam(const std::vector<LayerState<T>>& states, SavedFamStore<T>& store);

// sum_i w_i * nll_i / sum_i w_i. Throws if the weights sum to zero.
template <class T>
Var<T> weighted_xent(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights);

// probs has shape [B x blocks x H x Lq x Lk]; result is the mean over batch and
// blocks of sum_k p_bar log p_bar with p_bar averaged over heads and queries.
template <class T>
T diversity_loss(const Tensor<T>& probs);

// Same quantity over per-(layer, block) attention_probs outputs.
template <class T>
Var<T> diversity_loss(std::span<const Var<T>> probs, std::size_t lanes);

template <class T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  // Applies one update from the accumulated gradients.
  void step(std::span<Parameter<T>* const> params);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Global L2 norm of all gradients, accumulated in double in parameter order.
template <class T>
double grad_norm(std::span<Parameter<T>* const> params);

struct StepResult {
  double loss = 0.0;
  double aux_loss = 0.0;
  double rpo_offset = 0.0;
  bool rsp_restored = false;
};

// One optimisation step over a batch of equal-length examples.
template <class T>
StepResult train_step(Model<T>& model, std::span<const PackedExample> batch, SavedFamStore<T>& store,
                      const TrainConfig& cfg, Adam<T>& opt, Rng& rng);

// Loss of a batch without touching parameters (no RPO, no RSP).
template <class T>
double evaluate_loss(const Model<T>& model, std::span<const PackedExample> batch);

}  // namespace fam
