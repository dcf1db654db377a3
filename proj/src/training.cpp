#include "fam/training.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "fam/ops.hpp"

namespace fam {

void TrainConfig::validate() const {
  if (!(rsp_probability >= 0.0 && rsp_probability <= 1.0)) {
    throw std::invalid_argument("rsp_probability must lie in [0, 1], got " + std::to_string(rsp_probability));
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(diversity_weight >= 0.0)) throw std::invalid_argument("diversity_weight must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
}

template <class T>
void restore_fam(const SavedFamStore<T>& store, std::vector<LayerState<T>>& states, std::size_t lanes,
                 long block_start) {
  if (!store.valid) throw std::logic_error("restore_fam: store is empty");
  if (store.fam.size() != states.size()) {
    throw ShapeError("restore_fam: store has " + std::to_string(store.fam.size()) + " layers, model has " +
                     std::to_string(states.size()));
  }
  for (std::size_t l = 0; l < states.size(); ++l) {
    const Tensor<T>& saved = store.fam[l];
    if (states[l].fam.defined() && states[l].fam.cols() != saved.cols()) {
      throw ShapeError("restore_fam: saved FAM " + shape_string(saved.shape()) + " does not fit layer state");
    }
    Tensor<T> wide(lanes * saved.rows(), saved.cols());
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      std::copy(saved.values().begin(), saved.values().end(), wide.data() + lane * saved.size());
    }
    states[l].fam = Var<T>::constant(std::move(wide));
    states[l].fam_pos = PositionIds::range(block_start - static_cast<long>(saved.rows()), saved.rows());
    states[l].first_block = false;
  }
}

template <class T>
void save_fam(const std::vector<LayerState<T>>& states, SavedFamStore<T>& store) {
  store.fam.clear();
  for (const LayerState<T>& s : states) {
    if (!s.fam.defined()) {
      store.clear();
      return;
    }
    const std::size_t f = s.fam_pos.size();
    const Tensor<T>& all = s.fam.value();
    Tensor<T> first(f, all.cols());
    std::copy_n(all.data(), f * all.cols(), first.data());
    store.fam.push_back(std::move(first));
  }
  store.valid = !store.fam.empty();
}

template <class T>
Var<T> weighted_xent(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights) {
  T total{0};
  for (T w : weights) total += w;
  if (!(total > T{0})) throw std::invalid_argument("weighted_xent: weights sum to zero");
  return scale(weighted_nll_sum(logits, targets, weights), T{1} / total);
}

template <class T>
T diversity_loss(const Tensor<T>& probs) {
  if (probs.rank() != 5) throw ShapeError("diversity_loss expects [B x blocks x H x Lq x Lk], got " +
                                          shape_string(probs.shape()));
  const auto& s = probs.shape();
  NoGradGuard guard;
  const Var<T> flat = Var<T>::constant(probs.reshaped(Shape{s[0] * s[1] * s[2] * s[3], s[4]}));
  return neg_entropy_sum(flat, s[2] * s[3]).value()[0] / static_cast<T>(s[0] * s[1]);
}

template <class T>
Var<T> diversity_loss(std::span<const Var<T>> probs, std::size_t lanes) {
  if (probs.empty()) throw std::invalid_argument("diversity_loss: no attention maps");
  Var<T> total;
  for (const Var<T>& p : probs) {
    const Var<T> term = neg_entropy_sum(p, p.rows() / lanes);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, T{1} / static_cast<T>(probs.size() * lanes));
}

template <class T>
void Adam<T>::step(std::span<Parameter<T>* const> params) {
  if (m_.empty()) {
    for (Parameter<T>* p : params) {
      m_.emplace_back(p->value().shape());
      v_.emplace_back(p->value().shape());
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam: parameter set changed between steps");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(t_)));
  const T lr = static_cast<T>(cfg_.learning_rate), eps = static_cast<T>(cfg_.adam_eps);
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i]->value().data();
    const T* g = params[i]->grad().data();
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (std::size_t j = 0; j < m_[i].size(); ++j) {
      m[j] = tb1 * m[j] + (T{1} - tb1) * g[j];
      v[j] = tb2 * v[j] + (T{1} - tb2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

template <class T>
double grad_norm(std::span<Parameter<T>* const> params) {
  double sq = 0.0;
  for (const Parameter<T>* p : params) {
    for (T g : p->grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

namespace {

struct Packed {
  std::vector<int> tokens;  // lane-major
  std::size_t lanes = 0, length = 0;
};

Packed pack(std::span<const PackedExample> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  Packed p;
  p.lanes = batch.size();
  p.length = batch[0].size();
  for (const PackedExample& ex : batch) {
    ex.validate();
    if (ex.size() != p.length) throw ShapeError("batch examples must share one length");
    p.tokens.insert(p.tokens.end(), ex.tokens.begin(), ex.tokens.end());
  }
  if (p.length < 2) throw ShapeError("examples need at least two tokens");
  return p;
}

// Next-token loss summed over blocks, normalised by the total target weight.
template <class T>
Var<T> sequence_loss(const std::vector<BlockResult<T>>& blocks, std::span<const PackedExample> batch) {
  const std::size_t lanes = batch.size(), total = batch[0].size();
  Var<T> nll;
  T weight_sum{0};
  std::size_t start = 0;
  std::vector<int> targets;
  std::vector<T> weights;
  for (const BlockResult<T>& b : blocks) {
    targets.assign(lanes * b.length, 0);
    weights.assign(lanes * b.length, T{0});
    bool any = false;
    for (std::size_t l = 0; l < lanes; ++l) {
      for (std::size_t i = 0; i < b.length; ++i) {
        const std::size_t t = start + i + 1;
        if (t >= total) continue;
        targets[l * b.length + i] = batch[l].tokens[t];
        weights[l * b.length + i] = static_cast<T>(batch[l].weights[t]);
        if (weights[l * b.length + i] != T{0}) any = true;
        weight_sum += weights[l * b.length + i];
      }
    }
    if (any) {
      const Var<T> term = weighted_nll_sum<T>(b.logits, targets, weights);
      nll = nll.defined() ? add(nll, term) : term;
    }
    start += b.length;
  }
  if (!(weight_sum > T{0})) throw std::invalid_argument("batch has no weighted targets");
  return scale(nll, T{1} / weight_sum);
}

}  // namespace

template <class T>
StepResult train_step(Model<T>& model, std::span<const PackedExample> batch, SavedFamStore<T>& store,
                      const TrainConfig& cfg, Adam<T>& opt, Rng& rng) {
  cfg.validate();
  const Packed packed = pack(batch);
  model.zero_grad();

  StepResult r;
  ForwardOptions opts;
  if (cfg.rpo_enabled) r.rpo_offset = sample_rpo(model.config().rope(), rng, RunMode::Train);
  opts.position_offset = r.rpo_offset;
  opts.keep_attention = cfg.diversity_weight > 0.0;

  std::vector<LayerState<T>> states = model.initial_state();
  if (model.config().uses_fam() && store.valid) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < cfg.rsp_probability) {
      restore_fam(store, states, packed.lanes);
      r.rsp_restored = true;
    }
  }

  const BoundWeights<T> w = model.bind();
  const auto blocks = model.forward(w, packed.tokens, packed.lanes, states, opts);
  const Var<T> loss = sequence_loss<T>(blocks, batch);
  Var<T> objective = loss;
  if (opts.keep_attention) {
    std::vector<Var<T>> maps;
    for (const auto& b : blocks) maps.insert(maps.end(), b.attention.begin(), b.attention.end());
    const Var<T> aux = diversity_loss<T>(maps, packed.lanes);
    r.aux_loss = static_cast<double>(aux.value()[0]);
    objective = add(loss, scale(aux, static_cast<T>(cfg.diversity_weight)));
  }
  r.loss = static_cast<double>(loss.value()[0]);
  backward(objective);

  auto params = model.parameters();
  if (cfg.grad_clip > 0.0) {
    const double norm = grad_norm<T>(params);
    if (norm > cfg.grad_clip) {
      const T factor = static_cast<T>(cfg.grad_clip / norm);
      for (Parameter<T>* p : params) {
        for (T& g : p->grad().values()) g *= factor;
      }
    }
  }
  opt.step(params);
  save_fam(states, store);
  return r;
}

template <class T>
double evaluate_loss(const Model<T>& model, std::span<const PackedExample> batch) {
  const Packed packed = pack(batch);
  NoGradGuard guard;
  std::vector<LayerState<T>> states = model.initial_state();
  const auto blocks = model.forward(model.bind_frozen(), packed.tokens, packed.lanes, states, ForwardOptions{});
  return static_cast<double>(sequence_loss<T>(blocks, batch).value()[0]);
}

#define FAM_INSTANTIATE_TRAINING(T)                                                                   \
  template void restore_fam(const SavedFamStore<T>&, std::vector<LayerState<T>>&, std::size_t, long); \
  template void save_fam(const std::vector<LayerState<T>>&, SavedFamStore<T>&);                      \
  template Var<T> weighted_xent(const Var<T>&, std::span<const int>, std::span<const T>);             \
  template T diversity_loss(const Tensor<T>&);                                                        \
  template Var<T> diversity_loss(std::span<const Var<T>>, std::size_t);                               \
  template class Adam<T>;                                                                             \
  template double grad_norm(std::span<Parameter<T>* const>);                                          \
  template StepResult train_step(Model<T>&, std::span<const PackedExample>, SavedFamStore<T>&,        \
                                 const TrainConfig&, Adam<T>&, Rng&);                                 \
  template double evaluate_loss(const Model<T>&, std::span<const PackedExample>);

FAM_INSTANTIATE_TRAINING(float)
FAM_INSTANTIATE_TRAINING(double)

}  // namespace fam
