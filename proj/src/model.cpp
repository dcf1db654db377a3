#include "fam/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "fam/ops.hpp"

namespace fam {

void ModelConfig::validate() const {
  layout.validate();
  if (num_layers == 0) throw std::invalid_argument("num_layers must be >= 1");
  if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (head_dim() % 2 != 0) throw std::invalid_argument("head_dim must be even for rotary embedding");
  if (ff_multiplier == 0) throw std::invalid_argument("ff_multiplier must be >= 1");
  if (vocab_size == 0) throw std::invalid_argument("vocab_size must be >= 1");
  if (num_fam_blocks == 0) throw std::invalid_argument("num_fam_blocks must be >= 1");
  if (!(ln_eps >= 0.0)) throw std::invalid_argument("ln_eps must be >= 0");
}

std::size_t param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, h = cfg.ff_hidden(), v = cfg.vocab_size;
  const std::size_t per_layer = 2 * d + 4 * d * d + 2 * d + d * h + h + h * d + d;
  return v * d + cfg.num_layers * per_layer + 2 * d + d * v + cfg.layout.fam_len * d;
}

template <class T>
std::size_t LayerState<T>::resident_bytes() const {
  std::size_t n = memory.resident_bytes() + fam_history.resident_bytes();
  if (fam.defined()) n += fam.value().bytes();
  n += fam_pos.positions.capacity() * sizeof(long);
  return n;
}

namespace {

std::string layer_name(std::size_t i) {
  std::string s = std::to_string(i);
  if (s.size() < 2) s.insert(0, 2 - s.size(), '0');
  return "layer" + s;
}

template <class T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <class T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.d_model, h = cfg_.ff_hidden(), v = cfg_.vocab_size;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.num_layers));
  auto add = [&](std::string name, Tensor<T> value) {
    params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value)));
  };
  // Draw order is fixed; FAM initialisation comes last so that enabling FAM
  // leaves every other parameter unchanged for the same seed.
  add("embed/table", normal<T>({v, d}, 1.0, rng));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = layer_name(l);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    add(p + "/norm1/gain", Tensor<T>(Shape{d}, T{1}));
    add(p + "/norm1/bias", Tensor<T>(Shape{d}));
    add(p + "/attn/wq", normal<T>({d, d}, s, rng));
    add(p + "/attn/wk", normal<T>({d, d}, s, rng));
    add(p + "/attn/wv", normal<T>({d, d}, s, rng));
    add(p + "/attn/wo", normal<T>({d, d}, s * residual_scale, rng));
    add(p + "/norm2/gain", Tensor<T>(Shape{d}, T{1}));
    add(p + "/norm2/bias", Tensor<T>(Shape{d}));
    add(p + "/ff/w1", normal<T>({d, h}, s, rng));
    add(p + "/ff/b1", Tensor<T>(Shape{h}));
    add(p + "/ff/w2", normal<T>({h, d}, residual_scale / std::sqrt(static_cast<double>(h)), rng));
    add(p + "/ff/b2", Tensor<T>(Shape{d}));
  }
  add("final_norm/gain", Tensor<T>(Shape{d}, T{1}));
  add("final_norm/bias", Tensor<T>(Shape{d}));
  add("head/w", normal<T>({d, v}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  if (cfg_.uses_fam()) add("fam/init", normal<T>({cfg_.layout.fam_len, d}, 1.0, rng));
  std::sort(params_.begin(), params_.end(), [](const auto& a, const auto& b) { return a->name() < b->name(); });
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  std::vector<const Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
Parameter<T>* Model<T>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name() == name) return p.get();
  }
  return nullptr;
}

template <class T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

template <class T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

namespace {

template <class T, class Binder>
BoundWeights<T> bind_with(const ModelConfig& cfg, Binder&& get) {
  BoundWeights<T> w;
  w.embed = get("embed/table");
  if (cfg.uses_fam()) w.fam_init = get("fam/init");
  w.final_gain = get("final_norm/gain");
  w.final_bias = get("final_norm/bias");
  w.head = get("head/w");
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = layer_name(l);
    LayerWeights<T> lw;
    lw.norm1_gain = get(p + "/norm1/gain");
    lw.norm1_bias = get(p + "/norm1/bias");
    lw.wq = get(p + "/attn/wq");
    lw.wk = get(p + "/attn/wk");
    lw.wv = get(p + "/attn/wv");
    lw.wo = get(p + "/attn/wo");
    lw.norm2_gain = get(p + "/norm2/gain");
    lw.norm2_bias = get(p + "/norm2/bias");
    lw.ff_w1 = get(p + "/ff/w1");
    lw.ff_b1 = get(p + "/ff/b1");
    lw.ff_w2 = get(p + "/ff/w2");
    lw.ff_b2 = get(p + "/ff/b2");
    w.layers.push_back(std::move(lw));
  }
  return w;
}

}  // namespace

template <class T>
BoundWeights<T> Model<T>::bind() {
  return bind_with<T>(cfg_, [this](const std::string& name) { return Var<T>::bind(*find(name)); });
}

template <class T>
BoundWeights<T> Model<T>::bind_frozen() const {
  return bind_with<T>(cfg_, [this](const std::string& name) {
    for (const auto& p : params_) {
      if (p->name() == name) return Var<T>::constant(p->value());
    }
    throw std::logic_error("missing parameter " + name);
  });
}

template <class T>
std::vector<LayerState<T>> Model<T>::initial_state() const {
  std::vector<LayerState<T>> states;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    LayerState<T> s;
    s.memory = KVRingBuffer<T>(cfg_.layout.memory_segments);
    s.fam_history = KVRingBuffer<T>(cfg_.uses_fam() ? cfg_.num_fam_blocks - 1 : 0);
    states.push_back(std::move(s));
  }
  return states;
}

template <class T>
Var<T> Model<T>::layer_forward(const LayerWeights<T>& w, const Var<T>& x, LayerState<T>& st, std::size_t lanes,
                               long block_start, const ForwardOptions& opts, Var<T>* probs_out) const {
  const BlockLayout& layout = cfg_.layout;
  const std::size_t len = x.rows() / lanes;
  const std::size_t f = layout.fam_len;
  const bool use_fam = f > 0;
  const RopeConfig rope_cfg = cfg_.rope();
  const T eps = static_cast<T>(cfg_.ln_eps);

  Var<T> z = x;
  if (use_fam) {
    const Var<T> parts[] = {x, st.fam};
    z = concat_lanes<T>(parts, lanes);
  }
  const Var<T> h = layer_norm(z, w.norm1_gain, w.norm1_bias, eps);
  const Var<T> q = matmul(h, w.wq);
  const Var<T> k = matmul(h, w.wk);
  const Var<T> v = matmul(h, w.wv);

  std::vector<double> pos(len + (use_fam ? f : 0));
  for (std::size_t i = 0; i < len; ++i) pos[i] = static_cast<double>(block_start + static_cast<long>(i)) + opts.position_offset;
  for (std::size_t i = 0; use_fam && i < f; ++i) pos[len + i] = st.fam_pos.at(i) + opts.position_offset;
  const Var<T> qr = rope(q, pos, rope_cfg);
  const Var<T> kr = rope(k, pos, rope_cfg);

  std::vector<Var<T>> keys, values;
  std::size_t mem_len = 0;
  for (const CachedBlock<T>* blk : st.memory.read()) {
    Var<T> km = blk->keys, vm = blk->values;
    if (cfg_.stop_grad_memory) {
      km = detach(km);
      vm = detach(vm);
    }
    std::vector<double> mp = blk->positions.resolved();
    for (double& p : mp) p += opts.position_offset;
    keys.push_back(rope(km, mp, rope_cfg));
    values.push_back(vm);
    mem_len += blk->positions.size();
  }
  std::size_t fam_keys = 0;
  for (const CachedBlock<T>* blk : st.fam_history.read()) {
    std::vector<double> fp = blk->positions.resolved();
    for (double& p : fp) p += opts.position_offset;
    keys.push_back(rope(blk->keys, fp, rope_cfg));
    values.push_back(blk->values);
    fam_keys += blk->positions.size();
  }
  if (use_fam) {
    keys.push_back(slice_lanes(kr, lanes, len, f));
    values.push_back(slice_lanes(v, lanes, len, f));
    fam_keys += f;
  }
  const Var<T> v_cur = use_fam ? slice_lanes(v, lanes, 0, len) : v;
  keys.push_back(use_fam ? slice_lanes(kr, lanes, 0, len) : kr);
  values.push_back(v_cur);

  BlockGeometry g;
  g.block_start = block_start;
  g.cur_len = len;
  g.mem_len = mem_len;
  g.fam_keys = fam_keys;
  g.fam_queries = use_fam;
  const AttentionMask mask = build_block_mask(layout, g);

  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));
  const Var<T> probs = attention_probs<T>(qr, keys, mask, lanes, cfg_.num_heads, attn_scale);
  if (probs_out) *probs_out = probs;
  const Var<T> mixed = attention_mix<T>(probs, values, lanes, cfg_.num_heads);

  Var<T> residual = x;
  if (use_fam) {
    // The first FAM update starts from a zero residual: the seed carries no context.
    const Var<T> fam_res =
        st.first_block ? Var<T>::constant(Tensor<T>(lanes * f, cfg_.d_model)) : st.fam;
    const Var<T> parts[] = {x, fam_res};
    residual = concat_lanes<T>(parts, lanes);
  }
  const Var<T> a = add(matmul(mixed, w.wo), residual);
  const Var<T> hf = layer_norm(a, w.norm2_gain, w.norm2_bias, eps);
  const Var<T> ff = add_bias(matmul(gelu(add_bias(matmul(hf, w.ff_w1), w.ff_b1)), w.ff_w2), w.ff_b2);
  const Var<T> out = add(ff, a);

  const Var<T> k_cur = use_fam ? slice_lanes(k, lanes, 0, len) : k;
  if (len == layout.block_size) {
    st.memory.push(k_cur, v_cur, PositionIds::range(block_start, len));
  }
  if (!use_fam) {
    st.first_block = false;
    return out;
  }
  if (st.fam_history.capacity() > 0) {
    st.fam_history.push(slice_lanes(k, lanes, len, f), slice_lanes(v, lanes, len, f), st.fam_pos);
  }
  st.fam = slice_lanes(out, lanes, len, f);
  st.fam_pos = len >= f ? fam_positions(block_start, len, f)
                        : PositionIds::range(block_start + static_cast<long>(len) - static_cast<long>(f), f);
  st.first_block = false;
  return slice_lanes(out, lanes, 0, len);
}

template <class T>
BlockResult<T> Model<T>::forward_block(const BoundWeights<T>& w, std::span<const int> tokens, std::size_t lanes,
                                       long block_start, std::vector<LayerState<T>>& states,
                                       const ForwardOptions& opts) const {
  if (lanes == 0 || tokens.empty() || tokens.size() % lanes != 0) {
    throw ShapeError("forward_block: " + std::to_string(tokens.size()) + " tokens over " +
                     std::to_string(lanes) + " lanes");
  }
  const std::size_t len = tokens.size() / lanes;
  if (len > cfg_.layout.block_size) {
    throw ShapeError("forward_block: block of " + std::to_string(len) + " tokens exceeds block_size " +
                     std::to_string(cfg_.layout.block_size));
  }
  if (states.size() != cfg_.num_layers) throw ShapeError("forward_block: state has wrong layer count");
  const std::size_t f = cfg_.layout.fam_len;

  BlockResult<T> result;
  result.length = len;
  result.input = embedding(w.embed, tokens);
  Var<T> x = result.input;
  // On the first block the learned FAM prompt enters at the embedding level and
  // each layer's updated FAM seeds the layer above.
  Var<T> seed;
  if (f > 0 && w.fam_init.defined()) seed = broadcast_lanes(w.fam_init, lanes);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    LayerState<T>& st = states[l];
    if (f > 0) {
      if (!st.fam.defined()) {
        st.fam = seed;
        st.fam_pos = PositionIds::range(block_start - static_cast<long>(f), f);
        st.first_block = true;
      }
      if (st.fam.rows() != lanes * f || st.fam.cols() != cfg_.d_model) {
        throw ShapeError("forward_block: layer " + std::to_string(l) + " FAM state " +
                         shape_string(st.fam.shape()) + " does not match " + std::to_string(lanes) + " lanes");
      }
    }
    Var<T> probs;
    x = layer_forward(w.layers[l], x, st, lanes, block_start, opts, opts.keep_attention ? &probs : nullptr);
    if (opts.keep_attention) result.attention.push_back(probs);
    if (f > 0) seed = st.fam;
  }
  result.hidden = x;
  const Var<T> normed = layer_norm(x, w.final_gain, w.final_bias, static_cast<T>(cfg_.ln_eps));
  result.logits = matmul(normed, w.head);
  return result;
}

template <class T>
std::vector<BlockResult<T>> Model<T>::forward(const BoundWeights<T>& w, std::span<const int> tokens,
                                              std::size_t lanes, std::vector<LayerState<T>>& states,
                                              const ForwardOptions& opts) const {
  if (lanes == 0 || tokens.size() % lanes != 0) throw ShapeError("forward: tokens do not split into lanes");
  const std::size_t total = tokens.size() / lanes;
  const std::size_t b = cfg_.layout.block_size;
  std::vector<BlockResult<T>> out;
  std::vector<int> block;
  for (std::size_t start = 0; start < total; start += b) {
    const std::size_t len = std::min(b, total - start);
    block.resize(lanes * len);
    for (std::size_t l = 0; l < lanes; ++l) {
      std::copy_n(tokens.begin() + static_cast<long>(l * total + start), len, block.begin() + static_cast<long>(l * len));
    }
    out.push_back(forward_block(w, block, lanes, static_cast<long>(start), states, opts));
  }
  return out;
}

template <class T>
Tensor<T> gather_logits(const std::vector<BlockResult<T>>& blocks, std::size_t lanes) {
  if (blocks.empty()) return {};
  const std::size_t vocab = blocks[0].logits.cols();
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.length;
  Tensor<T> out(Shape{lanes, total, vocab});
  std::size_t start = 0;
  for (const auto& b : blocks) {
    for (std::size_t l = 0; l < lanes; ++l) {
      for (std::size_t i = 0; i < b.length; ++i) {
        const auto src = b.logits.value().row(l * b.length + i);
        std::copy(src.begin(), src.end(), out.data() + ((l * total) + start + i) * vocab);
      }
    }
    start += b.length;
  }
  return out;
}

template <class T>
StreamSession<T>::StreamSession(const Model<T>& model, std::size_t lanes)
    : model_(&model), lanes_(lanes), weights_(model.bind_frozen()), states_(model.initial_state()) {
  if (lanes == 0) throw ShapeError("stream session needs at least one lane");
}

template <class T>
StreamSession<T>::StreamSession(const Model<T>& model, std::size_t lanes, std::vector<LayerState<T>> persisted,
                                long next_position)
    : StreamSession(model, lanes) {
  const ModelConfig& cfg = model.config();
  if (persisted.size() != cfg.num_layers) {
    throw ShapeError("persisted state has " + std::to_string(persisted.size()) + " layers, model has " +
                     std::to_string(cfg.num_layers));
  }
  for (const LayerState<T>& s : persisted) {
    if (s.memory.capacity() != cfg.layout.memory_segments) {
      throw ShapeError("persisted memory capacity does not match memory_segments");
    }
    for (const CachedBlock<T>* blk : s.memory.read()) {
      if (blk->keys.rows() != lanes * cfg.layout.block_size || blk->keys.cols() != cfg.d_model) {
        throw ShapeError("persisted key cache " + shape_string(blk->keys.shape()) + " does not fit the model");
      }
    }
    if (s.fam.defined() &&
        (s.fam.rows() != lanes * cfg.layout.fam_len || s.fam.cols() != cfg.d_model)) {
      throw ShapeError("persisted FAM " + shape_string(s.fam.shape()) + " does not fit the model");
    }
  }
  states_ = std::move(persisted);
  next_start_ = next_position;
}

template <class T>
Tensor<T> StreamSession<T>::feed(std::span<const int> tokens) {
  if (closed_) throw std::logic_error("stream already ended with a partial block");
  NoGradGuard guard;
  ForwardOptions opts;
  BlockResult<T> r = model_->forward_block(weights_, tokens, lanes_, next_start_, states_, opts);
  if (r.length < model_->config().layout.block_size) closed_ = true;
  next_start_ += static_cast<long>(r.length);
  ++blocks_;
  return r.logits.value();
}

template <class T>
std::size_t StreamSession<T>::state_bytes() const {
  std::size_t n = 0;
  for (const LayerState<T>& s : states_) n += s.resident_bytes();
  return n;
}

template struct LayerState<float>;
template struct LayerState<double>;
template class Model<float>;
template class Model<double>;
template class StreamSession<float>;
template class StreamSession<double>;
template Tensor<float> gather_logits(const std::vector<BlockResult<float>>&, std::size_t);
template Tensor<double> gather_logits(const std::vector<BlockResult<double>>&, std::size_t);

}  // namespace fam
