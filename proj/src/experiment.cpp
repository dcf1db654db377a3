#include "fam/experiment.hpp"

#include <chrono>
#include <random>
#include <stdexcept>

namespace fam {

void TaskConfig::validate() const {
  if (name != "passkey" && name != "copy") throw std::invalid_argument("unknown task '" + name + "'");
  if (filler_min > filler_max) throw std::invalid_argument("filler_min exceeds filler_max");
  if (key_digits == 0) throw std::invalid_argument("key_digits must be >= 1");
  if (prefix_len == 0) throw std::invalid_argument("prefix_len must be >= 1");
}

void write_task_config(const TaskConfig& cfg, KeyValues& kv) {
  kv["task.name"] = cfg.name;
  kv["task.filler_min"] = std::to_string(cfg.filler_min);
  kv["task.filler_max"] = std::to_string(cfg.filler_max);
  kv["task.key_digits"] = std::to_string(cfg.key_digits);
  kv["task.filler"] = cfg.filler == Filler::Repeat ? "repeat" : "random";
  kv["task.prefix_len"] = std::to_string(cfg.prefix_len);
  kv["task.repeat_segment"] = std::to_string(cfg.repeat_segment);
  kv["task.filler_ramp"] = std::to_string(cfg.filler_ramp);
}

void read_task_config(const KeyValues& kv, TaskConfig& cfg) {
  auto size = [](const std::string& k, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
      n = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') {
      throw std::invalid_argument("config key " + k + ": expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(n);
  };
  for (const auto& [k, v] : kv) {
    if (k.rfind("task.", 0) != 0) continue;
    if (k == "task.name") cfg.name = v;
    else if (k == "task.filler_min") cfg.filler_min = size(k, v);
    else if (k == "task.filler_max") cfg.filler_max = size(k, v);
    else if (k == "task.key_digits") cfg.key_digits = size(k, v);
    else if (k == "task.filler") {
      if (v == "repeat") cfg.filler = Filler::Repeat;
      else if (v == "random") cfg.filler = Filler::Random;
      else throw std::invalid_argument("config key task.filler: expected repeat or random, got '" + v + "'");
    } else if (k == "task.prefix_len") cfg.prefix_len = size(k, v);
    else if (k == "task.repeat_segment") cfg.repeat_segment = size(k, v);
    else if (k == "task.filler_ramp") cfg.filler_ramp = size(k, v);
    else throw std::invalid_argument("unknown config key " + k);
  }
}

std::size_t TaskConfig::filler_cap(std::size_t step) const {
  if (filler_ramp == 0 || step >= filler_ramp) return filler_max;
  return filler_min + (filler_max - filler_min) * step / filler_ramp;
}

std::vector<PackedExample> make_batch(const ToyVocab& vocab, const TaskConfig& task, std::size_t lanes, Rng& rng,
                                      std::size_t step) {
  task.validate();
  std::uniform_int_distribution<std::size_t> len(task.filler_min, task.filler_cap(step));
  const std::size_t filler = len(rng);
  std::vector<PackedExample> batch;
  for (std::size_t i = 0; i < lanes; ++i) {
    PackedExample ex;
    if (task.name == "passkey") {
      ex = gen_passkey(vocab, PassKeyOptions{filler, task.key_digits, task.filler}, rng);
    } else {
      ex = gen_copy_task(vocab, task.prefix_len, filler, rng);
    }
    if (task.repeat_segment > 0) {
      ex = repeat_segment_augment(ex, vocab, rng, std::min(task.repeat_segment, ex.size()));
    }
    batch.push_back(std::move(ex));
  }
  return batch;
}

template <class T>
std::vector<StepRecord> train_loop(Model<T>& model, const TaskConfig& task, const TrainConfig& cfg,
                                   SavedFamStore<T>& store, const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  task.validate();
  const ToyVocab vocab;
  if (vocab.size() > model.config().vocab_size) {
    throw std::invalid_argument("model vocabulary " + std::to_string(model.config().vocab_size) +
                                " is smaller than the task vocabulary " + std::to_string(vocab.size()));
  }
  Rng data_rng(cfg.seed);
  Rng train_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Adam<T> opt(cfg);
  std::vector<StepRecord> log;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto batch = make_batch(vocab, task, cfg.batch_size, data_rng, step);
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord rec;
    rec.step = step;
    rec.result = train_step(model, std::span<const PackedExample>(batch), store, cfg, opt, train_rng);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_step) on_step(rec);
    log.push_back(rec);
  }
  return log;
}

template <class T>
double passkey_accuracy(const Model<T>& model, const ToyVocab& vocab, const PassKeyOptions& opts, std::size_t samples,
                        std::uint64_t seed, std::size_t lanes) {
  if (samples == 0 || lanes == 0) throw std::invalid_argument("passkey_accuracy needs samples and lanes");
  Rng rng(seed);
  const std::size_t b = model.config().layout.block_size;
  std::vector<bool> correct;
  while (correct.size() < samples) {
    const std::size_t n = std::min(lanes, samples - correct.size());
    std::vector<PackedExample> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(gen_passkey(vocab, opts, rng));
    const std::size_t total = batch[0].size();
    StreamSession<T> session(model, n);
    std::vector<Tensor<T>> logits(n, Tensor<T>(total, model.config().vocab_size));
    std::vector<int> block;
    for (std::size_t start = 0; start < total; start += b) {
      const std::size_t len = std::min(b, total - start);
      block.clear();
      for (const PackedExample& ex : batch) {
        block.insert(block.end(), ex.tokens.begin() + static_cast<long>(start),
                     ex.tokens.begin() + static_cast<long>(start + len));
      }
      const Tensor<T> out = session.feed(block);
      for (std::size_t l = 0; l < n; ++l) {
        std::copy_n(out.data() + l * len * out.cols(), len * out.cols(), logits[l].data() + start * out.cols());
      }
    }
    for (std::size_t l = 0; l < n; ++l) correct.push_back(passkey_correct(logits[l], batch[l]));
  }
  std::size_t hits = 0;
  for (bool c : correct) hits += c ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(correct.size());
}

template std::vector<StepRecord> train_loop(Model<float>&, const TaskConfig&, const TrainConfig&, SavedFamStore<float>&,
                                            const std::function<void(const StepRecord&)>&);
template std::vector<StepRecord> train_loop(Model<double>&, const TaskConfig&, const TrainConfig&,
                                            SavedFamStore<double>&, const std::function<void(const StepRecord&)>&);
template double passkey_accuracy(const Model<float>&, const ToyVocab&, const PassKeyOptions&, std::size_t,
                                 std::uint64_t, std::size_t);
template double passkey_accuracy(const Model<double>&, const ToyVocab&, const PassKeyOptions&, std::size_t,
                                 std::uint64_t, std::size_t);

}  // namespace fam
