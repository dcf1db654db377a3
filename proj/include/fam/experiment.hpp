#pragma once

// Training loop and PassKey evaluation shared by the command-line tool and the
// experiment tests.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fam/config.hpp"
#include "fam/model.hpp"
#include "fam/tasks.hpp"
#include "fam/training.hpp"

namespace fam {

struct TaskConfig {
  std::string name = "passkey";  // passkey | copy
  std::size_t filler_min = 0;    // passkey filler / copy gap, sampled per step
  std::size_t filler_max = 512;
  std::size_t key_digits = 3;
  Filler filler = Filler::Repeat;
  std::size_t prefix_len = 8;       // copy task
  std::size_t repeat_segment = 0;   // 0 disables repeat-segment augmentation
  // The upper end of the filler range grows linearly from filler_min to
  // filler_max over this many steps; 0 samples the full range from the start.
  std::size_t filler_ramp = 0;

  std::size_t filler_cap(std::size_t step) const;

  void validate() const;
};

void write_task_config(const TaskConfig& cfg, KeyValues& kv);
void read_task_config(const KeyValues& kv, TaskConfig& cfg);

// One batch for optimisation step `step` (1-based); every lane shares a single
// filler length drawn from [filler_min, filler_cap(step)].
std::vector<PackedExample> make_batch(const ToyVocab& vocab, const TaskConfig& task, std::size_t lanes, Rng& rng,
                                      std::size_t step = 0);

struct StepRecord {
  std::size_t step = 0;
  StepResult result;
  double wall_ms = 0.0;
};

// Runs cfg.steps optimisation steps. Data and training draw from separate
// generators seeded from cfg.seed. on_step may be empty.
template <class T>
std::vector<StepRecord> train_loop(Model<T>& model, const TaskConfig& task, const TrainConfig& cfg,
                                   SavedFamStore<T>& store, const std::function<void(const StepRecord&)>& on_step);

// Exact-match PassKey accuracy over `samples` examples at one filler length,
// with streaming inference in batches of `lanes`.
template <class T>
double passkey_accuracy(const Model<T>& model, const ToyVocab& vocab, const PassKeyOptions& opts, std::size_t samples,
                        std::uint64_t seed, std::size_t lanes = 16);

}  // namespace fam
