// famctl: train toy BSWA/FAM models, evaluate PassKey, dump masks, probe
// receptive fields and run gradient checks.
//
// Exit codes: 0 ok, 1 check failed, 2 usage or invalid input, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fam/checkpoint.hpp"
#include "fam/config.hpp"
#include "fam/diagnostics.hpp"
#include "fam/experiment.hpp"
#include "fam/mask.hpp"
#include "fam/model.hpp"
#include "fam/ops.hpp"
#include "fam/tasks.hpp"
#include "fam/training.hpp"

namespace {

using namespace fam;

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#ifndef FAM_BUILD_ID
#define FAM_BUILD_ID "unknown"
#endif

KeyValues preset(const std::string& name) {
  KeyValues kv;
  if (name == "tiny_fam" || name == "tiny_bswa") {
    kv["model.layers"] = "2";
    kv["model.d_model"] = "8";
    kv["model.heads"] = "2";
    kv["model.ff_multiplier"] = "2";
    kv["model.block"] = "2";
    kv["model.memory"] = "1";
    kv["model.fam"] = name == "tiny_fam" ? "1" : "0";
    kv["precision"] = "extended";
    return kv;
  }
  throw UsageError("unknown preset '" + name + "' (expected tiny_fam, tiny_bswa or a config file)");
}

// --config accepts a key=value file (a run manifest works) or a preset name.
KeyValues load_config(const std::string& arg) {
  if (arg.empty()) return {};
  if (std::filesystem::is_regular_file(arg)) {
    std::ifstream in(arg);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return parse_key_values(ss.str());
    } catch (const std::invalid_argument& e) {
      throw UsageError(arg + ": " + e.what());
    }
  }
  return preset(arg);
}

std::uint64_t resolve_seed(const CLI::App& cmd, std::uint64_t flag, const KeyValues& kv) {
  if (cmd.count("--seed")) return flag;
  if (kv.count("train.seed")) return std::stoull(kv.at("train.seed"));
  if (const char* env = std::getenv("FAM_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("FAM_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

// Model flags shared by several subcommands; applied over defaults and config.
struct ModelFlags {
  std::size_t layers = 0, dmodel = 0, heads = 0, ff = 0, vocab = 0, block = 0, memory = 0, fam = 0, nfam = 0,
              xl = 0;
  double rope_base = 0;
  bool stop_grad = false;
  std::string precision;

  void add(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "transformer layers");
    cmd->add_option("--dmodel", dmodel, "model width");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--ff-mult", ff, "feed-forward multiplier");
    cmd->add_option("--vocab", vocab, "vocabulary size");
    cmd->add_option("--block", block, "block size b");
    cmd->add_option("--memory,--m", memory, "memory segments m");
    cmd->add_option("--fam", fam, "FAM length f (0 disables FAM)");
    cmd->add_option("--num-fam-blocks", nfam, "previous FAM sets visible to input queries");
    cmd->add_option("--xl-window", xl, "TransformerXL-style token window");
    cmd->add_option("--rope-base", rope_base, "rotary base frequency");
    cmd->add_flag("--stop-grad", stop_grad, "stop gradients into cached memory");
    cmd->add_option("--precision", precision, "standard or extended")->check(CLI::IsMember({"standard", "extended"}));
  }

  void apply(const CLI::App* cmd, KeyValues& kv) const {
    auto set = [&](const char* flag, const char* key, const std::string& v) {
      if (cmd->count(flag)) kv[key] = v;
    };
    set("--layers", "model.layers", std::to_string(layers));
    set("--dmodel", "model.d_model", std::to_string(dmodel));
    set("--heads", "model.heads", std::to_string(heads));
    set("--ff-mult", "model.ff_multiplier", std::to_string(ff));
    set("--vocab", "model.vocab", std::to_string(vocab));
    set("--block", "model.block", std::to_string(block));
    set("--memory", "model.memory", std::to_string(memory));
    set("--fam", "model.fam", std::to_string(fam));
    set("--num-fam-blocks", "model.num_fam_blocks", std::to_string(nfam));
    set("--xl-window", "model.xl_window", std::to_string(xl));
    set("--rope-base", "model.rope_base", format_number(rope_base));
    if (stop_grad) kv["model.stop_grad_memory"] = "true";
    set("--precision", "precision", precision);
  }
};

ModelConfig model_config(const KeyValues& kv) {
  ModelConfig cfg;
  try {
    read_model_config(kv, cfg);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

std::string precision_of(const KeyValues& kv) {
  const auto it = kv.find("precision");
  return it == kv.end() ? "standard" : it->second;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config, out, task;
  ModelFlags model;
  double lr = 0, rsp = 0, diversity = 0, grad_clip = 0;
  std::size_t steps = 0, batch = 0, filler_min = 0, filler_max = 0, key_digits = 0, prefix_len = 0,
              repeat_segment = 0, filler_ramp = 0, log_every = 0;
  std::string filler;
  bool no_rpo = false, no_wall_clock = false;
  std::uint64_t seed = 0;
};

template <class T>
int run_train(const KeyValues& kv, const ModelConfig& mcfg, const TrainConfig& tcfg, const TaskConfig& task,
              const std::string& out_dir, bool wall_clock, std::size_t log_every) {
  std::filesystem::create_directories(out_dir);
  Model<T> model(mcfg, tcfg.seed);
  SavedFamStore<T> store;

  KeyValues manifest = kv;
  write_model_config(mcfg, manifest);
  write_train_config(tcfg, manifest);
  write_task_config(task, manifest);
  manifest["precision"] = precision_name<T>();
  manifest["run.param_count"] = std::to_string(model.param_count());
  manifest["run.build"] = FAM_BUILD_ID;
  manifest["run.out"] = out_dir;
  {
    std::ofstream m(out_dir + "/manifest.txt");
    m << format_key_values(manifest);
  }

  std::ofstream csv(out_dir + "/train.csv");
  csv << "step,loss,aux_loss,rpo_offset,rsp_restored,wall_ms\n";
  try {
    train_loop<T>(model, task, tcfg, store, [&](const StepRecord& r) {
      csv << r.step << ',' << format_number(r.result.loss) << ',' << format_number(r.result.aux_loss) << ','
          << format_number(r.result.rpo_offset) << ',' << (r.result.rsp_restored ? 1 : 0) << ','
          << (wall_clock ? format_number(r.wall_ms) : "0") << '\n';
      if (log_every && r.step % log_every == 0) {
        std::cerr << "step " << r.step << " loss " << r.result.loss << '\n';
      }
    });
  } catch (const NumericError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kNumeric;
  }
  KeyValues extra;
  write_train_config(tcfg, extra);
  write_task_config(task, extra);
  save_checkpoint(out_dir + "/model.famc", model, store, extra);
  std::cout << "wrote " << out_dir << "/model.famc (" << model.param_count() << " parameters)\n";
  return kOk;
}

int cmd_train(const CLI::App* cmd, const TrainArgs& a) {
  KeyValues kv = load_config(a.config);
  a.model.apply(cmd, kv);
  auto set = [&](const char* flag, const char* key, const std::string& v) {
    if (cmd->count(flag)) kv[key] = v;
  };
  set("--task", "task.name", a.task);
  set("--lr", "train.lr", format_number(a.lr));
  set("--steps", "train.steps", std::to_string(a.steps));
  set("--batch", "train.batch", std::to_string(a.batch));
  set("--rsp", "train.rsp", format_number(a.rsp));
  set("--diversity", "train.diversity", format_number(a.diversity));
  set("--grad-clip", "train.grad_clip", format_number(a.grad_clip));
  set("--filler-min", "task.filler_min", std::to_string(a.filler_min));
  set("--filler-max", "task.filler_max", std::to_string(a.filler_max));
  set("--key-digits", "task.key_digits", std::to_string(a.key_digits));
  set("--filler", "task.filler", a.filler);
  set("--prefix-len", "task.prefix_len", std::to_string(a.prefix_len));
  set("--repeat-segment", "task.repeat_segment", std::to_string(a.repeat_segment));
  set("--filler-ramp", "task.filler_ramp", std::to_string(a.filler_ramp));
  if (a.no_rpo) kv["train.rpo"] = "false";
  kv["train.seed"] = std::to_string(resolve_seed(*cmd, a.seed, kv));

  const ModelConfig mcfg = model_config(kv);
  TrainConfig tcfg;
  TaskConfig task;
  try {
    read_train_config(kv, tcfg);
    read_task_config(kv, task);
    tcfg.validate();
    task.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (precision_of(kv) == "extended") {
    return run_train<double>(kv, mcfg, tcfg, task, a.out, !a.no_wall_clock, a.log_every);
  }
  return run_train<float>(kv, mcfg, tcfg, task, a.out, !a.no_wall_clock, a.log_every);
}

// ---- eval-passkey --------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, out, tag, fillers = "0,64,128,256,512", filler = "repeat";
  std::size_t samples = 100, key_digits = 3, lanes = 16;
  std::uint64_t seed = 0;
};

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("not a comma-separated list of lengths: " + s);
    }
  }
  if (out.empty()) throw UsageError("empty filler grid");
  return out;
}

template <class T>
void eval_rows(const std::string& path, const EvalArgs& a, std::uint64_t seed, const std::string& tag,
               std::ostream& out) {
  const LoadedCheckpoint<T> ck = load_checkpoint<T>(path);
  const ToyVocab vocab;
  if (ck.model.config().vocab_size < vocab.size()) throw ShapeError("checkpoint vocabulary is too small for PassKey");
  out << "filler_len,accuracy,model\n";
  for (std::size_t filler : parse_list(a.fillers)) {
    PassKeyOptions opts{filler, a.key_digits, a.filler == "random" ? Filler::Random : Filler::Repeat};
    const double acc = passkey_accuracy(ck.model, vocab, opts, a.samples, seed + filler, a.lanes);
    out << filler << ',' << format_number(acc) << ',' << tag << '\n';
  }
}

int cmd_eval_passkey(const CLI::App* cmd, const EvalArgs& a) {
  const KeyValues kv = read_checkpoint_config(a.checkpoint);
  const std::uint64_t seed = resolve_seed(*cmd, a.seed, {});
  std::string tag = a.tag;
  if (tag.empty()) {
    ModelConfig cfg;
    read_model_config(kv, cfg);
    tag = cfg.uses_fam() ? "fam" : "bswa_m" + std::to_string(cfg.layout.memory_segments);
  }
  std::ofstream file;
  if (!a.out.empty()) file.open(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  if (precision_of(kv) == "extended") eval_rows<double>(a.checkpoint, a, seed, tag, out);
  else eval_rows<float>(a.checkpoint, a, seed, tag, out);
  return kOk;
}

// ---- dump-mask -----------------------------------------------------------

struct MaskArgs {
  std::size_t T = 0, b = 0, m = 0, f = 0, w = 0;
};

int cmd_dump_mask(const CLI::App* cmd, const MaskArgs& a) {
  BlockLayout layout;
  layout.block_size = a.b;
  layout.memory_segments = a.m;
  layout.fam_len = a.f;
  if (cmd->count("--w")) layout.xl_window = a.w;
  try {
    layout.validate();
    if (a.f == 0 && !cmd->count("--T")) throw std::invalid_argument("--T is required when --f is 0");
    const AttentionMask mask = a.f == 0 ? build_bswa_mask(a.T, layout) : build_fam_block_mask(layout);
    std::cout << format_mask(mask, layout);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return kOk;
}

// ---- probe-rf ------------------------------------------------------------

struct ProbeArgs {
  std::string arch = "fam", out;
  std::size_t layers = 2, m = 1, block = 4, fam = 2, dmodel = 8, heads = 2, kmax = 6, blocks = 0;
  std::uint64_t seed = 0;
};

int cmd_probe_rf(const CLI::App* cmd, const ProbeArgs& a) {
  ModelConfig cfg;
  cfg.num_layers = a.layers;
  cfg.d_model = a.dmodel;
  cfg.num_heads = a.heads;
  cfg.ff_multiplier = 2;
  cfg.layout.block_size = a.block;
  cfg.layout.memory_segments = a.m;
  cfg.layout.fam_len = a.arch == "fam" ? a.fam : 0;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const std::uint64_t seed = resolve_seed(*cmd, a.seed, {});
  Model<double> model(cfg, seed);
  const std::size_t blocks = a.blocks ? a.blocks : a.kmax + 1;
  if (blocks < a.kmax + 1) throw UsageError("--blocks must exceed --kmax");
  Rng rng(seed + 1);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  std::vector<int> tokens(blocks * cfg.layout.block_size);
  for (int& t : tokens) t = tok(rng);
  const std::vector<double> g = receptive_field_probe(model, tokens, a.kmax);

  std::ofstream file;
  if (!a.out.empty()) file.open(a.out);
  std::ostream& out = a.out.empty() ? std::cout : file;
  out << "k,gradient_l1,arch\n";
  for (std::size_t k = 0; k < g.size(); ++k) out << k << ',' << format_number(g[k]) << ',' << a.arch << '\n';
  return kOk;
}

// ---- grad-check ----------------------------------------------------------

struct GradArgs {
  std::string config = "tiny_fam";
  ModelFlags model;
  std::size_t blocks = 3;
  double h = 1e-5, threshold = 1e-5;
  std::uint64_t seed = 0;
};

int cmd_grad_check(const CLI::App* cmd, const GradArgs& a) {
  KeyValues kv = load_config(a.config);
  a.model.apply(cmd, kv);
  if (precision_of(kv) != "extended") throw UsageError("grad-check requires extended precision");
  const ModelConfig cfg = model_config(kv);
  const std::uint64_t seed = resolve_seed(*cmd, a.seed, kv);
  Model<double> model(cfg, seed);
  Rng rng(seed + 1);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  std::vector<int> tokens(a.blocks * cfg.layout.block_size);
  for (int& t : tokens) t = tok(rng);

  auto loss_fn = [&] {
    std::vector<LayerState<double>> states = model.initial_state();
    const auto blocks = model.forward(model.bind(), tokens, 1, states, ForwardOptions{});
    Var<double> total;
    for (const auto& b : blocks) {
      const Var<double> term = mean_square(b.logits);
      total = total.defined() ? add(total, term) : term;
    }
    return total;
  };
  auto params = model.parameters();
  const GradCheckResult r = grad_check<double>(loss_fn, params, a.h);
  std::cout << "coordinates,max_rel_error,worst_parameter,analytic,numeric\n"
            << r.coordinates << ',' << format_number(r.max_relative_error) << ',' << r.worst_parameter << '['
            << r.worst_index << "]," << format_number(r.analytic) << ',' << format_number(r.numeric) << '\n';
  return r.max_relative_error <= a.threshold ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block sliding window and feedback attention memory toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model on a synthetic task");
  t->add_option("--config", train.config, "key=value config file, run manifest, or preset name");
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--task", train.task, "passkey or copy")->check(CLI::IsMember({"passkey", "copy"}));
  train.model.add(t);
  t->add_option("--lr", train.lr, "learning rate");
  t->add_option("--steps", train.steps, "optimisation steps");
  t->add_option("--batch", train.batch, "batch lanes");
  t->add_option("--rsp", train.rsp, "random state passing probability");
  t->add_flag("--no-rpo", train.no_rpo, "disable random position offset");
  t->add_option("--diversity", train.diversity, "diversity loss weight");
  t->add_option("--grad-clip", train.grad_clip, "global gradient norm clip (0 disables)");
  t->add_option("--filler-min", train.filler_min, "minimum filler or gap length");
  t->add_option("--filler-max", train.filler_max, "maximum filler or gap length");
  t->add_option("--key-digits", train.key_digits, "pass key digits");
  t->add_option("--filler", train.filler, "repeat or random")->check(CLI::IsMember({"repeat", "random"}));
  t->add_option("--prefix-len", train.prefix_len, "copy task prefix length");
  t->add_option("--repeat-segment", train.repeat_segment, "repeat-segment augmentation length (0 off)");
  t->add_option("--filler-ramp", train.filler_ramp, "steps over which the filler maximum ramps up (0 off)");
  t->add_option("--seed", train.seed, "random seed (falls back to FAM_SEED)");
  t->add_option("--log-every", train.log_every, "print progress every N steps");
  t->add_flag("--no-wall-clock", train.no_wall_clock, "write 0 in the wall_ms column");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval-passkey", "PassKey accuracy over a filler grid");
  e->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--fillers", eval.fillers, "comma-separated filler lengths");
  e->add_option("--samples", eval.samples, "examples per filler length");
  e->add_option("--key-digits", eval.key_digits, "pass key digits");
  e->add_option("--filler", eval.filler, "repeat or random")->check(CLI::IsMember({"repeat", "random"}));
  e->add_option("--lanes", eval.lanes, "examples streamed together");
  e->add_option("--tag", eval.tag, "value for the model column");
  e->add_option("--out", eval.out, "CSV path (default stdout)");
  e->add_option("--seed", eval.seed, "random seed (falls back to FAM_SEED)");

  MaskArgs mask;
  auto* d = app.add_subcommand("dump-mask", "print an attention mask as a text grid");
  d->add_option("--T", mask.T, "sequence length (BSWA masks)");
  d->add_option("--b", mask.b, "block size")->required();
  d->add_option("--m", mask.m, "memory segments")->required();
  d->add_option("--f", mask.f, "FAM length");
  d->add_option("--w", mask.w, "TransformerXL window");

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe-rf", "receptive-field gradient probe");
  p->add_option("--arch", probe.arch, "bswa or fam")->check(CLI::IsMember({"bswa", "fam"}));
  p->add_option("--layers", probe.layers, "transformer layers");
  p->add_option("--m", probe.m, "memory segments");
  p->add_option("--block", probe.block, "block size");
  p->add_option("--fam", probe.fam, "FAM length for --arch fam");
  p->add_option("--dmodel", probe.dmodel, "model width");
  p->add_option("--heads", probe.heads, "attention heads");
  p->add_option("--kmax", probe.kmax, "largest block distance");
  p->add_option("--blocks", probe.blocks, "sequence length in blocks (default kmax+1)");
  p->add_option("--seed", probe.seed, "random seed (falls back to FAM_SEED)");
  p->add_option("--out", probe.out, "CSV path (default stdout)");

  GradArgs grad;
  auto* g = app.add_subcommand("grad-check", "finite-difference gradient check of a tiny model");
  g->add_option("--config", grad.config, "preset name or config file");
  grad.model.add(g);
  g->add_option("--blocks", grad.blocks, "blocks in the probe sequence");
  g->add_option("--step", grad.h, "finite-difference step h");
  g->add_option("--threshold", grad.threshold, "maximum relative error");
  g->add_option("--seed", grad.seed, "random seed (falls back to FAM_SEED)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (t->parsed()) return cmd_train(t, train);
    if (e->parsed()) return cmd_eval_passkey(e, eval);
    if (d->parsed()) return cmd_dump_mask(d, mask);
    if (p->parsed()) return cmd_probe_rf(p, probe);
    if (g->parsed()) return cmd_grad_check(g, grad);
  } catch (const UsageError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const NumericError& ex) {
    std::cerr << "numeric failure: " << ex.what() << '\n';
    return kNumeric;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
