#include "fam/config.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

#include "fam/training.hpp"

namespace fam {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw std::invalid_argument("config key " + key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw std::invalid_argument("config key " + key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw std::invalid_argument("config key " + key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("config key " + key + ": expected true or false, got '" + v + "'");
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": missing '=' in '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string format_number(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void write_model_config(const ModelConfig& cfg, KeyValues& kv) {
  kv["model.layers"] = std::to_string(cfg.num_layers);
  kv["model.d_model"] = std::to_string(cfg.d_model);
  kv["model.heads"] = std::to_string(cfg.num_heads);
  kv["model.ff_multiplier"] = std::to_string(cfg.ff_multiplier);
  kv["model.vocab"] = std::to_string(cfg.vocab_size);
  kv["model.block"] = std::to_string(cfg.layout.block_size);
  kv["model.memory"] = std::to_string(cfg.layout.memory_segments);
  kv["model.fam"] = std::to_string(cfg.layout.fam_len);
  kv["model.xl_window"] = cfg.layout.xl_window ? std::to_string(*cfg.layout.xl_window) : "-";
  kv["model.rope_base"] = format_number(cfg.rope_base);
  kv["model.stop_grad_memory"] = cfg.stop_grad_memory ? "true" : "false";
  kv["model.num_fam_blocks"] = std::to_string(cfg.num_fam_blocks);
  kv["model.ln_eps"] = format_number(cfg.ln_eps);
}

void read_model_config(const KeyValues& kv, ModelConfig& cfg) {
  for (const auto& [k, v] : kv) {
    if (k.rfind("model.", 0) != 0) continue;
    if (k == "model.layers") cfg.num_layers = to_size(k, v);
    else if (k == "model.d_model") cfg.d_model = to_size(k, v);
    else if (k == "model.heads") cfg.num_heads = to_size(k, v);
    else if (k == "model.ff_multiplier") cfg.ff_multiplier = to_size(k, v);
    else if (k == "model.vocab") cfg.vocab_size = to_size(k, v);
    else if (k == "model.block") cfg.layout.block_size = to_size(k, v);
    else if (k == "model.memory") cfg.layout.memory_segments = to_size(k, v);
    else if (k == "model.fam") cfg.layout.fam_len = to_size(k, v);
    else if (k == "model.xl_window") {
      if (v == "-") cfg.layout.xl_window.reset();
      else cfg.layout.xl_window = to_size(k, v);
    } else if (k == "model.rope_base") cfg.rope_base = to_double(k, v);
    else if (k == "model.stop_grad_memory") cfg.stop_grad_memory = to_bool(k, v);
    else if (k == "model.num_fam_blocks") cfg.num_fam_blocks = to_size(k, v);
    else if (k == "model.ln_eps") cfg.ln_eps = to_double(k, v);
    else throw std::invalid_argument("unknown config key " + k);
  }
}

void write_train_config(const TrainConfig& cfg, KeyValues& kv) {
  kv["train.lr"] = format_number(cfg.learning_rate);
  kv["train.steps"] = std::to_string(cfg.steps);
  kv["train.rsp"] = format_number(cfg.rsp_probability);
  kv["train.rpo"] = cfg.rpo_enabled ? "true" : "false";
  kv["train.diversity"] = format_number(cfg.diversity_weight);
  kv["train.seed"] = std::to_string(cfg.seed);
  kv["train.batch"] = std::to_string(cfg.batch_size);
  kv["train.grad_clip"] = format_number(cfg.grad_clip);
}

void read_train_config(const KeyValues& kv, TrainConfig& cfg) {
  for (const auto& [k, v] : kv) {
    if (k.rfind("train.", 0) != 0) continue;
    if (k == "train.lr") cfg.learning_rate = to_double(k, v);
    else if (k == "train.steps") cfg.steps = to_size(k, v);
    else if (k == "train.rsp") cfg.rsp_probability = to_double(k, v);
    else if (k == "train.rpo") cfg.rpo_enabled = to_bool(k, v);
    else if (k == "train.diversity") cfg.diversity_weight = to_double(k, v);
    else if (k == "train.seed") cfg.seed = to_u64(k, v);
    else if (k == "train.batch") cfg.batch_size = to_size(k, v);
    else if (k == "train.grad_clip") cfg.grad_clip = to_double(k, v);
    else throw std::invalid_argument("unknown config key " + k);
  }
}

}  // namespace fam
