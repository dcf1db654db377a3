#pragma once

// Canonical key=value text for configurations. One `key=value` per line, keys
// sorted, numbers in shortest round-trip form. Blank lines and lines starting
// with '#' are ignored when parsing.

#include <map>
#include <string>

#include "fam/model.hpp"

namespace fam {

using KeyValues = std::map<std::string, std::string>;

struct TrainConfig;

KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& kv);

std::string format_number(double v);

void write_model_config(const ModelConfig& cfg, KeyValues& kv);
// Applies every `model.*` key present; unknown `model.*` keys are an error.
void read_model_config(const KeyValues& kv, ModelConfig& cfg);

void write_train_config(const TrainConfig& cfg, KeyValues& kv);
void read_train_config(const KeyValues& kv, TrainConfig& cfg);

}  // namespace fam
