#pragma once

// Single-file little-endian checkpoint:
//   "FAMC" | u32 version | u32 config length | config text
//   then per tensor, name-sorted: u32 name length | name | u32 rank | u64 extents... | raw scalars
// Saved FAM states are stored as tensors named rsp/layerNN.

#include <iosfwd>
#include <string>

#include "fam/config.hpp"
#include "fam/model.hpp"
#include "fam/training.hpp"

namespace fam {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  SavedFamStore<T> store;
  KeyValues config;  // full header text, including train.* keys if present
};

template <class T>
const char* precision_name();  // "standard" for float, "extended" for double

template <class T>
void save_checkpoint(std::ostream& out, const Model<T>& model, const SavedFamStore<T>& store,
                     const KeyValues& extra = {});
template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const SavedFamStore<T>& store,
                     const KeyValues& extra = {});

// Throws std::runtime_error on malformed input and ShapeError when a tensor
// does not fit the configuration in the header.
template <class T>
LoadedCheckpoint<T> load_checkpoint(std::istream& in);
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

KeyValues read_checkpoint_config(const std::string& path);

}  // namespace fam
