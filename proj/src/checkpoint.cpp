#include "fam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace fam {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <>
const char* precision_name<float>() {
  return "standard";
}
template <>
const char* precision_name<double>() {
  return "extended";
}

namespace {

constexpr char kMagic[4] = {'F', 'A', 'M', 'C'};

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return v;
}

std::string get_string(std::istream& in, std::size_t n) {
  if (n > (1u << 24)) throw std::runtime_error("checkpoint string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint truncated");
  return s;
}

template <class T>
void put_tensor(std::ostream& out, const std::string& name, const Tensor<T>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

std::string rsp_name(std::size_t layer) {
  std::string s = std::to_string(layer);
  if (s.size() < 2) s.insert(0, 2 - s.size(), '0');
  return "rsp/layer" + s;
}

}  // namespace

template <class T>
void save_checkpoint(std::ostream& out, const Model<T>& model, const SavedFamStore<T>& store, const KeyValues& extra) {
  KeyValues kv = extra;
  write_model_config(model.config(), kv);
  kv["precision"] = precision_name<T>();
  const std::string text = format_key_values(kv);

  std::map<std::string, const Tensor<T>*> tensors;
  for (const Parameter<T>* p : model.parameters()) tensors[p->name()] = &p->value();
  if (store.valid) {
    for (std::size_t l = 0; l < store.fam.size(); ++l) tensors[rsp_name(l)] = &store.fam[l];
  }

  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) put_tensor(out, name, *t);
  if (!out) throw std::runtime_error("checkpoint write failed");
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const SavedFamStore<T>& store,
                     const KeyValues& extra) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save_checkpoint(out, model, store, extra);
}

namespace {

KeyValues read_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a FAMC checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  return parse_key_values(get_string(in, get<std::uint32_t>(in)));
}

}  // namespace

template <class T>
LoadedCheckpoint<T> load_checkpoint(std::istream& in) {
  KeyValues kv = read_header(in);
  const auto prec = kv.find("precision");
  if (prec == kv.end() || prec->second != precision_name<T>()) {
    throw std::runtime_error(std::string("checkpoint precision is '") +
                             (prec == kv.end() ? "" : prec->second) + "', expected '" + precision_name<T>() + "'");
  }
  ModelConfig cfg;
  read_model_config(kv, cfg);
  LoadedCheckpoint<T> out{Model<T>(cfg, 0), {}, kv};

  std::map<std::string, Tensor<T>> rsp;
  std::size_t params_seen = 0;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::string name = get_string(in, get<std::uint32_t>(in));
    const auto rank = get<std::uint32_t>(in);
    if (rank > 8) throw std::runtime_error("tensor " + name + " has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in)));
    Tensor<T> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!in) throw std::runtime_error("checkpoint truncated in tensor " + name);
    if (name.rfind("rsp/", 0) == 0) {
      rsp.emplace(name, std::move(t));
      continue;
    }
    Parameter<T>* p = out.model.find(name);
    if (!p) throw ShapeError("checkpoint tensor " + name + " is not a parameter of the configured model");
    if (p->value().shape() != t.shape()) {
      throw ShapeError("checkpoint tensor " + name + " has shape " + shape_string(t.shape()) + ", model expects " +
                       shape_string(p->value().shape()));
    }
    p->value() = std::move(t);
    ++params_seen;
  }
  if (params_seen != out.model.parameters().size()) {
    throw ShapeError("checkpoint holds " + std::to_string(params_seen) + " of " +
                     std::to_string(out.model.parameters().size()) + " parameters");
  }
  if (!rsp.empty()) {
    if (rsp.size() != cfg.num_layers) throw ShapeError("checkpoint RSP state does not cover every layer");
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      auto it = rsp.find(rsp_name(l));
      if (it == rsp.end()) throw ShapeError("checkpoint is missing " + rsp_name(l));
      if (it->second.shape() != Shape{cfg.layout.fam_len, cfg.d_model}) {
        throw ShapeError(rsp_name(l) + " has shape " + shape_string(it->second.shape()));
      }
      out.store.fam.push_back(std::move(it->second));
    }
    out.store.valid = true;
  }
  return out;
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return load_checkpoint<T>(in);
}

KeyValues read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_header(in);
}

#define FAM_INSTANTIATE_CHECKPOINT(T)                                                                     \
  template void save_checkpoint(std::ostream&, const Model<T>&, const SavedFamStore<T>&, const KeyValues&); \
  template void save_checkpoint(const std::string&, const Model<T>&, const SavedFamStore<T>&,             \
                                const KeyValues&);                                                        \
  template LoadedCheckpoint<T> load_checkpoint(std::istream&);                                            \
  template LoadedCheckpoint<T> load_checkpoint(const std::string&);

FAM_INSTANTIATE_CHECKPOINT(float)
FAM_INSTANTIATE_CHECKPOINT(double)

}  // namespace fam
