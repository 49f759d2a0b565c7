#pragma once

// Binary checkpoints.
//
//   "EMPHCKPT" u32 version
//   str model_config   (key=value lines)
//   str run_config     (opaque, stored verbatim)
//   u64 |words|  str*  u64 |tags|  str*
//   u64 |tensors| { str name, u32 rank, u64 dims[rank], f64 data[] }
//
// Integers and doubles are little-endian; str is u64 length + bytes.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "emphasis/model.hpp"

namespace emphasis {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'P', 'H', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream out;
  out << "variant=" << to_string(c.variant) << '\n'
      << "word_dim=" << c.word_dim << '\n'
      << "tag_dim=" << c.tag_dim << '\n'
      << "hidden=" << c.hidden << '\n'
      << "ssg_dim=" << c.ssg_dim << '\n'
      << "head_hidden=" << c.head_hidden << '\n'
      << "gru_layers=" << c.gru_layers << '\n'
      << "graph_layers=" << c.graph_layers << '\n'
      << "leaky_slope=" << format_double(c.leaky_slope) << '\n'
      << "dropout=" << format_double(c.dropout) << '\n';
  return out.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed model config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(std::string("model config lacks '") + key + "'");
    return it->second;
  };
  auto size = [&](const char* key) {
    const std::string& s = get(key);
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw CheckpointError(std::string("bad value for ") + key);
    return v;
  };
  auto real = [&](const char* key) {
    const std::string& s = get(key);
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw CheckpointError(std::string("bad value for ") + key);
    return v;
  };
  ModelConfig c;
  auto variant = variant_from_string(get("variant"));
  if (!variant) throw CheckpointError("unknown variant '" + get("variant") + "'");
  c.variant = *variant;
  c.word_dim = size("word_dim");
  c.tag_dim = size("tag_dim");
  c.hidden = size("hidden");
  c.ssg_dim = size("ssg_dim");
  c.head_hidden = size("head_hidden");
  c.gru_layers = size("gru_layers");
  c.graph_layers = size("graph_layers");
  c.leaky_slope = real("leaky_slope");
  c.dropout = real("dropout");
  return c;
}

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("truncated checkpoint");
  return v;
}

inline std::string get_str(std::istream& in, std::uint64_t limit = 1ull << 32) {
  auto n = get<std::uint64_t>(in);
  if (n > limit) throw CheckpointError("corrupt checkpoint: string length " + std::to_string(n));
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated checkpoint");
  return s;
}

// Parameter containers sized for `c`, tensors left empty.
inline ModelParams skeleton(const ModelConfig& c) {
  ModelParams p;
  p.gru.resize(c.gru_layers);
  p.gcn.resize(c.graph_layers);
  p.attn.resize(c.graph_layers);
  return p;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, Model& model, const std::string& run_config = {}) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(out, kCheckpointVersion);
  detail::put_str(out, model_config_text(model.config));
  detail::put_str(out, run_config);
  detail::put<std::uint64_t>(out, model.words.size());
  for (const auto& w : model.words.words()) detail::put_str(out, w);
  detail::put<std::uint64_t>(out, model.tags.size());
  for (const auto& t : model.tags.symbols()) detail::put_str(out, t);
  auto named = model.params.named();
  detail::put<std::uint64_t>(out, named.size());
  for (const auto& [name, t] : named) {
    detail::put_str(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

struct LoadedCheckpoint {
  Model model;
  std::string run_config;
};

inline LoadedCheckpoint load_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint ck;
  Model& m = ck.model;
  m.config = parse_model_config(detail::get_str(in));
  ck.run_config = detail::get_str(in);
  auto n_words = detail::get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_words; ++i) {
    auto w = detail::get_str(in);
    if (m.words.add(w) != i) throw CheckpointError("corrupt checkpoint: duplicate word '" + w + "'");
  }
  auto n_tags = detail::get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_tags; ++i) {
    auto t = detail::get_str(in);
    if (m.tags.add(t) != i) throw CheckpointError("corrupt checkpoint: duplicate tag '" + t + "'");
  }
  m.params = detail::skeleton(m.config);
  auto named = m.params.named();
  auto n_tensors = detail::get<std::uint64_t>(in);
  if (n_tensors != named.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(n_tensors) + " tensors, configuration expects " +
                          std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    auto stored = detail::get_str(in);
    if (stored != name) throw CheckpointError("expected tensor '" + name + "', found '" + stored + "'");
    auto rank = detail::get<std::uint32_t>(in);
    if (rank < 1 || rank > 3) throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(detail::get<std::uint64_t>(in));
      total *= shape.back();
    }
    if (total == 0 || total > (1ull << 34)) throw CheckpointError("tensor '" + name + "' has a corrupt shape");
    std::vector<double> data(total);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total * sizeof(double)))) {
      throw CheckpointError("truncated checkpoint in tensor '" + name + "'");
    }
    *t = Tensor(shape, std::move(data));
    t->set_requires_grad(true);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint");
  std::mt19937_64 unused;
  ModelParams expected = init_params(m.config, m.words, m.tags.size(), nullptr, unused);
  auto want = expected.named();
  for (std::size_t k = 0; k < named.size(); ++k) {
    if (named[k].second->shape() != want[k].second->shape()) {
      throw CheckpointError("tensor '" + named[k].first + "' has shape " + shape_str(named[k].second->shape()) +
                            ", configuration expects " + shape_str(want[k].second->shape()));
    }
  }
  return ck;
}

inline void save_checkpoint_path(const std::string& path, Model& model, const std::string& run_config = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  save_checkpoint(out, model, run_config);
}

inline LoadedCheckpoint load_checkpoint_path(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  try {
    return load_checkpoint(in);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  } catch (const DimensionError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace emphasis
