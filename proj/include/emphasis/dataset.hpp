#pragma once

// Aligned (record, tree) pairs turned into model inputs, plus file helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emphasis/corpus.hpp"
#include "emphasis/model.hpp"
#include "emphasis/parse_tree.hpp"

namespace emphasis {

struct Example {
  std::string id;
  std::vector<std::string> tokens;
  std::array<Annotation, kAnnotators> annotations;
  std::vector<double> gold;  // emphasis frequency
  SentenceInput input;
};

// Record k pairs with tree k.
inline std::vector<Example> prepare_examples(std::span<const SentenceRecord> records, std::span<const ParseTree> trees,
                                             const EmbeddingTable& table, const Model& model) {
  if (records.size() != trees.size()) {
    throw ContractError("prepare_examples: " + std::to_string(records.size()) + " records but " +
                        std::to_string(trees.size()) + " trees");
  }
  std::vector<Example> out;
  out.reserve(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) {
    const SentenceRecord& r = records[k];
    Example ex;
    ex.id = r.id.empty() ? std::to_string(k + 1) : r.id;
    ex.tokens = r.tokens;
    ex.annotations = r.annotations;
    ex.gold = r.emphasis_freq;
    try {
      ex.input = prepare_sentence(r, trees[k], table, model);
    } catch (const ContractError& e) {
      throw ContractError("record " + std::to_string(k + 1) + ": " + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Sentence-level split: returns (train indices, dev indices). A positive
// fraction keeps at least one sentence on each side when possible.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_dev(std::size_t count, double fraction,
                                                                               std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction <= 0.0 || count < 2) return {idx, {}};
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto dev_n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  dev_n = std::clamp<std::size_t>(dev_n, 1, count - 1);
  std::vector<std::size_t> dev(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(dev_n));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(dev_n), idx.end());
  std::sort(dev.begin(), dev.end());
  std::sort(train.begin(), train.end());
  return {train, dev};
}

template <typename T>
std::vector<T> select(std::span<const T> items, std::span<const std::size_t> indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items[i]);
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return in;
}

namespace detail {

template <typename Fn>
auto with_file_context(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ParseError& e) {
    throw e.in_file(path);
  }
}

}  // namespace detail

inline std::vector<SentenceRecord> read_emphasis_path(const std::string& path, ParseDiagnostics* diag = nullptr) {
  auto in = open_input(path);
  return detail::with_file_context(path, [&] { return parse_emphasis_file(in, diag); });
}

inline std::vector<ParseTree> read_trees_path(const std::string& path) {
  auto in = open_input(path);
  return detail::with_file_context(path, [&] { return parse_tree_file(in); });
}

inline EmbeddingTable read_embeddings_path(const std::string& path, std::size_t dim) {
  auto in = open_input(path);
  return detail::with_file_context(path, [&] { return load_embeddings(in, dim); });
}

}  // namespace emphasis
