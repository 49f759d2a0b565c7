#pragma once

// Seeded synthetic corpora: emphasis records, matching bracketed trees and an
// embedding table. Used by the tests, the acceptance run and data/sample.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "emphasis/corpus.hpp"
#include "emphasis/parse_tree.hpp"

namespace emphasis::synthetic {

struct Options {
  std::size_t sentences = 32;
  std::size_t vocabulary = 120;
  std::size_t dim = 16;
  std::size_t min_len = 3;
  std::size_t max_len = 8;  // at most 9 so per-sentence counts can be distinct
  double oov_rate = 0.0;    // share of vocabulary left out of the table
  std::uint64_t seed = 7;
};

struct Corpus {
  std::vector<SentenceRecord> records;
  std::vector<ParseTree> trees;
  std::vector<std::string> tree_text;
  EmbeddingTable table;
};

inline const std::vector<std::string>& pos_tags() {
  static const std::vector<std::string> tags{"NN", "VB", "JJ", "RB", "DT", "PRP", "IN", "NNS", "VBG"};
  return tags;
}

inline std::string make_word(std::size_t k) {
  static const char* syl[] = {"ka", "lo", "mi", "ser", "tu", "ven", "dra", "po", "qui", "zen", "ar", "bel"};
  std::string w;
  std::size_t x = k + 12;
  while (x) {
    w += syl[x % 12];
    x /= 12;
  }
  return w;
}

// Nine annotators: annotator a marks word i iff a < count[i]; spans get B/I.
inline std::array<Annotation, kAnnotators> annotations_from_counts(const std::vector<int>& counts) {
  std::array<Annotation, kAnnotators> ann;
  for (std::size_t a = 0; a < kAnnotators; ++a) {
    bool prev = false;
    for (int c : counts) {
      const bool on = static_cast<int>(a) < c;
      ann[a].push_back(on ? (prev ? EmphasisLabel::I : EmphasisLabel::B) : EmphasisLabel::O);
      prev = on;
    }
  }
  return ann;
}

namespace detail {

inline std::string build_tree(const std::vector<std::string>& words, const std::vector<std::string>& tags,
                              std::size_t lo, std::size_t hi, std::mt19937_64& rng, bool root) {
  static const char* phrases[] = {"NP", "VP", "PP", "ADJP", "S"};
  if (hi - lo == 1 && !root) return "(" + tags[lo] + " " + words[lo] + ")";
  std::string label = root ? "S" : phrases[rng() % 5];
  std::vector<std::size_t> cuts{lo};
  if (hi - lo > 1) {
    std::size_t parts = 2 + rng() % std::min<std::size_t>(2, hi - lo - 1);
    std::vector<std::size_t> inner(hi - lo - 1);
    std::iota(inner.begin(), inner.end(), lo + 1);
    std::shuffle(inner.begin(), inner.end(), rng);
    inner.resize(std::min(parts - 1, inner.size()));
    std::sort(inner.begin(), inner.end());
    cuts.insert(cuts.end(), inner.begin(), inner.end());
  }
  cuts.push_back(hi);
  std::string out = "(" + label;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) out += " " + build_tree(words, tags, cuts[k], cuts[k + 1], rng, false);
  return out + ")";
}

}  // namespace detail

// Word salience is a hidden per-word score; sentence counts rank words by it,
// so the labels are consistent across sentences and learnable.
inline Corpus generate(const Options& o) {
  if (o.max_len > 9 || o.min_len < 1 || o.min_len > o.max_len) throw ContractError("synthetic: bad length range");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::string> vocab(o.vocabulary);
  std::vector<std::string> word_tag(o.vocabulary);
  std::vector<double> salience(o.vocabulary);
  Corpus c;
  c.table.dim = o.dim;
  std::vector<double> mean(o.dim, 0.0);
  for (std::size_t k = 0; k < o.vocabulary; ++k) {
    vocab[k] = make_word(k);
    word_tag[k] = pos_tags()[rng() % pos_tags().size()];
    salience[k] = unit(rng);
    std::vector<double> v(o.dim);
    for (double& x : v) x = normal(rng);
    v[0] += 2.0 * salience[k];  // emphasised words lie near each other
    if (unit(rng) < o.oov_rate) continue;
    for (std::size_t d = 0; d < o.dim; ++d) mean[d] += v[d];
    c.table.entries.emplace(vocab[k], std::move(v));
  }
  if (c.table.entries.empty()) throw ContractError("synthetic: every word is out of vocabulary");
  for (double& x : mean) x /= static_cast<double>(c.table.entries.size());
  c.table.oov_vector = mean;

  for (std::size_t s = 0; s < o.sentences; ++s) {
    const std::size_t n = o.min_len + rng() % (o.max_len - o.min_len + 1);
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = rng() % o.vocabulary;
    // Distinct counts: 9, 8, ... handed out by salience with a random floor.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return salience[ids[a]] > salience[ids[b]]; });
    std::vector<int> counts(n, 0);
    int top = 9 - static_cast<int>(rng() % 2);
    for (std::size_t r = 0; r < n; ++r) counts[order[r]] = std::max(0, top - static_cast<int>(r));
    if (n > static_cast<std::size_t>(top) + 1) throw ContractError("synthetic: sentence too long for distinct counts");

    SentenceRecord rec;
    rec.id = "syn" + std::to_string(s + 1);
    std::vector<std::string> tags;
    for (auto id : ids) {
      rec.tokens.push_back(vocab[id]);
      tags.push_back(word_tag[id]);
    }
    rec.annotations = annotations_from_counts(counts);
    rec.emphasis_freq = aggregate_emphasis(rec.annotations);
    c.tree_text.push_back(detail::build_tree(rec.tokens, tags, 0, n, rng, true));
    c.trees.push_back(parse_sexpr(c.tree_text.back()));
    c.records.push_back(std::move(rec));
  }
  return c;
}

inline std::string embedding_text(const EmbeddingTable& table) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : table.entries) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::string out;
  char buf[32];
  for (const auto& k : keys) {
    out += k;
    for (double x : table.entries.at(k)) {
      std::snprintf(buf, sizeof buf, " %.6f", x);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace emphasis::synthetic
