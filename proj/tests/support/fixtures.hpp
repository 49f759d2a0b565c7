#pragma once

// Small fixed inputs shared by the model, train and acceptance tests.

#include <random>
#include <string>
#include <vector>

#include "emphasis/dataset.hpp"
#include "emphasis/model.hpp"
#include "emphasis/synthetic.hpp"

namespace fixture {

using namespace emphasis;

inline const char* kLoveTree = "(S (NP (PRP I)) (VP (VBP love) (S (VP (VBG playing) (NP (NN basketball))))))";

inline EmbeddingTable random_table(const std::vector<std::string>& words, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EmbeddingTable t;
  t.dim = dim;
  t.oov_vector.assign(dim, 0.0);
  for (const auto& w : words) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    for (std::size_t d = 0; d < dim; ++d) t.oov_vector[d] += v[d] / static_cast<double>(words.size());
    t.entries.emplace(w, std::move(v));
  }
  return t;
}

inline ModelConfig tiny_config(Variant v = Variant::full) {
  ModelConfig c;
  c.word_dim = 3;
  c.tag_dim = 2;
  c.hidden = 3;
  c.ssg_dim = 3;
  c.head_hidden = 4;
  c.variant = v;
  return c;
}

inline ModelConfig glove_config(Variant v = Variant::full) {
  ModelConfig c;
  c.variant = v;
  return c;
}

// One annotated sentence with its tree, a matching table and a fresh model.
struct Sentence {
  SentenceRecord record;
  ParseTree tree;
  EmbeddingTable table;
  Model model;
  SentenceInput input;
};

inline Sentence love_sentence(const ModelConfig& cfg, std::uint64_t seed = 1) {
  Sentence s;
  s.record.id = "love";
  s.record.tokens = {"I", "love", "playing", "basketball"};
  s.record.annotations = synthetic::annotations_from_counts({2, 7, 5, 1});
  s.record.emphasis_freq = aggregate_emphasis(s.record.annotations);
  s.tree = parse_sexpr(kLoveTree);
  s.table = random_table({"i", "love", "playing", "basketball"}, cfg.word_dim, seed);
  std::vector<SentenceRecord> recs{s.record};
  std::vector<ParseTree> trees{s.tree};
  s.model.config = cfg;
  s.model.tags = build_tag_vocab(trees);
  s.model.words = build_word_vocab(recs, s.table);
  std::mt19937_64 rng(seed + 100);
  s.model.params = init_params(cfg, s.model.words, s.model.tags.size(), &s.table, rng);
  s.input = prepare_sentence(s.record, s.tree, s.table, s.model);
  return s;
}

// Synthetic corpus plus a model built over it.
struct Setup {
  synthetic::Corpus corpus;
  Model model;
  std::vector<Example> examples;
};

inline Setup synthetic_setup(const synthetic::Options& o, const ModelConfig& cfg, std::uint64_t init_seed = 3) {
  Setup s;
  s.corpus = synthetic::generate(o);
  s.model.config = cfg;
  s.model.tags = build_tag_vocab(s.corpus.trees);
  s.model.words = build_word_vocab(s.corpus.records, s.corpus.table);
  std::mt19937_64 rng(init_seed);
  s.model.params = init_params(cfg, s.model.words, s.model.tags.size(), &s.corpus.table, rng);
  s.examples = prepare_examples(s.corpus.records, s.corpus.trees, s.corpus.table, s.model);
  return s;
}

// A (pred, gold) pair of length 1..max_n. Roughly half the draws come from
// a few coarse levels so ties at the top-m cut are common.
inline std::pair<std::vector<double>, std::vector<double>> random_match_pair(std::mt19937_64& rng,
                                                                             std::size_t max_n = 8) {
  const std::size_t n = 1 + rng() % max_n;
  auto draw = [&] {
    std::vector<double> v(n);
    const bool coarse = rng() % 2 == 0;
    for (double& x : v) x = coarse ? static_cast<double>(rng() % 4) / 9.0 : std::uniform_real_distribution<double>(0, 1)(rng);
    return v;
  };
  auto pred = draw();
  auto gold = draw();
  return {pred, gold};
}

}  // namespace fixture
