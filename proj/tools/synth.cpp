// Writes a synthetic corpus: train.txt/trees.txt, test.txt/test_trees.txt, embeddings.txt.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "emphasis/synthetic.hpp"

namespace {

void write_corpus(const std::filesystem::path& dir, const std::string& stem, const emphasis::synthetic::Corpus& c,
                  std::size_t from, std::size_t to) {
  std::vector<emphasis::SentenceRecord> part(c.records.begin() + from, c.records.begin() + to);
  std::ofstream(dir / (stem + ".txt")) << emphasis::serialize_emphasis_file(part);
  std::ofstream trees(dir / (stem == "train" ? "trees.txt" : stem + "_trees.txt"));
  for (std::size_t k = from; k < to; ++k) trees << c.tree_text[k] << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  emphasis::synthetic::Options o;
  std::string out;
  std::size_t test = 8;
  CLI::App app{"synthetic emphasis corpus"};
  app.add_option("--out", out)->required();
  app.add_option("--sentences", o.sentences, "training sentences")->capture_default_str();
  app.add_option("--test", test, "test sentences")->capture_default_str();
  app.add_option("--vocabulary", o.vocabulary)->capture_default_str();
  app.add_option("--dim", o.dim)->capture_default_str();
  app.add_option("--oov-rate", o.oov_rate)->capture_default_str();
  app.add_option("--seed", o.seed)->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  const std::size_t train = o.sentences;
  o.sentences += test;
  auto corpus = emphasis::synthetic::generate(o);
  std::filesystem::create_directories(out);
  write_corpus(out, "train", corpus, 0, train);
  write_corpus(out, "test", corpus, train, corpus.records.size());
  std::ofstream(std::filesystem::path(out) / "embeddings.txt") << emphasis::synthetic::embedding_text(corpus.table);
  std::cout << "wrote " << train << " training and " << test << " test sentences to " << out << '\n';
  return 0;
}
