#pragma once

// `emphasis` command line: train, pretrain-ssg, eval, predict, inspect.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emphasis/checkpoint.hpp"
#include "emphasis/dataset.hpp"
#include "emphasis/eval.hpp"
#include "emphasis/model.hpp"
#include "emphasis/stats.hpp"
#include "emphasis/train.hpp"

namespace emphasis::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Settings shared by all subcommands; unused fields are ignored.
struct RunConfig {
  std::string command;
  std::string train_file, trees, test_file, test_trees, embeddings, pretrained_tags;
  std::string checkpoint, out;
  ModelConfig model;
  TrainConfig train;
  std::string variant = "full";
  std::string tie_mode = "strict";
  bool per_sentence = false;
};

// `key = value` lines, '#' comments. Keys are long flag names without dashes.
inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    detail::strip_cr(line);
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::is_blank(line)) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no).in_file(path);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

// Writes every effective setting as `key = value`; feeding the file back via
// --config reproduces the run.
inline std::string config_echo(const RunConfig& c, bool include_outputs = true) {
  std::ostringstream o;
  auto kv = [&](const char* k, const std::string& v) {
    if (!v.empty()) o << k << " = " << v << '\n';
  };
  o << "# emphasis " << c.command << '\n';
  kv("train-file", c.train_file);
  kv("trees", c.trees);
  kv("test-file", c.test_file);
  kv("test-trees", c.test_trees);
  kv("embeddings", c.embeddings);
  kv("pretrained-tags", c.pretrained_tags);
  if (include_outputs) {
    kv("checkpoint", c.checkpoint);
    kv("out", c.out);
  }
  kv("variant", c.variant);
  kv("dim", std::to_string(c.model.word_dim));
  kv("tag-dim", std::to_string(c.model.tag_dim));
  kv("hidden", std::to_string(c.model.hidden));
  kv("ssg-dim", std::to_string(c.model.ssg_dim));
  kv("head-hidden", std::to_string(c.model.head_hidden));
  kv("dropout", format_double(c.model.dropout));
  kv("seed", std::to_string(c.train.seed));
  kv("epochs", std::to_string(c.train.epochs));
  kv("batch-size", std::to_string(c.train.batch_size));
  kv("lr", format_double(c.train.lr));
  kv("dev-fraction", format_double(c.train.dev_fraction));
  kv("select-last", c.train.select_last ? "true" : "false");
  kv("freeze-embeddings", c.train.freeze_embeddings ? "true" : "false");
  kv("threads", std::to_string(c.train.threads));
  kv("tie-mode", c.tie_mode);
  return o.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

// Token column of an emphasis-style file: first tab field per line, blank
// lines between sentences; a leading `#id` line names the sentence.
inline std::vector<SentenceRecord> read_token_file(const std::string& path) {
  auto in = open_input(path);
  std::vector<SentenceRecord> out;
  SentenceRecord cur;
  bool open = false;
  auto close = [&] {
    if (open && !cur.tokens.empty()) {
      for (auto& a : cur.annotations) a.assign(cur.tokens.size(), EmphasisLabel::O);
      cur.emphasis_freq.assign(cur.tokens.size(), 0.0);
      out.push_back(std::move(cur));
    }
    cur = SentenceRecord{};
    open = false;
  };
  for (std::string line; std::getline(in, line);) {
    emphasis::detail::strip_cr(line);
    if (emphasis::detail::is_blank(line)) {
      close();
      continue;
    }
    if (!open && line.rfind("#id", 0) == 0) {
      open = true;
      cur.id = line.size() > 4 ? line.substr(4) : std::string();
      continue;
    }
    open = true;
    cur.tokens.push_back(line.substr(0, line.find('\t')));
  }
  close();
  return out;
}

struct Data {
  std::vector<SentenceRecord> records;
  std::vector<ParseTree> trees;
};

inline Data read_data(const std::string& file, const std::string& trees, std::ostream& err) {
  Data d;
  ParseDiagnostics diag;
  d.records = read_emphasis_path(file, &diag);
  for (const auto& w : diag.warnings) err << "warning: " << file << ": " << w << '\n';
  d.trees = read_trees_path(trees);
  return d;
}

inline void check_dim(const EmbeddingTable& table, const ModelConfig& cfg) {
  if (table.dim != cfg.word_dim) throw UsageError("--dim does not match the checkpoint's word dimension");
}

// Tag-embedding artifact: `symbol v1 ... vd` per line.
inline std::string tag_embedding_text(const TagVocab& tags, const Tensor& node_embed) {
  std::ostringstream o;
  for (std::size_t t = 0; t < tags.size(); ++t) {
    o << tags.symbol(t);
    for (double v : node_embed.row(t)) o << ' ' << format_double(v);
    o << '\n';
  }
  return o.str();
}

inline std::size_t apply_pretrained_tags(Model& model, const std::string& path) {
  EmbeddingTable art = read_embeddings_path(path, model.config.ssg_dim);
  std::size_t used = 0;
  for (std::size_t t = 0; t < model.tags.size(); ++t) {
    auto it = art.entries.find(model.tags.symbol(t));
    if (it == art.entries.end()) continue;
    std::copy(it->second.begin(), it->second.end(), model.params.node_embed.row(t).begin());
    ++used;
  }
  return used;
}

struct Prepared {
  Model model;
  EmbeddingTable table;
  std::vector<Example> train, dev;
};

inline Prepared prepare_training(const RunConfig& c, std::ostream& err) {
  Prepared p;
  Data data = read_data(c.train_file, c.trees, err);
  p.table = read_embeddings_path(c.embeddings, c.model.word_dim);
  p.model.config = c.model;
  p.model.tags = build_tag_vocab(data.trees);
  p.model.words = build_word_vocab(data.records, p.table);
  std::mt19937_64 rng(emphasis::detail::mix_seed(c.train.seed, 0));
  p.model.params = init_params(p.model.config, p.model.words, p.model.tags.size(), &p.table, rng);
  if (!c.pretrained_tags.empty()) {
    auto used = apply_pretrained_tags(p.model, c.pretrained_tags);
    err << "pretrained tag rows: " << used << " of " << p.model.tags.size() << '\n';
  }
  auto examples = prepare_examples(data.records, data.trees, p.table, p.model);
  auto [tr, dv] = split_dev(examples.size(), c.train.dev_fraction, emphasis::detail::mix_seed(c.train.seed, 2));
  p.train = select<Example>(examples, tr);
  p.dev = select<Example>(examples, dv);
  err << "train sentences: " << p.train.size() << ", dev sentences: " << p.dev.size()
      << ", vocabulary: " << p.model.words.size() << ", tags: " << p.model.tags.size() << '\n';
  return p;
}

inline Model load_model(const std::string& path, std::string* run_config = nullptr) {
  auto ck = load_checkpoint_path(path);
  if (run_config) *run_config = ck.run_config;
  return std::move(ck.model);
}

inline std::vector<Example> prepare_eval(const RunConfig& c, Model& model, const std::vector<SentenceRecord>& records,
                                         const std::vector<ParseTree>& trees, const EmbeddingTable& table) {
  check_dim(table, model.config);
  extend_vocabulary(model, records, table);
  return prepare_examples(records, trees, table, model);
}

}  // namespace detail

inline int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  auto p = detail::prepare_training(c, err);
  fs::create_directories(c.out);
  const fs::path ckpt = c.checkpoint.empty() ? fs::path(c.out) / "model.ckpt" : fs::path(c.checkpoint);
  detail::write_text(fs::path(c.out) / "config.txt", config_echo(c));
  std::ofstream metrics(fs::path(c.out) / "metrics.tsv", std::ios::binary | std::ios::trunc);
  metrics << "epoch\ttrain_loss\tdev_match1\tdev_match2\tdev_match3\tdev_match4\tdev_average\n";
  const std::string run_config = config_echo(c, false);
  try {
    auto result = train_loop(p.train, p.dev, p.model, c.train, [&](const EpochMetrics& m) {
      const auto line = format_metrics_line(m);
      metrics << line << '\n' << std::flush;
      err << line << '\n';
    });
    err << "selected epoch: " << result.selected_epoch << '\n';
  } catch (const TrainingAborted& e) {
    save_checkpoint_path(ckpt.string(), p.model, run_config);
    err << "error: training aborted: " << e.what() << "; last good parameters saved to " << ckpt.string() << '\n';
    return kExitData;
  }
  save_checkpoint_path(ckpt.string(), p.model, run_config);
  out << "checkpoint\t" << ckpt.string() << '\n';
  if (!c.test_file.empty()) {
    if (c.test_trees.empty()) throw UsageError("--test-file needs --test-trees");
    auto data = detail::read_data(c.test_file, c.test_trees, err);
    auto examples = detail::prepare_eval(c, p.model, data.records, data.trees, p.table);
    auto mode = *tie_mode_from_string(c.tie_mode);
    auto report = evaluate(examples, p.model, mode, c.train.threads);
    const auto line = format_report_line(c.variant, report);
    detail::write_text(fs::path(c.out) / "report.tsv", line + '\n');
    out << line << '\n';
  }
  return kExitOk;
}

inline int cmd_pretrain(const RunConfig& c, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  auto p = detail::prepare_training(c, err);
  fs::create_directories(c.out);
  detail::write_text(fs::path(c.out) / "config.txt", config_echo(c));
  std::ofstream metrics(fs::path(c.out) / "pretrain_metrics.tsv", std::ios::binary | std::ios::trunc);
  metrics << "epoch\ttrain_loss\tdev_match1\tdev_match2\tdev_match3\tdev_match4\tdev_average\n";
  Tensor tags = pretrain_ssg(p.train, p.dev, p.model, c.train, [&](const EpochMetrics& m) {
    metrics << format_metrics_line(m) << '\n' << std::flush;
    err << format_metrics_line(m) << '\n';
  });
  const fs::path artifact = fs::path(c.out) / "tag_embeddings.txt";
  detail::write_text(artifact, detail::tag_embedding_text(p.model.tags, tags));
  out << "tag_embeddings\t" << artifact.string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, std::ostream& err) {
  Model model = detail::load_model(c.checkpoint);
  auto table = read_embeddings_path(c.embeddings, model.config.word_dim);
  auto data = detail::read_data(c.test_file, c.trees, err);
  auto examples = detail::prepare_eval(c, model, data.records, data.trees, table);
  const auto mode = *tie_mode_from_string(c.tie_mode);
  auto report = evaluate(examples, model, mode, c.train.threads);
  out << format_report_line(to_string(model.config.variant), report) << '\n';
  if (mode == TieMode::strict) {
    // Sensitivity to gold ties: the optimistic score from the same predictions.
    std::vector<std::vector<double>> pred, gold;
    std::vector<std::string> ids;
    for (std::size_t s = 0; s < examples.size(); ++s) {
      pred.push_back(report.per_sentence[s].predicted);
      gold.push_back(examples[s].gold);
      ids.push_back(examples[s].id);
    }
    auto opt = build_report(pred, gold, ids, TieMode::optimistic);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", opt.average - report.average);
    err << "optimistic tie delta (average): " << buf << '\n';
  }
  if (!c.out.empty()) {
    std::filesystem::create_directories(c.out);
    detail::write_text(std::filesystem::path(c.out) / "report.tsv",
                       format_report_line(to_string(model.config.variant), report) + '\n');
    if (c.per_sentence) detail::write_text(std::filesystem::path(c.out) / "per_sentence.csv", per_sentence_csv(report));
  } else if (c.per_sentence) {
    out << per_sentence_csv(report);
  }
  return kExitOk;
}

inline int cmd_predict(const RunConfig& c, std::ostream& out, std::ostream&) {
  Model model = detail::load_model(c.checkpoint);
  auto table = read_embeddings_path(c.embeddings, model.config.word_dim);
  auto records = detail::read_token_file(c.test_file);
  auto trees = read_trees_path(c.trees);
  auto examples = detail::prepare_eval(c, model, records, trees, table);
  auto scores = predict_all(examples, model, c.train.threads);
  for (std::size_t s = 0; s < examples.size(); ++s) {
    if (s) out << '\n';
    for (std::size_t i = 0; i < examples[s].tokens.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", scores[s][i]);
      out << examples[s].tokens[i] << '\t' << buf << '\n';
    }
  }
  return kExitOk;
}

inline int cmd_inspect(const RunConfig& c, std::ostream& out, std::ostream& err) {
  ParseDiagnostics diag;
  auto records = read_emphasis_path(c.train_file, &diag);
  std::size_t tokens = 0, emphasized = 0;
  for (const auto& r : records) {
    tokens += r.size();
    for (double f : r.emphasis_freq) emphasized += f > 0.0 ? 1 : 0;
  }
  out << "records\t" << records.size() << '\n';
  out << "tokens\t" << tokens << '\n';
  out << "words_emphasized_by_any_annotator\t" << emphasized << '\n';
  out << "bio_warnings\t" << diag.warnings.size() << '\n';
  for (const auto& w : diag.warnings) err << "warning: " << w << '\n';
  if (!c.trees.empty()) {
    auto trees = read_trees_path(c.trees);
    out << "trees\t" << trees.size() << '\n';
    std::size_t misaligned = 0;
    for (std::size_t k = 0; k < std::min(trees.size(), records.size()); ++k) {
      if (!validate_alignment(trees[k], records[k].tokens).ok) ++misaligned;
    }
    out << "misaligned_trees\t" << misaligned << '\n';
    auto tags = build_tag_vocab(trees);
    out << "tag_vocabulary\t" << tags.size();
    for (const auto& s : tags.symbols()) out << ' ' << s;
    out << '\n';
  }
  if (!c.embeddings.empty()) {
    auto table = read_embeddings_path(c.embeddings, c.model.word_dim);
    std::size_t known = 0;
    for (const auto& r : records) {
      for (const auto& t : r.tokens) known += table.resolve(t) ? 1 : 0;
    }
    out << "embedding_coverage\t" << known << '/' << tokens << '\n';
    auto stat = similar_word_statistic(records, table);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", stat.fraction());
    out << "similar_word_coemphasis\t" << buf << "\t(" << stat.hits << '/' << stat.sentences << ", eligible "
        << stat.eligible << ")\n";
  }
  return kExitOk;
}

// Expands `--config FILE` into flags placed before the user's own, skipping
// keys the user passed explicitly, so explicit flags win.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args, const std::set<std::string>& bool_flags) {
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return rest;
  auto given = [&](const std::string& key) {
    for (const auto& a : rest) {
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> merged;
  std::size_t split = rest.empty() ? 0 : 1;  // subcommand stays first
  merged.insert(merged.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(split));
  for (const auto& [key, value] : read_config_file(path)) {
    if (given(key)) continue;
    if (bool_flags.count(key)) {
      if (value == "true" || value == "1") merged.push_back("--" + key);
      else if (value != "false" && value != "0") throw UsageError("config key '" + key + "' expects true or false");
      continue;
    }
    merged.push_back("--" + key);
    merged.push_back(value);
  }
  merged.insert(merged.end(), rest.begin() + static_cast<std::ptrdiff_t>(split), rest.end());
  return merged;
}

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  RunConfig c;
  CLI::App app{"Emphasis selection with word-similarity and sentence-structure graphs"};
  app.require_subcommand(1);
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint, metrics.tsv and config.txt");
  auto* pretrain = app.add_subcommand("pretrain-ssg", "train the structure-graph-only classifier, write tag embeddings");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a labelled file");
  auto* predict = app.add_subcommand("predict", "per-word emphasis probabilities");
  auto* inspect = app.add_subcommand("inspect", "dataset statistics");

  const std::set<std::string> bool_flags{"select-last", "freeze-embeddings", "per-sentence"};
  auto model_flags = [&](CLI::App* s) {
    s->add_option("--dim", c.model.word_dim, "word embedding dimension")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--tag-dim", c.model.tag_dim, "POS-tag embedding dimension")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--hidden", c.model.hidden, "GRU hidden size per direction")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--ssg-dim", c.model.ssg_dim, "structure-graph node dimension")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--head-hidden", c.model.head_hidden, "classifier hidden size")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--variant", c.variant, "full | no_wsg | no_ssg | no_both")
        ->capture_default_str()
        ->check(CLI::IsMember({"full", "no_wsg", "no_ssg", "no_both"}));
    s->add_option("--dropout", c.model.dropout, "dropout rate")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
  };
  auto train_flags = [&](CLI::App* s) {
    s->add_option("--train-file", c.train_file, "emphasis file")->required()->check(CLI::ExistingFile);
    s->add_option("--trees", c.trees, "one bracketed tree per training sentence")->required()->check(CLI::ExistingFile);
    s->add_option("--embeddings", c.embeddings, "word embedding table")->required()->check(CLI::ExistingFile);
    s->add_option("--out", c.out, "output directory")->required();
    s->add_option("--seed", c.train.seed)->capture_default_str();
    s->add_option("--epochs", c.train.epochs)->capture_default_str();
    s->add_option("--batch-size", c.train.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--lr", c.train.lr)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--dev-fraction", c.train.dev_fraction, "held-out share for checkpoint selection")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.9));
    s->add_flag("--select-last", c.train.select_last, "keep the last epoch instead of the best dev epoch");
    s->add_flag("--freeze-embeddings", c.train.freeze_embeddings);
    s->add_option("--threads", c.train.threads)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--pretrained-tags", c.pretrained_tags, "tag embeddings from pretrain-ssg")->check(CLI::ExistingFile);
    model_flags(s);
  };
  train_flags(train);
  train->add_option("--checkpoint", c.checkpoint, "checkpoint path (default OUT/model.ckpt)");
  train->add_option("--test-file", c.test_file, "evaluate on this file after training")->check(CLI::ExistingFile);
  train->add_option("--test-trees", c.test_trees)->check(CLI::ExistingFile);
  train->add_option("--tie-mode", c.tie_mode)->capture_default_str()->check(CLI::IsMember({"strict", "optimistic"}));
  train_flags(pretrain);

  for (auto* s : {eval, predict}) {
    s->add_option("--checkpoint", c.checkpoint)->required()->check(CLI::ExistingFile);
    s->add_option("--test-file", c.test_file)->required()->check(CLI::ExistingFile);
    s->add_option("--trees", c.trees)->required()->check(CLI::ExistingFile);
    s->add_option("--embeddings", c.embeddings, "table used for the similarity graph and new words")
        ->required()
        ->check(CLI::ExistingFile);
    s->add_option("--threads", c.train.threads)->capture_default_str()->check(CLI::PositiveNumber);
  }
  eval->add_option("--tie-mode", c.tie_mode)->capture_default_str()->check(CLI::IsMember({"strict", "optimistic"}));
  eval->add_option("--out", c.out, "directory for report.tsv");
  eval->add_flag("--per-sentence", c.per_sentence, "also emit per-sentence Match scores as CSV");

  inspect->add_option("--train-file", c.train_file)->required()->check(CLI::ExistingFile);
  inspect->add_option("--trees", c.trees)->check(CLI::ExistingFile);
  inspect->add_option("--embeddings", c.embeddings)->check(CLI::ExistingFile);
  inspect->add_option("--dim", c.model.word_dim)->capture_default_str();

  try {
    auto expanded = expand_config(args, bool_flags);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  c.command = app.get_subcommands().front()->get_name();
  c.model.variant = *variant_from_string(c.variant);

  try {
    if (c.command == "train") return cmd_train(c, out, err);
    if (c.command == "pretrain-ssg") return cmd_pretrain(c, out, err);
    if (c.command == "eval") return cmd_eval(c, out, err);
    if (c.command == "predict") return cmd_predict(c, out, err);
    return cmd_inspect(c, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace emphasis::cli
