#pragma once

// Match-m: overlap of the predicted and gold top-m word sets, normalised by
// min(n, m) and averaged over sentences.

#include <algorithm>
#include <array>
#include <atomic>
#include <cstddef>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emphasis/dataset.hpp"
#include "emphasis/model.hpp"

namespace emphasis {

inline constexpr std::size_t kMaxMatch = 4;

// strict: both top-m sets break ties by earliest position.
// optimistic: the gold set may be any tie-consistent choice, picking the one
// that overlaps the prediction most.
enum class TieMode { strict, optimistic };

inline std::optional<TieMode> tie_mode_from_string(std::string_view s) {
  if (s == "strict") return TieMode::strict;
  if (s == "optimistic") return TieMode::optimistic;
  return std::nullopt;
}

// Positions ordered by descending score, earlier position first on ties.
inline std::vector<std::size_t> rank_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

// Indices of the min(n, m) largest scores, in rank order.
inline std::vector<std::size_t> top_m(std::span<const double> scores, std::size_t m) {
  if (m == 0) throw ContractError("top_m: m must be at least 1");
  auto order = rank_order(scores);
  order.resize(std::min(order.size(), m));
  return order;
}

inline double match_m(std::span<const double> pred, std::span<const double> gold, std::size_t m,
                      TieMode mode = TieMode::strict) {
  if (pred.size() != gold.size()) {
    throw DimensionError("match_m: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(gold.size()) + " gold scores");
  }
  if (m == 0) throw ContractError("match_m: m must be at least 1");
  const std::size_t n = pred.size();
  const std::size_t k = std::min(n, m);
  if (k == 0) return 1.0;
  const auto p = top_m(pred, m);
  std::vector<bool> in_pred(n, false);
  for (auto i : p) in_pred[i] = true;
  std::size_t hits = 0;
  if (mode == TieMode::strict) {
    for (auto i : top_m(gold, m)) hits += in_pred[i] ? 1 : 0;
  } else {
    const double cut = gold[rank_order(gold)[k - 1]];
    std::size_t sure = 0, sure_hits = 0, tied_hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (gold[i] > cut) {
        ++sure;
        sure_hits += in_pred[i] ? 1 : 0;
      } else if (gold[i] == cut) {
        tied_hits += in_pred[i] ? 1 : 0;
      }
    }
    hits = sure_hits + std::min(k - sure, tied_hits);
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

struct SentenceMatch {
  std::string id;
  std::array<double, kMaxMatch> match{};
  std::vector<double> predicted;
};

struct MatchReport {
  std::array<double, kMaxMatch> match{};
  double average = 0.0;
  std::vector<SentenceMatch> per_sentence;
};

// Dataset mean of per-sentence Match-1..4.
inline MatchReport build_report(std::span<const std::vector<double>> predicted, std::span<const std::vector<double>> gold,
                                std::span<const std::string> ids, TieMode mode = TieMode::strict) {
  if (predicted.size() != gold.size()) throw DimensionError("build_report: prediction and gold counts differ");
  MatchReport report;
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    SentenceMatch sm;
    sm.id = s < ids.size() ? ids[s] : std::to_string(s + 1);
    sm.predicted = predicted[s];
    for (std::size_t m = 1; m <= kMaxMatch; ++m) {
      sm.match[m - 1] = match_m(predicted[s], gold[s], m, mode);
      report.match[m - 1] += sm.match[m - 1];
    }
    report.per_sentence.push_back(std::move(sm));
  }
  if (!predicted.empty()) {
    for (double& v : report.match) v /= static_cast<double>(predicted.size());
  }
  report.average = std::accumulate(report.match.begin(), report.match.end(), 0.0) / static_cast<double>(kMaxMatch);
  return report;
}

// Eval-mode emphasis scores for every example, split across up to `threads` workers.
inline std::vector<std::vector<double>> predict_all(std::span<const Example> examples, Model& model,
                                                    std::size_t threads = 1) {
  std::vector<std::vector<double>> scores(examples.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, examples.size()));
  if (workers == 1) {
    for (std::size_t s = 0; s < examples.size(); ++s) scores[s] = predict_scores(examples[s].input, model);
    return scores;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t s; (s = next.fetch_add(1)) < examples.size();) {
          scores[s] = predict_scores(examples[s].input, model);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return scores;
}

inline MatchReport evaluate(std::span<const Example> examples, Model& model, TieMode mode = TieMode::strict,
                            std::size_t threads = 1) {
  auto predicted = predict_all(examples, model, threads);
  std::vector<std::vector<double>> gold;
  std::vector<std::string> ids;
  for (const Example& ex : examples) {
    gold.push_back(ex.gold);
    ids.push_back(ex.id);
  }
  return build_report(predicted, gold, ids, mode);
}

// `variant<TAB>match1<TAB>...<TAB>match4<TAB>average`
inline std::string format_report_line(const std::string& variant, const MatchReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f", variant.c_str(), r.match[0], r.match[1],
                r.match[2], r.match[3], r.average);
  return buf;
}

inline std::string per_sentence_csv(const MatchReport& r) {
  std::ostringstream out;
  out << "id,match1,match2,match3,match4\n";
  for (const auto& s : r.per_sentence) {
    out << s.id;
    for (double v : s.match) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

// Rank labels with ties written as first/last position, e.g. "1/2" or "1/.../5".
inline std::vector<std::string> rank_labels(std::span<const double> scores) {
  const auto order = rank_order(scores);
  std::vector<std::string> labels(scores.size());
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    while (b + 1 < order.size() && scores[order[b + 1]] == scores[order[a]]) ++b;
    std::string label = std::to_string(a + 1);
    if (b == a + 1) label += "/" + std::to_string(b + 1);
    if (b > a + 1) label += "/.../" + std::to_string(b + 1);
    for (std::size_t k = a; k <= b; ++k) labels[order[k]] = label;
    a = b + 1;
  }
  return labels;
}

// Per-word table of gold frequency and predicted probability with ranks.
inline std::string case_table(std::span<const std::string> tokens, std::span<const double> gold,
                              std::span<const double> predicted) {
  if (tokens.size() != gold.size() || tokens.size() != predicted.size()) {
    throw DimensionError("case_table: tokens, gold and predictions must have equal length");
  }
  auto cell = [](double v, const std::string& rank) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f(%s)", v, rank.c_str());
    return std::string(buf);
  };
  const auto gold_rank = rank_labels(gold);
  const auto pred_rank = rank_labels(predicted);
  std::ostringstream out;
  out << "word";
  for (const auto& t : tokens) out << '\t' << t;
  out << "\nannotator";
  for (std::size_t i = 0; i < tokens.size(); ++i) out << '\t' << cell(gold[i], gold_rank[i]);
  out << "\nmodel";
  for (std::size_t i = 0; i < tokens.size(); ++i) out << '\t' << cell(predicted[i], pred_rank[i]);
  out << '\n';
  return out.str();
}

inline std::string case_table(const Example& ex, Model& model) {
  return case_table(ex.tokens, ex.gold, predict_scores(ex.input, model));
}

}  // namespace emphasis
