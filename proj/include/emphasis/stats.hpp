#pragma once

// Dataset statistics reported by `inspect`.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "emphasis/corpus.hpp"

namespace emphasis {

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

struct SimilarWordStat {
  std::size_t sentences = 0;  // all records
  std::size_t eligible = 0;   // at least two words and one emphasized word
  std::size_t hits = 0;
  double fraction() const { return sentences ? static_cast<double>(hits) / static_cast<double>(sentences) : 0.0; }
};

// Per sentence: A is the most frequently emphasized word, B its nearest
// neighbour by embedding cosine among the other words (earliest position on
// ties). A hit is a sentence where freq(B) exceeds the sentence's median
// frequency. The fraction is over all sentences.
inline SimilarWordStat similar_word_statistic(std::span<const SentenceRecord> records, const EmbeddingTable& table) {
  SimilarWordStat stat;
  stat.sentences = records.size();
  for (const SentenceRecord& r : records) {
    const auto& f = r.emphasis_freq;
    if (f.size() < 2) continue;
    const std::size_t a = static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin());
    if (f[a] <= 0.0) continue;
    ++stat.eligible;
    std::size_t b = a;
    double best = -2.0;
    const auto va = table.lookup(r.tokens[a]);
    for (std::size_t j = 0; j < f.size(); ++j) {
      if (j == a) continue;
      const double c = cosine(va, table.lookup(r.tokens[j]));
      if (c > best) {
        best = c;
        b = j;
      }
    }
    if (f[b] > median(f)) ++stat.hits;
  }
  return stat;
}

}  // namespace emphasis
