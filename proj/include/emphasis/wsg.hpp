#pragma once

// Complete word-similarity graph of a sentence: edge weights are clamped
// cosine similarities of the word vectors, normalised as D^-1/2 A D^-1/2.

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <string>
#include <vector>

#include "emphasis/tensor.hpp"

namespace emphasis {

struct SimilarityGraph {
  std::size_t n = 0;
  Tensor weights;            // A, n x n, unit diagonal
  std::vector<double> degree;  // D_ii = sum_j A_ij
  Tensor normalized;         // A_hat
};

// A_hat[i][j] = A[i][j] / sqrt(D_i * D_j).
inline Tensor normalize_adjacency(const Tensor& adjacency) {
  const std::size_t n = adjacency.rows();
  if (adjacency.cols() != n) throw DimensionError("normalize_adjacency: matrix must be square, got " + shape_str(adjacency.shape()));
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += adjacency(i, j);
    if (!(d > 0.0)) throw ContractError("normalize_adjacency: row " + std::to_string(i) + " has non-positive sum");
    inv_sqrt[i] = 1.0 / std::sqrt(d);
  }
  Tensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = adjacency(i, j) * inv_sqrt[i] * inv_sqrt[j];
  }
  return out;
}

inline SimilarityGraph build_wsg(const Tensor& word_vectors) {
  const std::size_t n = word_vectors.rows();
  const std::size_t d = word_vectors.cols();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : word_vectors.row(i)) s += v * v;
    if (!(s > 0.0)) throw ContractError("build_wsg: word vector in row " + std::to_string(i) + " has zero norm");
    norms[i] = std::sqrt(s);
  }
  SimilarityGraph g;
  g.n = n;
  g.weights = Tensor(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    g.weights(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      auto a = word_vectors.row(i);
      auto b = word_vectors.row(j);
      for (std::size_t k = 0; k < d; ++k) dot += a[k] * b[k];
      const double cos = std::min(1.0, std::max(0.0, dot / (norms[i] * norms[j])));
      g.weights(i, j) = cos;
      g.weights(j, i) = cos;
    }
  }
  g.degree.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) g.degree[i] += g.weights(i, j);
  }
  g.normalized = normalize_adjacency(g.weights);
  return g;
}

}  // namespace emphasis
