#pragma once

// Every differentiable tape op on a small input, with a central-difference
// error measure. Shared by the autodiff unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "emphasis/autodiff.hpp"
#include "support/oracles.hpp"

namespace gradcase {

using emphasis::Shape;
using emphasis::Tensor;
using emphasis::ad::Tape;
using emphasis::ad::Var;
namespace ad = emphasis::ad;

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor(Shape{r, c}, oracle::random_vector(r * c, rng, lo, hi));
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Reduces an op output to a scalar with fixed random weights so every output
// entry contributes a distinct coefficient.
inline Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor(y.value().shape(), oracle::random_vector(y.value().size(), rng));
  return ad::sum(ad::mul(y, tape.constant(w)));
}

// Tape gradient vs an independent central-difference oracle.
inline double op_error(const std::function<Var(Tape&, Var)>& op, const Tensor& point, std::uint64_t seed) {
  Tape tape;
  Var x = tape.variable(point);
  Var loss = weighted_sum(tape, op(tape, x), seed);
  tape.backward(loss);
  auto g = tape.grad(x);
  std::vector<double> analytic(g.begin(), g.end());
  auto f = [&](const std::vector<double>& v) {
    Tape t;
    Var xv = t.variable(Tensor(point.shape(), v));
    return weighted_sum(t, op(t, xv), seed).value()[0];
  };
  return oracle::max_rel_error(analytic, oracle::central_difference(f, values(point)));
}

struct OpCase {
  const char* name;
  std::size_t rows, cols;
  std::function<Var(Tape&, Var)> op;
  double lo = -1.0, hi = 1.0;
};

inline std::vector<OpCase> op_cases() {
  std::mt19937_64 rng(99);
  auto other = std::make_shared<Tensor>(random_tensor(3, 4, rng));
  auto right = std::make_shared<Tensor>(random_tensor(4, 2, rng));
  auto bias = std::make_shared<Tensor>(random_tensor(1, 4, rng));
  return {
      {"matmul_left", 3, 4, [=](Tape& t, Var x) { return ad::matmul(x, t.constant(*right)); }},
      {"matmul_right", 4, 2, [=](Tape& t, Var x) { return ad::matmul(t.constant(*other), x); }},
      {"matmul_self", 3, 3, [](Tape&, Var x) { return ad::matmul(x, x); }},
      {"transpose", 3, 4, [](Tape&, Var x) { return ad::transpose(x); }},
      {"add", 3, 4, [=](Tape& t, Var x) { return ad::add(x, t.constant(*other)); }},
      {"add_bias_row", 1, 4, [=](Tape& t, Var x) { return ad::add(t.constant(*other), x); }},
      {"sub", 3, 4, [=](Tape& t, Var x) { return ad::sub(t.constant(*other), x); }},
      {"mul", 3, 4, [=](Tape& t, Var x) { return ad::mul(x, t.constant(*other)); }},
      {"mul_self", 3, 4, [](Tape&, Var x) { return ad::mul(x, x); }},
      {"scale", 3, 4, [](Tape&, Var x) { return ad::scale(x, -2.5); }},
      {"concat_cols", 3, 4, [=](Tape& t, Var x) { return ad::concat_cols({x, t.constant(*other), x}); }},
      {"concat_rows", 3, 4, [=](Tape& t, Var x) { return ad::concat_rows({t.constant(*other), x}); }},
      {"gather_rows", 3, 4, [](Tape&, Var x) { return ad::gather_rows(x, {2, 0, 2, 1}); }},
      {"slice_cols", 3, 4, [](Tape&, Var x) { return ad::slice_cols(x, 1, 3); }},
      {"softmax_rows", 3, 4, [](Tape&, Var x) { return ad::softmax_rows(ad::scale(x, 3.0)); }},
      {"masked_softmax_rows", 3, 4,
       [](Tape&, Var x) { return ad::masked_softmax_rows(ad::scale(x, 3.0), {{0, 2}, {1}, {0, 1, 3}}); }},
      {"sigmoid", 3, 4, [](Tape&, Var x) { return ad::sigmoid(ad::scale(x, 3.0)); }},
      {"tanh", 3, 4, [](Tape&, Var x) { return ad::tanh(ad::scale(x, 2.0)); }},
      {"leaky_relu", 3, 4, [](Tape&, Var x) { return ad::leaky_relu(x, 0.2); }},
      {"log", 3, 4, [](Tape&, Var x) { return ad::log(x); }, 0.2, 2.0},
      {"sum", 3, 4, [](Tape&, Var x) { return ad::sum(x); }},
      {"mean", 3, 4, [](Tape&, Var x) { return ad::mean(x); }},
  };
}

// Worst error for one op over `points` random inputs drawn from `seed`.
inline double op_worst_error(const OpCase& c, std::size_t points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (std::size_t point = 0; point < points; ++point) {
    Tensor x = random_tensor(c.rows, c.cols, rng, c.lo, c.hi);
    // Keep leaky_relu probes away from the kink.
    if (std::string(c.name) == "leaky_relu") {
      for (double& v : x.data()) v = std::abs(v) < 1e-3 ? 0.5 : v;
    }
    worst = std::max(worst, op_error(c.op, x, seed * 131 + point));
  }
  return worst;
}

}  // namespace gradcase
