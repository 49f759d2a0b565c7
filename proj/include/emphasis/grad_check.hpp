#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "emphasis/autodiff.hpp"

namespace emphasis::ad {

// Builds a scalar on the given tape from the input variable.
using ScalarFn = std::function<Var(Tape&, Var)>;

namespace detail {

inline double scalar_value(const Var& y) {
  if (y.value().size() != 1) {
    throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(y.value().shape()));
  }
  return y.value()[0];
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace detail

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const ScalarFn& f, const Tensor& point, double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in (0, 1e-3]");
  std::vector<double> analytic;
  {
    Tape tape;
    Var x = tape.variable(point);
    Var y = f(tape, x);
    detail::scalar_value(y);
    tape.backward(y);
    auto g = tape.grad(x);
    analytic.assign(g.begin(), g.end());
    if (analytic.empty()) analytic.assign(point.size(), 0.0);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.variable(p);
    return detail::scalar_value(f(tape, x));
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

// Same check over a set of external parameter tensors, each perturbed in
// place. f must rebuild its whole computation on the given tape.
inline double grad_check_params(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                                double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in (0, 1e-3]");
  std::vector<bool> saved_flags;
  for (Tensor* p : params) {
    saved_flags.push_back(p->requires_grad());
    p->set_requires_grad(true);
    p->clear_grad();
  }
  {
    Tape tape;
    Var y = f(tape);
    detail::scalar_value(y);
    tape.backward(y);
  }
  auto eval = [&] {
    Tape tape;
    return detail::scalar_value(f(tape));
  };
  double worst = 0.0;
  for (Tensor* p : params) {
    std::vector<double> analytic(p->size(), 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = (*p)[i];
      (*p)[i] = orig + eps;
      const double up = eval();
      (*p)[i] = orig - eps;
      const double down = eval();
      (*p)[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k]->clear_grad();
    params[k]->set_requires_grad(saved_flags[k]);
  }
  return worst;
}

}  // namespace emphasis::ad
