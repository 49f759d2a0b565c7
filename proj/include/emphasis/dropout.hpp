#pragma once

#include <random>

#include "emphasis/tensor.hpp"

namespace emphasis {

enum class Mode { train, eval };

// Inverted dropout: in train mode each entry is 0 with probability `rate`
// and 1/(1-rate) otherwise; eval mode (or rate 0) yields all ones.
inline Tensor dropout_mask(const Shape& shape, double rate, std::mt19937_64& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout_mask: rate must lie in [0,1)");
  Tensor mask(shape, 1.0);
  if (mode == Mode::eval || rate == 0.0) return mask;
  std::bernoulli_distribution keep(1.0 - rate);
  const double kept = 1.0 / (1.0 - rate);
  for (double& v : mask.data()) v = keep(rng) ? kept : 0.0;
  return mask;
}

}  // namespace emphasis
