#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "rohydr/param_registry.hpp"

namespace rohydr {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t steps = 0;

  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
  };
  std::unordered_map<const TensorImpl*, Moments> moments;
};

// Bias-corrected Adam update on the tensors of `groups`, then clears their
// gradients. Tensors that received no gradient at all are skipped; a listed
// tensor that is not marked trainable is a caller error.
void adam_step(ParamRegistry& reg, GroupSet groups, AdamState& state);
void adam_step(ParamRegistry& reg, GroupSet groups, AdamState& state, double lr);

}  // namespace rohydr
