#include "rohydr/adam.hpp"

#include <cmath>

namespace rohydr {

void adam_step(ParamRegistry& reg, GroupSet groups, AdamState& state, double lr) {
  ++state.steps;
  for (const auto& p : reg.params()) {
    if (!groups.contains(p.group)) continue;
    Tensor t = p.tensor;
    if (!t.requires_grad()) {
      throw ContractViolation("adam: " + p.name + " in " +
                              std::string(group_name(p.group)) +
                              " is not trainable in this update");
    }
    if (!t.has_grad()) continue;
    auto& mom = state.moments[t.impl().get()];
    const std::size_t n = t.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    ++mom.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(mom.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(mom.t));
    const auto& g = t.impl()->grad;
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      x[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
    t.zero_grad();
  }
}

void adam_step(ParamRegistry& reg, GroupSet groups, AdamState& state) {
  adam_step(reg, groups, state, state.lr);
}

}  // namespace rohydr
