#include "rohydr/param_registry.hpp"

#include <bit>
#include <cstring>

namespace rohydr {

namespace {
constexpr std::array<std::string_view, 8> kGroupNames = {
    "theta_fe", "theta_mu", "theta_sigma", "theta_ur",
    "theta_f",  "theta_d",  "theta_mr",    "theta_c"};
}

std::string_view group_name(Group g) {
  return kGroupNames[static_cast<std::size_t>(g)];
}

std::optional<Group> group_from_name(std::string_view name) {
  for (Group g : kAllGroups) {
    if (group_name(g) == name) return g;
  }
  return std::nullopt;
}

std::string GroupSet::str() const {
  std::string out = "{";
  bool first = true;
  for (Group g : kAllGroups) {
    if (!contains(g)) continue;
    if (!first) out += ',';
    out += group_name(g);
    first = false;
  }
  return out + "}";
}

Tensor ParamRegistry::add(Group group, std::string name, Tensor tensor) {
  if (frozen_) {
    throw ContractViolation("parameter registry is frozen; cannot add " + name);
  }
  if (find(name) != nullptr) {
    throw ContractViolation("duplicate parameter name " + name);
  }
  tensor.set_requires_grad(true);
  params_.push_back({std::move(name), group, tensor});
  return tensor;
}

std::vector<Tensor> ParamRegistry::group(Group g) const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.group == g) out.push_back(p.tensor);
  }
  return out;
}

const Param* ParamRegistry::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParamRegistry::set_trainable(GroupSet groups) {
  for (auto& p : params_) p.tensor.set_requires_grad(groups.contains(p.group));
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::uint64_t ParamRegistry::checksum(Group g) const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params_) {
    if (p.group != g) continue;
    for (double v : p.tensor.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

std::vector<std::vector<double>> ParamRegistry::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return out;
}

void ParamRegistry::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != params_.size()) {
    throw ContractViolation("snapshot does not match registry");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    auto dst = t.mutable_data();
    if (dst.size() != values[i].size()) {
      throw ContractViolation("snapshot shape mismatch for " + params_[i].name);
    }
    std::memcpy(dst.data(), values[i].data(), dst.size() * sizeof(double));
  }
}

}  // namespace rohydr
