#include "rohydr/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace rohydr {

double grad_check_params(const std::function<Tensor()>& loss,
                         const std::vector<Tensor>& params, double h) {
  std::vector<bool> saved_flags;
  for (const auto& p : params) saved_flags.push_back(p.requires_grad());

  std::vector<std::vector<double>> analytic;
  {
    GraphScope scope;
    std::vector<Tensor> ps = params;
    for (auto& p : ps) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Tensor value = loss();
    if (value.numel() != 1) {
      throw ContractViolation("grad_check: function must be scalar-valued");
    }
    backward(value);
    for (auto& p : ps) {
      analytic.push_back(p.grad());
      p.zero_grad();
    }
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss().item();
      data[i] = orig - h;
      const double down = loss().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    p.set_requires_grad(saved_flags[k]);
  }
  return worst;
}

double grad_check(const TensorFn& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  return grad_check_params([&] { return f(probe); }, {probe}, h);
}

}  // namespace rohydr
