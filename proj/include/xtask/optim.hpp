#pragma once

#include <cmath>
#include <vector>

#include "xtask/model.hpp"
#include "xtask/tensor.hpp"

namespace xtask {

/// lr0 * 0.5^floor(epoch / halve_every). Exact halving via exponent shifts.
inline double lr_schedule(int64_t epoch, double lr0, int64_t halve_every) {
  check(epoch >= 0, ErrorCategory::config, "lr_schedule: epoch must be >= 0");
  check(halve_every >= 1, ErrorCategory::config, "lr_schedule: halve_every must be >= 1");
  return std::ldexp(lr0, -static_cast<int>(epoch / halve_every));
}

/// Bias-corrected Adam. Moment buffers are keyed by position in the parameter
/// list, which must stay stable across steps.
template <std::floating_point T>
struct Adam {
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  int64_t step_count = 0;
  std::vector<std::vector<T>> m, v;

  void step(std::vector<NamedTensor<T>>& params, T lr) {
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].tensor.numel(), T(0));
        v[i].assign(params[i].tensor.numel(), T(0));
      }
    }
    check(m.size() == params.size(), ErrorCategory::config,
          "adam: parameter list changed size between steps");
    ++step_count;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].tensor;
      if (!p.has_grad()) continue;  // parameter untouched by this loss
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& mi = m[i];
      auto& vi = v[i];
      for (size_t j = 0; j < w.size(); ++j) {
        T gj = g[j];
        if (!std::isfinite(gj))
          fail(ErrorCategory::divergence,
               "adam: non-finite gradient in '" + params[i].name + "'");
        mi[j] = beta1 * mi[j] + (T(1) - beta1) * gj;
        vi[j] = beta2 * vi[j] + (T(1) - beta2) * gj * gj;
        T mhat = mi[j] / bc1;
        T vhat = vi[j] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace xtask
