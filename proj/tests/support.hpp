#pragma once

#include <functional>
#include <vector>

#include "xtask/tensor.hpp"

namespace xtask::testing {

/// Central-difference gradient of a scalar-valued function with respect to
/// one leaf tensor. Lives entirely outside the autodiff path.
template <std::floating_point T>
std::vector<double> finite_difference(Tensor<T>& leaf, const std::function<double()>& f,
                                      double h = 1e-5) {
  std::vector<double> g(static_cast<size_t>(leaf.numel()));
  auto w = leaf.mutable_data();
  for (size_t i = 0; i < w.size(); ++i) {
    T orig = w[i];
    w[i] = orig + static_cast<T>(h);
    double up = f();
    w[i] = orig - static_cast<T>(h);
    double down = f();
    w[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |analytic_i - reference_i| / max(1, |reference_i|).
template <std::floating_point T>
double max_rel_err(std::span<const T> analytic, std::span<const double> reference) {
  double worst = 0;
  for (size_t i = 0; i < reference.size(); ++i) {
    double a = analytic.empty() ? 0.0 : static_cast<double>(analytic[i]);
    double err = std::abs(a - reference[i]) / std::max(1.0, std::abs(reference[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Gradient check of f against the analytic grad already stored in `leaf`.
template <std::floating_point T>
double grad_check(Tensor<T>& leaf, const std::function<double()>& f, double h = 1e-5) {
  auto fd = finite_difference(leaf, f, h);
  return max_rel_err(leaf.grad(), std::span<const double>(fd));
}

template <std::floating_point T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                        double lo = -1.0, double hi = 1.0) {
  std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from(std::move(shape), std::move(d), requires_grad);
}

}  // namespace xtask::testing
