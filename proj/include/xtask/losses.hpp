#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <json.hpp>

#include "xtask/tensor.hpp"

namespace xtask {

inline constexpr int kVoidClass = 255;

enum class Weighting { equal, uncertainty, gradnorm };

inline const char* to_string(Weighting w) {
  switch (w) {
    case Weighting::equal: return "equal";
    case Weighting::uncertainty: return "uncertainty";
    case Weighting::gradnorm: return "gradnorm";
  }
  return "?";
}

inline Weighting weighting_from_string(const std::string& s) {
  if (s == "equal") return Weighting::equal;
  if (s == "uncertainty") return Weighting::uncertainty;
  if (s == "gradnorm") return Weighting::gradnorm;
  fail(ErrorCategory::config,
       "unknown weighting '" + s + "' (expected equal|uncertainty|gradnorm)");
}

/// Per-term loss values for one optimization step.
struct LossReport {
  double ell1 = 0, ell2 = 0;          // direct losses
  double ell_2to1 = 0, ell_1to2 = 0;  // cross-task terms
  double L1 = 0, L2 = 0;              // per-task combined losses
  double omega1 = 1, omega2 = 1;      // task weights
  double total = 0;                   // omega1*L1 + omega2*L2
};

inline void to_json(nlohmann::json& j, const LossReport& r) {
  j = {{"ell1", r.ell1},  {"ell2", r.ell2},     {"ell_2to1", r.ell_2to1},
       {"ell_1to2", r.ell_1to2}, {"L1", r.L1},  {"L2", r.L2},
       {"omega1", r.omega1},     {"omega2", r.omega2}, {"total", r.total}};
}

// ---- direct losses ----------------------------------------------------------

/// Mean cross-entropy of seg logits (N,C,H,W) against integer class targets
/// (N,H,W); pixels labeled `ignore_index` are excluded from both the sum and
/// the count.
template <std::floating_point T>
Tensor<T> seg_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target,
                            int ignore_index = kVoidClass) {
  check(logits.rank() == 4 && target.rank() == 3, ErrorCategory::shape,
        "seg_cross_entropy expects (N,C,H,W) logits and (N,H,W) targets");
  int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  check(target.dim(0) == N && target.dim(1) == H && target.dim(2) == W,
        ErrorCategory::shape, "seg target shape mismatch");
  std::vector<T> onehot(static_cast<size_t>(N * C * H * W), T(0));
  int64_t valid = 0;
  auto tv = target.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H * W; ++i) {
      int64_t cls = static_cast<int64_t>(tv[n * H * W + i]);
      if (cls == ignore_index) continue;
      check(cls >= 0 && cls < C, ErrorCategory::data,
            "seg target class " + std::to_string(cls) + " out of range");
      onehot[(n * C + cls) * H * W + i] = T(1);
      ++valid;
    }
  check(valid > 0, ErrorCategory::data, "seg_cross_entropy: all pixels are ignored");
  Tensor<T> mask = Tensor<T>::from({N, C, H, W}, std::move(onehot));
  Tensor<T> lp = log(softmax(logits, 1));
  return neg(sum(lp * mask)) * (T(1) / static_cast<T>(valid));
}

/// Mean absolute error over the valid-depth mask. `target` and `mask` are
/// constants of the same shape as `pred`; mask entries are 0/1.
template <std::floating_point T>
Tensor<T> depth_l1(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  check(pred.shape() == target.shape() && pred.shape() == mask.shape(),
        ErrorCategory::shape, "depth_l1 operands must share a shape");
  double count = 0;
  for (T v : mask.data()) count += static_cast<double>(v);
  check(count > 0, ErrorCategory::data, "depth_l1: empty valid mask");
  return sum(abs(pred - target) * mask) * (T(1) / static_cast<T>(count));
}

// ---- cross-task consistency losses -------------------------------------------

/// Soft-target cross-entropy of the transferred seg prediction against the
/// detached distribution of the direct prediction, averaged over all pixels.
/// Gradient flows only through the transferred branch.
template <std::floating_point T>
Tensor<T> seg_consistency(const Tensor<T>& transferred_logits, const Tensor<T>& direct_logits) {
  check(transferred_logits.shape() == direct_logits.shape(), ErrorCategory::shape,
        "seg_consistency operands must share a shape");
  int64_t N = direct_logits.dim(0), H = direct_logits.dim(2), W = direct_logits.dim(3);
  Tensor<T> soft_target = detach(softmax(direct_logits, 1));
  Tensor<T> lp = log(softmax(transferred_logits, 1));
  return neg(sum(soft_target * lp)) * (T(1) / static_cast<T>(N * H * W));
}

/// Mean absolute difference between the transferred depth and the detached
/// direct depth, averaged over all pixels (the consistency target carries no
/// validity mask).
template <std::floating_point T>
Tensor<T> depth_consistency(const Tensor<T>& transferred_depth, const Tensor<T>& direct_depth) {
  check(transferred_depth.shape() == direct_depth.shape(), ErrorCategory::shape,
        "depth_consistency operands must share a shape");
  return sum(abs(transferred_depth - detach(direct_depth))) *
         (T(1) / static_cast<T>(direct_depth.numel()));
}

// ---- alignment losses ---------------------------------------------------------

/// Alignment losses target the ground truth, so gradients flow through the
/// transfer nets back into the direct branches (no detach).
template <std::floating_point T>
std::pair<Tensor<T>, Tensor<T>> align_losses(const Tensor<T>& transferred_seg,
                                             const Tensor<T>& y_seg,
                                             const Tensor<T>& transferred_depth,
                                             const Tensor<T>& y_depth,
                                             const Tensor<T>& depth_mask,
                                             int ignore_index = kVoidClass) {
  return {seg_cross_entropy(transferred_seg, y_seg, ignore_index),
          depth_l1(transferred_depth, y_depth, depth_mask)};
}

// ---- combination ---------------------------------------------------------------

/// Per-task loss: (1-lambda) * direct + lambda * cross.
template <std::floating_point T>
Tensor<T> task_loss(const Tensor<T>& direct, const Tensor<T>& cross, T lambda) {
  check(lambda >= T(0) && lambda <= T(1), ErrorCategory::config,
        "task-loss lambda must lie in [0,1]");
  return direct * (T(1) - lambda) + cross * lambda;
}

/// State for the task-weighting schemes. Uncertainty weighting holds two
/// learnable log-variance scalars; GradNorm maintains host-side weights that
/// are adapted after each step.
template <std::floating_point T>
struct WeightingState {
  Weighting scheme = Weighting::equal;
  Tensor<T> s1, s2;  // uncertainty log-variances
  double w1 = 1.0, w2 = 1.0;
  double initial_L1 = 0.0, initial_L2 = 0.0;
  bool has_initial = false;

  static WeightingState make(Weighting scheme) {
    WeightingState st;
    st.scheme = scheme;
    st.s1 = Tensor<T>::zeros({1}, true);
    st.s2 = Tensor<T>::zeros({1}, true);
    return st;
  }
};

template <std::floating_point T>
struct CombinedLoss {
  Tensor<T> objective;  // tensor to backpropagate
  double omega1 = 1, omega2 = 1;
  double total = 0;  // omega1*L1 + omega2*L2 (the logged total)
};

template <std::floating_point T>
CombinedLoss<T> combine_total(const Tensor<T>& L1, const Tensor<T>& L2,
                              WeightingState<T>& state) {
  CombinedLoss<T> out;
  switch (state.scheme) {
    case Weighting::equal: {
      out.objective = L1 + L2;
      out.omega1 = out.omega2 = 1.0;
      break;
    }
    case Weighting::uncertainty: {
      // exp(-s_t) * L_t + s_t, s_t trained jointly with the model.
      Tensor<T> w1 = exp(neg(state.s1));
      Tensor<T> w2 = exp(neg(state.s2));
      out.objective = (w1 * L1 + state.s1) + (w2 * L2 + state.s2);
      out.omega1 = static_cast<double>(w1.item());
      out.omega2 = static_cast<double>(w2.item());
      break;
    }
    case Weighting::gradnorm: {
      out.objective = L1 * static_cast<T>(state.w1) + L2 * static_cast<T>(state.w2);
      out.omega1 = state.w1;
      out.omega2 = state.w2;
      break;
    }
  }
  out.total = out.omega1 * static_cast<double>(L1.item()) +
              out.omega2 * static_cast<double>(L2.item());
  return out;
}

/// One GradNorm adaptation step. `grad_norm_t` are the L2 norms of the
/// reference-layer gradients of the raw task losses; the current weights are
/// applied internally (G_t = w_t * ||grad L_t||). Weights are renormalized so
/// they stay positive and sum to 2 exactly.
inline std::pair<double, double> gradnorm_update(double grad_norm1, double grad_norm2,
                                                 double initial_L1, double initial_L2,
                                                 double L1, double L2, double w1, double w2,
                                                 double alpha, double lr_w) {
  check(initial_L1 != 0.0 && initial_L2 != 0.0, ErrorCategory::data,
        "gradnorm_update: initial losses must be nonzero");
  double G1 = w1 * grad_norm1, G2 = w2 * grad_norm2;
  double Gbar = 0.5 * (G1 + G2);
  double r1 = L1 / initial_L1, r2 = L2 / initial_L2;
  double rmean = 0.5 * (r1 + r2);
  double t1 = Gbar * std::pow(r1 / rmean, alpha);
  double t2 = Gbar * std::pow(r2 / rmean, alpha);
  auto sign = [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); };
  w1 -= lr_w * sign(G1 - t1) * grad_norm1;
  w2 -= lr_w * sign(G2 - t2) * grad_norm2;
  w1 = std::max(w1, 1e-6);
  w2 = std::max(w2, 1e-6);
  double nw1 = 2.0 * w1 / (w1 + w2);
  return {nw1, 2.0 - nw1};
}

}  // namespace xtask
