#pragma once

#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "xtask/trainer.hpp"

namespace xtask {

struct GradCheckConfig {
  Variant variant = Variant::XTC;
  int64_t H = 8, W = 8;
  int64_t batch = 2;
  int64_t num_classes = 4;
  uint64_t seed = 1;
  double step = 1e-5;
  double lambda1 = 0.3, lambda2 = 0.3;
  Weighting weighting = Weighting::uncertainty;

  ModelConfig tiny_model() const {
    ModelConfig m;
    m.num_classes = num_classes;
    m.encoder_stages = {4, 8};
    m.decoder_channels = 8;
    m.ttnet_channels = {2, 4, 8};
    m.variant = variant;
    return m;
  }
};

struct GradCheckReport {
  std::map<std::string, double> group_max_rel_err;
  double max_rel_err = 0;
  bool detach_contract_ok = true;
  std::string detach_note;
};

inline void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = {{"group_max_rel_err", r.group_max_rel_err},
       {"max_rel_err", r.max_rel_err},
       {"detach_contract_ok", r.detach_contract_ok},
       {"detach_note", r.detach_note}};
}

namespace detail {

/// max over elements of |analytic - central difference| / max(1, |cd|).
template <std::floating_point T>
double fd_check_params(std::vector<NamedTensor<T>>& params,
                       const std::function<double()>& eval_loss,
                       std::span<const double> analytic_flat, double h,
                       std::map<std::string, double>& group_err) {
  double worst = 0;
  size_t cursor = 0;
  for (auto& p : params) {
    std::string group = parameter_group(p.name);
    auto w = p.tensor.mutable_data();
    for (size_t j = 0; j < w.size(); ++j, ++cursor) {
      T orig = w[j];
      w[j] = orig + static_cast<T>(h);
      double up = eval_loss();
      w[j] = orig - static_cast<T>(h);
      double down = eval_loss();
      w[j] = orig;
      double cd = (up - down) / (2.0 * h);
      double err = std::abs(analytic_flat[cursor] - cd) / std::max(1.0, std::abs(cd));
      worst = std::max(worst, err);
      auto [it, inserted] = group_err.try_emplace(group, err);
      if (!inserted) it->second = std::max(it->second, err);
    }
  }
  return worst;
}

}  // namespace detail

/// Compares analytic gradients of the full training objective against central
/// finite differences for every parameter group of a tiny model, and checks
/// the stop-gradient contract of the consistency losses.
inline GradCheckReport gradcheck(const GradCheckConfig& cfg) {
  using T = double;
  GradCheckReport report;

  GenConfig gen;
  gen.H = cfg.H;
  gen.W = cfg.W;
  gen.C = cfg.num_classes;
  gen.seed = cfg.seed;
  gen.min_shapes = 2;
  gen.max_shapes = 4;
  auto samples = generate_dataset(gen, cfg.batch);
  std::vector<int64_t> idx(static_cast<size_t>(cfg.batch));
  std::iota(idx.begin(), idx.end(), 0);
  Batch<T> batch = assemble_batch<T>(samples, idx);

  ModelConfig mc = cfg.tiny_model();
  XTaskNet<T> model(mc, cfg.seed);
  auto params = model.parameters();
  WeightingState<T> wstate = WeightingState<T>::make(cfg.weighting);
  if (cfg.weighting == Weighting::uncertainty) {
    params.push_back({"loss.s1", wstate.s1, true});
    params.push_back({"loss.s2", wstate.s2, true});
  }

  auto loss_tensor = [&]() -> Tensor<T> {
    ForwardOutput<T> out = model.forward(batch.image, /*train=*/true);
    StepLosses<T> losses = compute_losses(out, batch, cfg.variant,
                                          static_cast<T>(cfg.lambda1),
                                          static_cast<T>(cfg.lambda2));
    return combine_total(losses.L1, losses.L2, wstate).objective;
  };

  // The consistency losses stop gradients at their direct-prediction targets,
  // so the finite-difference reference must hold those targets fixed at the
  // base point; otherwise it would differentiate straight through the detach.
  Tensor<T> frozen_q, frozen_d;
  if (cfg.variant == Variant::XTC) {
    NoGradGuard ng;
    ForwardOutput<T> base = model.forward(batch.image, /*train=*/true);
    frozen_q = softmax(base.seg, 1).detach();
    frozen_d = base.depth.detach();
  }
  auto eval_loss = [&]() -> double {
    NoGradGuard ng;
    if (cfg.variant != Variant::XTC) return loss_tensor().item();
    ForwardOutput<T> out = model.forward(batch.image, /*train=*/true);
    Tensor<T> ell1 = seg_cross_entropy(out.seg, batch.seg_target);
    Tensor<T> ell2 = depth_l1(out.depth, batch.depth_target, batch.depth_mask);
    int64_t pix = out.seg.dim(0) * out.seg.dim(2) * out.seg.dim(3);
    Tensor<T> cross1 = neg(sum(frozen_q * log(softmax(out.transferred_seg, 1)))) *
                       (T(1) / static_cast<T>(pix));
    Tensor<T> cross2 = sum(abs(out.transferred_depth - frozen_d)) *
                       (T(1) / static_cast<T>(out.depth.numel()));
    Tensor<T> L1 = task_loss(ell1, cross1, static_cast<T>(cfg.lambda1));
    Tensor<T> L2 = task_loss(ell2, cross2, static_cast<T>(cfg.lambda2));
    return combine_total(L1, L2, wstate).objective.item();
  };

  // Analytic pass.
  for (auto& p : params) p.tensor.zero_grad();
  Tensor<T> obj = loss_tensor();
  obj.backward();
  std::vector<double> analytic;
  for (auto& p : params) {
    if (p.tensor.has_grad()) {
      auto g = p.tensor.grad();
      analytic.insert(analytic.end(), g.begin(), g.end());
    } else {
      analytic.insert(analytic.end(), static_cast<size_t>(p.tensor.numel()), 0.0);
    }
  }

  report.max_rel_err =
      detail::fd_check_params(params, eval_loss, analytic, cfg.step, report.group_max_rel_err);

  // Stop-gradient contract: each consistency loss alone leaves the detached
  // target's decoder at exactly zero; their sum reaches both transfer nets.
  if (cfg.variant == Variant::XTC) {
    auto max_abs_grad = [&](const std::string& prefix) {
      double m = 0;
      for (auto& p : params)
        if (p.name.rfind(prefix, 0) == 0 && p.tensor.has_grad())
          for (T g : p.tensor.grad()) m = std::max(m, std::abs(static_cast<double>(g)));
      return m;
    };
    ForwardOutput<T> out = model.forward(batch.image, /*train=*/true);
    Tensor<T> c_seg = seg_consistency(out.transferred_seg, out.seg);
    Tensor<T> c_dep = depth_consistency(out.transferred_depth, out.depth);

    for (auto& p : params) p.tensor.zero_grad();
    c_seg.backward();
    bool seg_ok = max_abs_grad("dec1.") == 0.0 && max_abs_grad("G.") == 0.0 &&
                  max_abs_grad("F.") > 0.0 && max_abs_grad("dec2.") > 0.0;
    for (auto& p : params) p.tensor.zero_grad();
    c_dep.backward();
    bool dep_ok = max_abs_grad("dec2.") == 0.0 && max_abs_grad("F.") == 0.0 &&
                  max_abs_grad("G.") > 0.0 && max_abs_grad("dec1.") > 0.0;
    for (auto& p : params) p.tensor.zero_grad();
    (c_seg + c_dep).backward();
    bool sum_ok = max_abs_grad("F.") > 0.0 && max_abs_grad("G.") > 0.0 &&
                  max_abs_grad("encoder.") > 0.0;
    report.detach_contract_ok = seg_ok && dep_ok && sum_ok;
    report.detach_note = std::string("seg:") + (seg_ok ? "ok" : "FAIL") +
                         " depth:" + (dep_ok ? "ok" : "FAIL") +
                         " sum:" + (sum_ok ? "ok" : "FAIL");
  }
  return report;
}

}  // namespace xtask
