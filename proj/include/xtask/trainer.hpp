#pragma once

#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtask/losses.hpp"
#include "xtask/metrics.hpp"
#include "xtask/model.hpp"
#include "xtask/optim.hpp"
#include "xtask/synth_data.hpp"

namespace xtask {

struct TrainConfig {
  Variant variant = Variant::XTC;
  int64_t epochs = 60;
  int64_t batch_size = 8;
  double lr = 1e-3;  // desk-scale default; the full-scale protocol uses 1e-4
  int64_t lr_halve_every = 25;
  double lambda1 = 0.01, lambda2 = 0.01;
  Weighting weighting = Weighting::uncertainty;
  double gradnorm_alpha = 1.5;
  double gradnorm_lr = 0.025;
  uint64_t seed = 0;
  std::string data_dir;
  std::string eval_data_dir;
  std::string out_dir;
  int64_t eval_every = 10;
  std::string precision = "f32";
  bool augment = true;
  ModelConfig model;

  void validate() const {
    check(lr > 0, ErrorCategory::config, "lr must be positive");
    check(epochs >= 1, ErrorCategory::config, "epochs must be >= 1");
    check(batch_size >= 2, ErrorCategory::config,
          "batch_size must be >= 2 (batch norm runs in training mode)");
    check(lr_halve_every >= 1, ErrorCategory::config, "lr_halve_every must be >= 1");
    check(lambda1 >= 0 && lambda1 <= 1 && lambda2 >= 0 && lambda2 <= 1,
          ErrorCategory::config, "lambda weights must lie in [0,1]");
    check(eval_every >= 1, ErrorCategory::config, "eval_every must be >= 1");
    check(precision == "f32" || precision == "f64", ErrorCategory::config,
          "precision must be f32 or f64");
    check(!data_dir.empty(), ErrorCategory::config, "data_dir is required");
    check(!eval_data_dir.empty(), ErrorCategory::config, "eval_data_dir is required");
    check(!out_dir.empty(), ErrorCategory::config, "out_dir is required");
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"lr_halve_every", c.lr_halve_every},
       {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},
       {"weighting", to_string(c.weighting)},
       {"gradnorm_alpha", c.gradnorm_alpha},
       {"gradnorm_lr", c.gradnorm_lr},
       {"seed", c.seed},
       {"data_dir", c.data_dir},
       {"eval_data_dir", c.eval_data_dir},
       {"out_dir", c.out_dir},
       {"eval_every", c.eval_every},
       {"precision", c.precision},
       {"augment", c.augment},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("lr")) j.at("lr").get_to(c.lr);
  if (j.contains("lr_halve_every")) j.at("lr_halve_every").get_to(c.lr_halve_every);
  if (j.contains("lambda1")) j.at("lambda1").get_to(c.lambda1);
  if (j.contains("lambda2")) j.at("lambda2").get_to(c.lambda2);
  if (j.contains("weighting"))
    c.weighting = weighting_from_string(j.at("weighting").get<std::string>());
  if (j.contains("gradnorm_alpha")) j.at("gradnorm_alpha").get_to(c.gradnorm_alpha);
  if (j.contains("gradnorm_lr")) j.at("gradnorm_lr").get_to(c.gradnorm_lr);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("data_dir")) j.at("data_dir").get_to(c.data_dir);
  if (j.contains("eval_data_dir")) j.at("eval_data_dir").get_to(c.eval_data_dir);
  if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
  if (j.contains("eval_every")) j.at("eval_every").get_to(c.eval_every);
  if (j.contains("precision")) j.at("precision").get_to(c.precision);
  if (j.contains("augment")) j.at("augment").get_to(c.augment);
  if (j.contains("model")) j.at("model").get_to(c.model);
}

// ---- batch assembly ------------------------------------------------------------

template <std::floating_point T>
struct Batch {
  Tensor<T> image;         // (N,3,H,W)
  Tensor<T> seg_target;    // (N,H,W) class ids
  Tensor<T> depth_target;  // (N,1,H,W)
  Tensor<T> depth_mask;    // (N,1,H,W) 1 where depth is valid
};

inline SceneSample normalize_only(const SceneSample& s, const std::array<double, 3>& mean,
                                  const std::array<double, 3>& stddev) {
  int64_t hw = s.seg.numel();
  std::vector<float> img(s.image.data().begin(), s.image.data().end());
  for (int64_t c = 0; c < 3; ++c) {
    float m = static_cast<float>(mean[c]);
    float inv = static_cast<float>(1.0 / stddev[c]);
    for (int64_t i = 0; i < hw; ++i) img[c * hw + i] = (img[c * hw + i] - m) * inv;
  }
  SceneSample out;
  out.image = Tensor<float>::from({3, s.seg.dim(0), s.seg.dim(1)}, std::move(img));
  out.seg = s.seg;
  out.depth = s.depth;
  return out;
}

template <std::floating_point T>
Batch<T> assemble_batch(const std::vector<SceneSample>& prepared,
                        std::span<const int64_t> indices) {
  check(!indices.empty(), ErrorCategory::data, "assemble_batch: empty batch");
  const SceneSample& first = prepared[static_cast<size_t>(indices[0])];
  int64_t H = first.seg.dim(0), W = first.seg.dim(1);
  int64_t N = static_cast<int64_t>(indices.size());
  std::vector<T> img(static_cast<size_t>(N * 3 * H * W));
  std::vector<T> seg(static_cast<size_t>(N * H * W));
  std::vector<T> dep(static_cast<size_t>(N * H * W));
  std::vector<T> mask(static_cast<size_t>(N * H * W));
  for (int64_t n = 0; n < N; ++n) {
    const SceneSample& s = prepared[static_cast<size_t>(indices[n])];
    auto iv = s.image.data();
    auto sv = s.seg.data();
    auto dv = s.depth.data();
    for (int64_t i = 0; i < 3 * H * W; ++i) img[n * 3 * H * W + i] = static_cast<T>(iv[i]);
    for (int64_t i = 0; i < H * W; ++i) {
      seg[n * H * W + i] = static_cast<T>(sv[i]);
      dep[n * H * W + i] = static_cast<T>(dv[i]);
      mask[n * H * W + i] = dv[i] > 0.0f ? T(1) : T(0);
    }
  }
  Batch<T> b;
  b.image = Tensor<T>::from({N, 3, H, W}, std::move(img));
  b.seg_target = Tensor<T>::from({N, H, W}, std::move(seg));
  b.depth_target = Tensor<T>::from({N, 1, H, W}, std::move(dep));
  b.depth_mask = Tensor<T>::from({N, 1, H, W}, std::move(mask));
  return b;
}

// ---- per-step losses -------------------------------------------------------------

template <std::floating_point T>
struct StepLosses {
  Tensor<T> L1, L2;
  Tensor<T> ell1, ell2;        // direct terms
  Tensor<T> cross1, cross2;    // defined for ALIGN/XTC
  LossReport report;
};

template <std::floating_point T>
StepLosses<T> compute_losses(const ForwardOutput<T>& out, const Batch<T>& batch,
                             Variant variant, T lambda1, T lambda2) {
  StepLosses<T> r;
  r.ell1 = seg_cross_entropy(out.seg, batch.seg_target);
  r.ell2 = depth_l1(out.depth, batch.depth_target, batch.depth_mask);
  r.report.ell1 = static_cast<double>(r.ell1.item());
  r.report.ell2 = static_cast<double>(r.ell2.item());
  switch (variant) {
    case Variant::ST:
    case Variant::MT:
      r.L1 = r.ell1;
      r.L2 = r.ell2;
      break;
    case Variant::XTC:
      r.cross1 = seg_consistency(out.transferred_seg, out.seg);
      r.cross2 = depth_consistency(out.transferred_depth, out.depth);
      r.L1 = task_loss(r.ell1, r.cross1, lambda1);
      r.L2 = task_loss(r.ell2, r.cross2, lambda2);
      break;
    case Variant::ALIGN: {
      auto [a_seg, a_dep] = align_losses(out.transferred_seg, batch.seg_target,
                                         out.transferred_depth, batch.depth_target,
                                         batch.depth_mask);
      r.cross1 = a_seg;
      r.cross2 = a_dep;
      r.L1 = task_loss(r.ell1, r.cross1, lambda1);
      r.L2 = task_loss(r.ell2, r.cross2, lambda2);
      break;
    }
  }
  if (r.cross1.defined()) {
    r.report.ell_2to1 = static_cast<double>(r.cross1.item());
    r.report.ell_1to2 = static_cast<double>(r.cross2.item());
  }
  r.report.L1 = static_cast<double>(r.L1.item());
  r.report.L2 = static_cast<double>(r.L2.item());
  return r;
}

// ---- evaluation -------------------------------------------------------------------

template <std::floating_point T>
MetricsReport evaluate_model(XTaskNet<T>& model, const Dataset& ds, int64_t batch_size) {
  check(!ds.samples.empty(), ErrorCategory::data, "evaluate: empty dataset");
  check(model.cfg.num_classes == ds.meta.C, ErrorCategory::config,
        "evaluate: model classes do not match dataset");
  NoGradGuard no_grad;
  int64_t C = ds.meta.C;
  std::vector<int64_t> conf(static_cast<size_t>(C * C), 0);
  double abs_sum = 0, rel_sum = 0;
  int64_t depth_n = 0;
  std::vector<SceneSample> prepared;
  prepared.reserve(ds.samples.size());
  for (const auto& s : ds.samples) prepared.push_back(normalize_only(s, ds.meta.mean, ds.meta.stddev));
  int64_t n = static_cast<int64_t>(prepared.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t cnt = std::min(batch_size, n - start);
    std::vector<int64_t> idx(static_cast<size_t>(cnt));
    std::iota(idx.begin(), idx.end(), start);
    Batch<T> b = assemble_batch<T>(prepared, idx);
    ForwardOutput<T> out = model.forward(b.image, /*train=*/false);
    std::vector<int32_t> pred = argmax_channel(out.seg);
    auto gt = b.seg_target.data();
    for (size_t i = 0; i < pred.size(); ++i) {
      int32_t g = static_cast<int32_t>(gt[i]);
      if (g == kVoidClass) continue;
      conf[static_cast<size_t>(g) * C + pred[i]]++;
    }
    auto dp = out.depth.data();
    auto dt = b.depth_target.data();
    auto dm = b.depth_mask.data();
    for (size_t i = 0; i < dp.size(); ++i) {
      if (dm[i] <= T(0)) continue;
      double gtv = static_cast<double>(dt[i]);
      check(gtv > 0, ErrorCategory::data, "evaluate: nonpositive depth target inside mask");
      double d = std::abs(static_cast<double>(dp[i]) - gtv);
      abs_sum += d;
      rel_sum += d / gtv;
      ++depth_n;
    }
  }
  check(depth_n > 0, ErrorCategory::data, "evaluate: no valid depth pixels");
  SegScores seg = miou_pixacc(conf, C);
  MetricsReport r;
  r.miou = seg.miou;
  r.pix_acc = seg.pix_acc;
  r.per_class_iou = seg.per_class_iou;
  r.abs_err = abs_sum / depth_n;
  r.rel_err = rel_sum / depth_n;
  return r;
}

// ---- training ----------------------------------------------------------------------

struct TrainResult {
  std::filesystem::path final_checkpoint;
  MetricsReport final_eval;
  std::vector<double> epoch_mean_total;
  int64_t steps = 0;
};

namespace detail {

template <std::floating_point T>
double ref_layer_grad_norm(std::vector<NamedTensor<T>>& ref_params) {
  double acc = 0;
  for (auto& p : ref_params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

}  // namespace detail

template <std::floating_point T>
TrainResult train_impl(const TrainConfig& cfg) {
  cfg.validate();
  Dataset train_ds = read_dataset(cfg.data_dir);
  Dataset eval_ds = read_dataset(cfg.eval_data_dir);
  check(train_ds.meta.C == cfg.model.num_classes, ErrorCategory::config,
        "training dataset has " + std::to_string(train_ds.meta.C) +
            " classes, model expects " + std::to_string(cfg.model.num_classes));
  check(train_ds.meta.H == eval_ds.meta.H && train_ds.meta.W == eval_ds.meta.W &&
            train_ds.meta.C == eval_ds.meta.C,
        ErrorCategory::config, "train/eval dataset geometry mismatch");
  check(static_cast<int64_t>(train_ds.samples.size()) >= cfg.batch_size,
        ErrorCategory::config, "dataset smaller than one batch");

  ModelConfig mc = cfg.model;
  mc.variant = cfg.variant;
  XTaskNet<T> model(mc, cfg.seed);
  {
    // Fail early on any resolution mismatch between the dataset and the model.
    int64_t div = int64_t(1) << mc.decoder_blocks();
    check(train_ds.meta.H % div == 0 && train_ds.meta.W % div == 0, ErrorCategory::shape,
          "dataset resolution is not divisible by the model's downsampling factor");
    if (cfg.variant == Variant::ALIGN || cfg.variant == Variant::XTC)
      check(train_ds.meta.H % 8 == 0 && train_ds.meta.W % 8 == 0, ErrorCategory::shape,
            "dataset resolution must be divisible by 8 for task-transfer nets");
  }

  auto params = model.parameters();
  WeightingState<T> wstate = WeightingState<T>::make(cfg.weighting);
  if (cfg.weighting == Weighting::uncertainty) {
    params.push_back({"loss.s1", wstate.s1, true});
    params.push_back({"loss.s2", wstate.s2, true});
  }
  std::vector<NamedTensor<T>> ref_params;  // last shared encoder block (GradNorm)
  {
    std::string ref_prefix =
        "encoder.stage" + std::to_string(mc.encoder_stages.size() - 1) + ".";
    for (auto& p : params)
      if (p.name.rfind(ref_prefix, 0) == 0) ref_params.push_back(p);
  }

  std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  check(!ec, ErrorCategory::io, "cannot create run directory " + out_dir.string());
  {
    nlohmann::json run = cfg;
    run["train_samples"] = train_ds.samples.size();
    run["eval_samples"] = eval_ds.samples.size();
    std::ofstream f(out_dir / "run.json");
    check(f.good(), ErrorCategory::io, "cannot write run.json");
    f << run.dump(2) << '\n';
  }
  std::ofstream loss_log(out_dir / "losses.ndjson");
  std::ofstream metric_log(out_dir / "metrics.ndjson");
  check(loss_log.good() && metric_log.good(), ErrorCategory::io, "cannot open run logs");

  AugmentConfig aug;
  aug.mean = train_ds.meta.mean;
  aug.stddev = train_ds.meta.stddev;
  Rng aug_rng = Rng(cfg.seed).fork(0x617567);

  Adam<T> adam;
  TrainResult result;
  const int64_t n_train = static_cast<int64_t>(train_ds.samples.size());
  const int64_t batches = n_train / cfg.batch_size;
  MetricsReport last_eval;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_schedule(epoch, cfg.lr, cfg.lr_halve_every);
    std::vector<int64_t> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(cfg.seed ^ (0x5851f42d4c957f2dULL + static_cast<uint64_t>(epoch)));
    fisher_yates_shuffle(order, shuffle_rng);

    double epoch_total = 0;
    for (int64_t bi = 0; bi < batches; ++bi) {
      std::span<const int64_t> idx(order.data() + bi * cfg.batch_size,
                                   static_cast<size_t>(cfg.batch_size));
      std::vector<SceneSample> prepared(static_cast<size_t>(cfg.batch_size));
      for (int64_t k = 0; k < cfg.batch_size; ++k) {
        const SceneSample& s = train_ds.samples[static_cast<size_t>(idx[k])];
        prepared[static_cast<size_t>(k)] =
            cfg.augment ? augment(s, aug, aug_rng)
                        : normalize_only(s, train_ds.meta.mean, train_ds.meta.stddev);
      }
      std::vector<int64_t> local(static_cast<size_t>(cfg.batch_size));
      std::iota(local.begin(), local.end(), 0);
      Batch<T> batch = assemble_batch<T>(prepared, local);

      ForwardOutput<T> out = model.forward(batch.image, /*train=*/true);
      StepLosses<T> losses = compute_losses(out, batch, cfg.variant,
                                            static_cast<T>(cfg.lambda1),
                                            static_cast<T>(cfg.lambda2));

      double gn1 = 0, gn2 = 0;
      if (cfg.weighting == Weighting::gradnorm) {
        if (!wstate.has_initial) {
          wstate.initial_L1 = losses.report.L1;
          wstate.initial_L2 = losses.report.L2;
          wstate.has_initial = true;
        }
        for (auto& p : params) p.tensor.zero_grad();
        losses.L1.backward();
        gn1 = detail::ref_layer_grad_norm(ref_params);
        for (auto& p : params) p.tensor.zero_grad();
        losses.L2.backward();
        gn2 = detail::ref_layer_grad_norm(ref_params);
      }

      CombinedLoss<T> combined = combine_total(losses.L1, losses.L2, wstate);
      losses.report.omega1 = combined.omega1;
      losses.report.omega2 = combined.omega2;
      losses.report.total = combined.total;
      check(std::isfinite(combined.total), ErrorCategory::divergence,
            "training diverged: non-finite loss at epoch " + std::to_string(epoch));

      for (auto& p : params) p.tensor.zero_grad();
      combined.objective.backward();
      if (cfg.weighting == Weighting::gradnorm) {
        auto [w1, w2] = gradnorm_update(gn1, gn2, wstate.initial_L1, wstate.initial_L2,
                                        losses.report.L1, losses.report.L2, wstate.w1,
                                        wstate.w2, cfg.gradnorm_alpha, cfg.gradnorm_lr);
        wstate.w1 = w1;
        wstate.w2 = w2;
      }
      adam.step(params, static_cast<T>(lr));
      ++result.steps;

      nlohmann::json line = losses.report;
      line["epoch"] = epoch;
      line["step"] = result.steps;
      line["lr"] = lr;
      loss_log << line.dump() << '\n';
      epoch_total += combined.total;
    }
    result.epoch_mean_total.push_back(epoch_total / static_cast<double>(batches));

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      last_eval = evaluate_model(model, eval_ds, cfg.batch_size);
      nlohmann::json line = last_eval;
      line["epoch"] = epoch;
      line["split"] = "eval";
      metric_log << line.dump() << '\n';
      metric_log.flush();
      save_checkpoint(out_dir / ("ckpt_epoch_" + std::to_string(epoch + 1)), model,
                      result.steps);
    }
    loss_log.flush();
  }
  save_checkpoint(out_dir / "final", model, result.steps);
  result.final_checkpoint = out_dir / "final";
  result.final_eval = last_eval;
  return result;
}

inline TrainResult train_run(const TrainConfig& cfg) {
  if (cfg.precision == "f64") return train_impl<double>(cfg);
  return train_impl<float>(cfg);
}

/// Loads a checkpoint, evaluates it, and optionally scores Delta_m against a
/// previously written baseline report.
inline nlohmann::json evaluate_checkpoint(const std::filesystem::path& ckpt_dir,
                                          const std::filesystem::path& data_dir,
                                          const std::optional<std::filesystem::path>&
                                              baseline_report,
                                          int64_t batch_size = 8) {
  nlohmann::json manifest = read_checkpoint_manifest(ckpt_dir);
  std::string dtype = manifest.value("dtype", "f32");
  Dataset ds = read_dataset(data_dir);
  MetricsReport report;
  if (dtype == "f64") {
    auto [model, step] = load_checkpoint<double>(ckpt_dir);
    report = evaluate_model(model, ds, batch_size);
  } else {
    auto [model, step] = load_checkpoint<float>(ckpt_dir);
    report = evaluate_model(model, ds, batch_size);
  }
  nlohmann::json out = report;
  if (baseline_report) {
    std::ifstream f(*baseline_report);
    check(f.good(), ErrorCategory::io, "cannot open baseline report " + baseline_report->string());
    nlohmann::json bj = nlohmann::json::parse(f, nullptr, false);
    check(!bj.is_discarded(), ErrorCategory::data, "malformed baseline report");
    MetricsReport base = bj.get<MetricsReport>();
    out["delta_m_vs_baseline"] = delta_m(report, base);
  }
  return out;
}

}  // namespace xtask
