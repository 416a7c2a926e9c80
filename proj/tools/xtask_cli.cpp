// Command-line surface: dataset generation, training, evaluation, gradient
// checking, and the proposition verification sweep.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "xtask/gradcheck.hpp"
#include "xtask/lvm.hpp"
#include "xtask/synth_data.hpp"
#include "xtask/trainer.hpp"

using namespace xtask;

namespace {

int run_gen_data(const std::string& out_dir, int64_t n, GenConfig cfg) {
  check(n >= 1, ErrorCategory::config, "gen-data: need at least one sample");
  auto samples = generate_dataset(cfg, n);
  write_dataset(out_dir, samples, cfg);
  std::cout << "wrote " << n << " samples (" << cfg.H << "x" << cfg.W << ", C=" << cfg.C
            << ", depth=" << to_string(cfg.depth_mode) << ") to " << out_dir << "\n";
  return 0;
}

int run_train(TrainConfig cfg) {
  auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train_run(cfg);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = result.final_eval;
  summary["steps"] = result.steps;
  summary["seconds"] = secs;
  summary["final_checkpoint"] = result.final_checkpoint.string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data,
             const std::optional<std::string>& baseline,
             const std::optional<std::string>& out_path, int64_t batch_size) {
  std::optional<std::filesystem::path> base;
  if (baseline) base = *baseline;
  nlohmann::json report = evaluate_checkpoint(checkpoint, data, base, batch_size);
  std::cout << report.dump(2) << "\n";
  if (out_path) {
    std::ofstream f(*out_path);
    check(f.good(), ErrorCategory::io, "cannot write report to " + *out_path);
    f << report.dump(2) << '\n';
  }
  return 0;
}

int run_gradcheck(GradCheckConfig cfg, double bound) {
  GradCheckReport report = gradcheck(cfg);
  nlohmann::json j = report;
  j["bound"] = bound;
  std::cout << j.dump(2) << "\n";
  if (report.max_rel_err >= bound || !report.detach_contract_ok) {
    nlohmann::json err = {{"error",
                           {{"category", "verify"},
                            {"message", "gradient check failed: max_rel_err=" +
                                            std::to_string(report.max_rel_err)}}}};
    std::cerr << err.dump() << "\n";
    return static_cast<int>(ErrorCategory::verify);
  }
  return 0;
}

int run_verify_prop(int64_t trials, int64_t max_support, uint64_t seed, double tol,
                    const std::optional<std::string>& ndjson_path) {
  std::ofstream dump;
  if (ndjson_path) {
    dump.open(*ndjson_path);
    check(dump.good(), ErrorCategory::io, "cannot open " + *ndjson_path);
  }
  auto t0 = std::chrono::steady_clock::now();
  SweepSummary s = verify_proposition(trials, max_support, seed, tol, 1e-9,
                                      [&](const PredictorReport& r) {
                                        if (dump.is_open()) {
                                          nlohmann::json line = r;
                                          dump << line.dump() << '\n';
                                        }
                                      });
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::printf("proposition sweep: %lld trials, supports 2..%lld, tol %.1e (%.2fs)\n",
              static_cast<long long>(s.trials), static_cast<long long>(max_support), tol,
              secs);
  std::printf("  %-28s %12.5e\n", "max xtc_gap", s.max_xtc_gap);
  std::printf("  %-28s %12.5e\n", "max xtc_gap - align_gap", s.max_xtc_minus_align);
  std::printf("  %-28s %12.5e\n", "max align_gap - xi", s.max_align_minus_xi);
  std::printf("  %-28s %12.5e\n", "max tower error", s.max_tower_err);
  std::printf("  %-28s %12.5e\n", "max rewrite error", s.max_rewrite_err);
  std::printf("  %-28s %12.5e\n", "max jensen residual error", s.max_residual_err);
  std::printf("  %-28s %12.5e\n", "min jensen slack", s.min_jensen_slack);
  std::printf("  %-28s %12.5e\n", "mean xi_y", s.mean_xi_y);
  std::printf("  %-28s %12.5e\n", "max xi_y", s.max_xi_y);
  std::printf("  violations: %lld\n", static_cast<long long>(s.violations));
  if (s.violations > 0) {
    nlohmann::json err = {{"error",
                           {{"category", "verify"},
                            {"message", std::to_string(s.violations) +
                                            " trials violated the inequality chain"}}}};
    std::cerr << err.dump() << "\n";
    return static_cast<int>(ErrorCategory::verify);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-task consistency multi-task learning lab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  int64_t gen_n = 256;
  GenConfig gen_cfg;
  std::string gen_depth_mode = "inverse_disparity";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--height", gen_cfg.H, "image height");
  gen->add_option("--width", gen_cfg.W, "image width");
  gen->add_option("--classes", gen_cfg.C, "number of segmentation classes");
  gen->add_option("--seed", gen_cfg.seed, "generator seed");
  gen->add_option("--depth-mode", gen_depth_mode, "raw|inverse_disparity");
  gen->add_option("--min-shapes", gen_cfg.min_shapes, "min shapes per scene");
  gen->add_option("--max-shapes", gen_cfg.max_shapes, "max shapes per scene");
  gen->add_option("--noise-std", gen_cfg.noise_std, "image noise sigma");

  // train
  auto* tr = app.add_subcommand("train", "train a model variant");
  std::string tr_config_path;
  TrainConfig tr_cfg;
  std::string tr_variant, tr_weighting, tr_precision;
  bool tr_no_augment = false;
  tr->add_option("--config", tr_config_path, "JSON config file (flags override)");
  tr->add_option("--data", tr_cfg.data_dir, "training dataset directory");
  tr->add_option("--eval-data", tr_cfg.eval_data_dir, "held-out dataset directory");
  tr->add_option("--out", tr_cfg.out_dir, "run output directory");
  tr->add_option("--variant", tr_variant, "ST|MT|ALIGN|XTC");
  tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
  tr->add_option("--batch-size", tr_cfg.batch_size, "batch size");
  tr->add_option("--lr", tr_cfg.lr, "initial learning rate");
  tr->add_option("--lr-halve-every", tr_cfg.lr_halve_every, "halve lr every k epochs");
  tr->add_option("--lambda1", tr_cfg.lambda1, "seg cross-task weight");
  tr->add_option("--lambda2", tr_cfg.lambda2, "depth cross-task weight");
  tr->add_option("--weighting", tr_weighting, "equal|uncertainty|gradnorm");
  tr->add_option("--gradnorm-alpha", tr_cfg.gradnorm_alpha, "GradNorm asymmetry");
  tr->add_option("--seed", tr_cfg.seed, "training seed");
  tr->add_option("--eval-every", tr_cfg.eval_every, "evaluate every k epochs");
  tr->add_option("--precision", tr_precision, "f32|f64");
  tr->add_flag("--no-augment", tr_no_augment, "disable training augmentation");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data;
  std::optional<std::string> ev_baseline, ev_out;
  int64_t ev_batch = 8;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--baseline", ev_baseline, "baseline report for delta_m");
  ev->add_option("--out", ev_out, "write the JSON report here");
  ev->add_option("--batch-size", ev_batch, "evaluation batch size");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  GradCheckConfig gc_cfg;
  std::string gc_variant = "XTC";
  double gc_bound = 1e-4;
  gc->add_option("--variant", gc_variant, "model variant to check");
  gc->add_option("--height", gc_cfg.H, "input height");
  gc->add_option("--width", gc_cfg.W, "input width");
  gc->add_option("--classes", gc_cfg.num_classes, "segmentation classes");
  gc->add_option("--seed", gc_cfg.seed, "seed");
  gc->add_option("--bound", gc_bound, "max allowed relative error");

  // verify-prop
  auto* vp = app.add_subcommand("verify-prop", "verify the predictor inequality chain");
  int64_t vp_trials = 1000, vp_max_support = 5;
  uint64_t vp_seed = 0;
  double vp_tol = 1e-12;
  std::optional<std::string> vp_ndjson;
  vp->add_option("--trials", vp_trials, "number of random models");
  vp->add_option("--max-support", vp_max_support, "max support size per variable");
  vp->add_option("--seed", vp_seed, "sweep seed");
  vp->add_option("--tol", vp_tol, "slack tolerance");
  vp->add_option("--ndjson", vp_ndjson, "dump per-trial reports here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      gen_cfg.depth_mode = depth_mode_from_string(gen_depth_mode);
      return run_gen_data(gen_out, gen_n, gen_cfg);
    }
    if (tr->parsed()) {
      if (!tr_config_path.empty()) {
        std::ifstream f(tr_config_path);
        check(f.good(), ErrorCategory::io, "cannot open config " + tr_config_path);
        nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
        check(!j.is_discarded(), ErrorCategory::config,
              "malformed config JSON: " + tr_config_path);
        TrainConfig from_file = j.get<TrainConfig>();
        // Flags given on the command line override the file.
        if (!tr->count("--data")) tr_cfg.data_dir = from_file.data_dir;
        if (!tr->count("--eval-data")) tr_cfg.eval_data_dir = from_file.eval_data_dir;
        if (!tr->count("--out")) tr_cfg.out_dir = from_file.out_dir;
        if (!tr->count("--epochs")) tr_cfg.epochs = from_file.epochs;
        if (!tr->count("--batch-size")) tr_cfg.batch_size = from_file.batch_size;
        if (!tr->count("--lr")) tr_cfg.lr = from_file.lr;
        if (!tr->count("--lr-halve-every")) tr_cfg.lr_halve_every = from_file.lr_halve_every;
        if (!tr->count("--lambda1")) tr_cfg.lambda1 = from_file.lambda1;
        if (!tr->count("--lambda2")) tr_cfg.lambda2 = from_file.lambda2;
        if (!tr->count("--gradnorm-alpha")) tr_cfg.gradnorm_alpha = from_file.gradnorm_alpha;
        if (!tr->count("--seed")) tr_cfg.seed = from_file.seed;
        if (!tr->count("--eval-every")) tr_cfg.eval_every = from_file.eval_every;
        tr_cfg.variant = from_file.variant;
        tr_cfg.weighting = from_file.weighting;
        tr_cfg.precision = from_file.precision;
        tr_cfg.augment = from_file.augment;
        tr_cfg.model = from_file.model;
        tr_cfg.gradnorm_lr = from_file.gradnorm_lr;
      }
      if (!tr_variant.empty()) tr_cfg.variant = variant_from_string(tr_variant);
      if (!tr_weighting.empty()) tr_cfg.weighting = weighting_from_string(tr_weighting);
      if (!tr_precision.empty()) tr_cfg.precision = tr_precision;
      if (tr_no_augment) tr_cfg.augment = false;
      // The dataset fixes the class count.
      if (!tr_cfg.data_dir.empty()) {
        Dataset probe = read_dataset(tr_cfg.data_dir);
        tr_cfg.model.num_classes = probe.meta.C;
      }
      return run_train(tr_cfg);
    }
    if (ev->parsed()) return run_eval(ev_ckpt, ev_data, ev_baseline, ev_out, ev_batch);
    if (gc->parsed()) {
      gc_cfg.variant = variant_from_string(gc_variant);
      return run_gradcheck(gc_cfg, gc_bound);
    }
    if (vp->parsed())
      return run_verify_prop(vp_trials, vp_max_support, vp_seed, vp_tol, vp_ndjson);
  } catch (const Error& e) {
    nlohmann::json err = {
        {"error", {{"category", e.category_name()}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    nlohmann::json err = {{"error", {{"category", "internal"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
