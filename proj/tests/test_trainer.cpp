#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "xtask/gradcheck.hpp"
#include "xtask/trainer.hpp"

using namespace xtask;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("xtask_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void make_dataset(const fs::path& dir, int64_t n, uint64_t seed, int64_t H = 16,
                  int64_t W = 16, int64_t C = 4) {
  GenConfig cfg;
  cfg.H = H;
  cfg.W = W;
  cfg.C = C;
  cfg.seed = seed;
  cfg.min_shapes = 3;
  cfg.max_shapes = 6;
  write_dataset(dir, generate_dataset(cfg, n), cfg);
}

TrainConfig small_train_config(const fs::path& root, Variant v, uint64_t seed) {
  TrainConfig cfg;
  cfg.variant = v;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.lr_halve_every = 25;
  cfg.seed = seed;
  cfg.eval_every = 2;
  cfg.data_dir = (root / "train").string();
  cfg.eval_data_dir = (root / "eval").string();
  cfg.out_dir = (root / "run").string();
  cfg.model.num_classes = 4;
  cfg.model.encoder_stages = {4, 8};
  cfg.model.decoder_channels = 8;
  cfg.model.ttnet_channels = {2, 4, 8};
  return cfg;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("lr schedule") {
  CHECK(lr_schedule(0, 1e-4, 80) == 1e-4);
  CHECK(lr_schedule(80, 1e-4, 80) == 0.5e-4);
  CHECK(lr_schedule(161, 1e-4, 80) == 0.25e-4);
  int64_t k = 7;
  for (int64_t e = 0; e <= 5 * k; ++e) {
    double expected = 1e-3 * std::pow(0.5, static_cast<double>(e / k));
    CHECK(lr_schedule(e, 1e-3, k) == expected);
  }
  CHECK_THROWS_AS(lr_schedule(-1, 1e-4, 80), Error);
}

TEST_CASE("adam basics") {
  // zero gradient leaves parameters unchanged
  auto w = Tensor<double>::from({2}, {1.0, -2.0}, true);
  std::vector<NamedTensor<double>> params{{"w", w, true}};
  Adam<double> adam;
  sum(w * 0.0).backward();
  adam.step(params, 0.1);
  CHECK(w.data()[0] == 1.0);
  CHECK(w.data()[1] == -2.0);

  // constant positive gradient moves the parameter down
  auto v = Tensor<double>::from({1}, {0.5}, true);
  std::vector<NamedTensor<double>> params2{{"v", v, true}};
  Adam<double> adam2;
  for (int i = 0; i < 50; ++i) {
    v.zero_grad();
    sum(v * 3.0).backward();
    adam2.step(params2, 0.01);
  }
  CHECK(v.data()[0] < 0.5 - 0.2);

  // f(w) = w^2 from w=1 reaches |w| < 0.01 within 500 steps at lr = 0.1
  auto q = Tensor<double>::from({1}, {1.0}, true);
  std::vector<NamedTensor<double>> params3{{"q", q, true}};
  Adam<double> adam3;
  int steps = 0;
  for (; steps < 500 && std::abs(q.data()[0]) >= 0.01; ++steps) {
    q.zero_grad();
    sum(q * q).backward();
    adam3.step(params3, 0.1);
  }
  CHECK(std::abs(q.data()[0]) < 0.01);

  // NaN gradient aborts with a divergence error
  auto bad = Tensor<double>::from({1}, {1.0}, true);
  std::vector<NamedTensor<double>> params4{{"bad", bad, true}};
  sum(bad * 1.0).backward();  // allocate the grad buffer
  bad.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  Adam<double> adam4;
  CHECK_THROWS_AS(adam4.step(params4, 0.1), Error);
  try {
    bad.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
    adam4.step(params4, 0.1);
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::divergence);
  }
}

TEST_CASE("mt variant equals xtc variant at lambda zero, bit-exact") {
  Rng rng(3);
  ModelConfig mc;
  mc.num_classes = 4;
  mc.encoder_stages = {4, 8};
  mc.decoder_channels = 8;
  mc.ttnet_channels = {2, 4, 8};
  mc.variant = Variant::XTC;
  XTaskNet<double> xtc(mc, 7);
  mc.variant = Variant::MT;
  XTaskNet<double> mt(mc, 7);
  // same seed draws the shared prefix identically; verify then copy anyway
  {
    auto xp = xtc.named_tensors();
    auto mp = mt.named_tensors();
    for (auto& t : mp) {
      auto it = std::find_if(xp.begin(), xp.end(),
                             [&](auto& o) { return o.name == t.name; });
      REQUIRE(it != xp.end());
      auto src = it->tensor.data();
      auto dst = t.tensor.mutable_data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  GenConfig gen;
  gen.H = 16;
  gen.W = 16;
  gen.C = 4;
  gen.seed = 5;
  auto samples = generate_dataset(gen, 4);
  std::vector<int64_t> idx = {0, 1, 2, 3};
  Batch<double> batch = assemble_batch<double>(samples, idx);

  auto out_x = xtc.forward(batch.image, true);
  auto losses_x = compute_losses(out_x, batch, Variant::XTC, 0.0, 0.0);
  auto out_m = mt.forward(batch.image, true);
  auto losses_m = compute_losses(out_m, batch, Variant::MT, 0.0, 0.0);

  auto ws_x = WeightingState<double>::make(Weighting::uncertainty);
  auto ws_m = WeightingState<double>::make(Weighting::uncertainty);
  double total_x = combine_total(losses_x.L1, losses_x.L2, ws_x).objective.item();
  double total_m = combine_total(losses_m.L1, losses_m.L2, ws_m).objective.item();
  CHECK(total_x == total_m);  // bit-exact

  // uncertainty at s=0 equals equal weighting, bit-exact
  auto ws_eq = WeightingState<double>::make(Weighting::equal);
  CHECK(combine_total(losses_m.L1, losses_m.L2, ws_eq).objective.item() == total_m);

  // ALIGN at lambda=0 also reduces to the MT losses bit-exactly
  mc.variant = Variant::ALIGN;
  XTaskNet<double> align(mc, 7);
  {
    auto xp = xtc.named_tensors();
    for (auto& t : align.named_tensors()) {
      auto it = std::find_if(xp.begin(), xp.end(),
                             [&](auto& o) { return o.name == t.name; });
      REQUIRE(it != xp.end());
      auto src = it->tensor.data();
      auto dst = t.tensor.mutable_data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  auto out_a = align.forward(batch.image, true);
  auto losses_a = compute_losses(out_a, batch, Variant::ALIGN, 0.0, 0.0);
  CHECK(losses_a.L1.item() == losses_m.L1.item());
  CHECK(losses_a.L2.item() == losses_m.L2.item());
}

TEST_CASE("short training run end to end with logs and accounting") {
  fs::path root = scratch_dir("short");
  make_dataset(root / "train", 16, 100);
  make_dataset(root / "eval", 8, 200);
  TrainConfig cfg = small_train_config(root, Variant::XTC, 1);
  TrainResult res = train_run(cfg);
  CHECK(res.steps == 8);  // 16 samples / batch 4 * 2 epochs
  CHECK(fs::exists(res.final_checkpoint / "manifest.json"));
  CHECK(fs::exists(root / "run" / "run.json"));

  // loss accounting: total == omega1*L1 + omega2*L2 within 1e-6 relative,
  // and the logged lr matches the schedule exactly
  std::ifstream log(root / "run" / "losses.ndjson");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    double recomputed = j["omega1"].get<double>() * j["L1"].get<double>() +
                        j["omega2"].get<double>() * j["L2"].get<double>();
    CHECK(std::abs(j["total"].get<double>() - recomputed) <=
          1e-6 * std::max(1.0, std::abs(recomputed)));
    CHECK(j["lr"].get<double>() ==
          lr_schedule(j["epoch"].get<int64_t>(), cfg.lr, cfg.lr_halve_every));
    ++lines;
  }
  CHECK(lines == 8);

  std::ifstream mlog(root / "run" / "metrics.ndjson");
  int mlines = 0;
  while (std::getline(mlog, line)) ++mlines;
  CHECK(mlines == 1);  // eval_every = 2 over 2 epochs
  fs::remove_all(root);
}

TEST_CASE("training is bit-deterministic in f64") {
  fs::path root = scratch_dir("determinism");
  make_dataset(root / "train", 8, 300);
  make_dataset(root / "eval", 4, 400);
  TrainConfig cfg = small_train_config(root, Variant::XTC, 9);
  cfg.precision = "f64";
  cfg.epochs = 3;
  cfg.eval_every = 3;
  cfg.out_dir = (root / "run_a").string();
  train_run(cfg);
  cfg.out_dir = (root / "run_b").string();
  train_run(cfg);

  // identical (config, seed, dataset) -> identical checkpoint bytes
  for (auto& entry : fs::directory_iterator(root / "run_a" / "final")) {
    fs::path other = root / "run_b" / "final" / entry.path().filename();
    REQUIRE(fs::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
  }
  fs::remove_all(root);
}

TEST_CASE("checkpoint save/load evaluates identically") {
  fs::path root = scratch_dir("roundtrip");
  make_dataset(root / "train", 8, 500);
  make_dataset(root / "eval", 4, 600);
  TrainConfig cfg = small_train_config(root, Variant::MT, 17);
  TrainResult res = train_run(cfg);

  Dataset eval_ds = read_dataset(cfg.eval_data_dir);
  auto [model, step] = load_checkpoint<float>(res.final_checkpoint);
  MetricsReport a = evaluate_model(model, eval_ds, 4);
  MetricsReport b = evaluate_model(model, eval_ds, 4);
  CHECK(a.miou == b.miou);  // evaluation is deterministic
  CHECK(a.abs_err == b.abs_err);
  CHECK(a.miou == Approx(res.final_eval.miou).margin(0));
  CHECK(a.abs_err == Approx(res.final_eval.abs_err).margin(0));

  // delta_m of a report against itself is zero
  CHECK(delta_m(a, a) == 0.0);
  fs::remove_all(root);
}

TEST_CASE("randomly initialized model scores near chance pixel accuracy") {
  fs::path root = scratch_dir("chance");
  GenConfig gen;
  gen.H = 32;
  gen.W = 64;
  gen.C = 7;
  gen.seed = 777;
  gen.min_shapes = 10;
  gen.max_shapes = 16;  // dense scenes keep class areas roughly balanced
  fs::path ddir = root / "data";
  write_dataset(ddir, generate_dataset(gen, 24), gen);
  Dataset ds = read_dataset(ddir);

  double acc_sum = 0;
  for (uint64_t seed : {1, 2, 3}) {
    ModelConfig mc;  // desk defaults, C=7
    mc.variant = Variant::MT;
    XTaskNet<float> model(mc, seed);
    MetricsReport r = evaluate_model(model, ds, 8);
    acc_sum += r.pix_acc;
  }
  double mean_acc = acc_sum / 3.0;
  CHECK(mean_acc > 1.0 / 7.0 - 0.1);
  CHECK(mean_acc < 1.0 / 7.0 + 0.1);
  fs::remove_all(root);
}

TEST_CASE("align variant trains end to end") {
  fs::path root = scratch_dir("align");
  make_dataset(root / "train", 8, 2100);
  make_dataset(root / "eval", 4, 2200);
  TrainConfig cfg = small_train_config(root, Variant::ALIGN, 31);
  TrainResult res = train_run(cfg);
  CHECK(res.steps == 4);
  CHECK(std::isfinite(res.final_eval.miou));
  std::ifstream log(root / "run" / "losses.ndjson");
  std::string line;
  REQUIRE(std::getline(log, line));
  auto j = nlohmann::json::parse(line);
  CHECK(j["ell_2to1"].get<double>() > 0.0);  // alignment terms logged as cross terms
  CHECK(j["ell_1to2"].get<double>() > 0.0);
  fs::remove_all(root);
}

TEST_CASE("gradnorm training keeps weights positive and normalized") {
  fs::path root = scratch_dir("gradnorm");
  make_dataset(root / "train", 8, 800);
  make_dataset(root / "eval", 4, 900);
  TrainConfig cfg = small_train_config(root, Variant::XTC, 21);
  cfg.weighting = Weighting::gradnorm;
  TrainResult res = train_run(cfg);
  std::ifstream log(root / "run" / "losses.ndjson");
  std::string line;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    double w1 = j["omega1"].get<double>(), w2 = j["omega2"].get<double>();
    CHECK(w1 > 0.0);
    CHECK(w2 > 0.0);
    CHECK(w1 + w2 == Approx(2.0).margin(1e-12));
  }
  (void)res;
  fs::remove_all(root);
}

TEST_CASE("twenty-epoch run decreases the smoothed training loss") {
  fs::path root = scratch_dir("smoke20");
  GenConfig gen;
  gen.H = 32;
  gen.W = 64;
  gen.C = 7;
  gen.seed = 1234;
  write_dataset(root / "train", generate_dataset(gen, 64), gen);
  gen.seed = 4321;
  write_dataset(root / "eval", generate_dataset(gen, 8), gen);

  TrainConfig cfg;
  cfg.variant = Variant::XTC;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.eval_every = 20;
  cfg.seed = 5;
  cfg.data_dir = (root / "train").string();
  cfg.eval_data_dir = (root / "eval").string();
  cfg.out_dir = (root / "run").string();
  cfg.model.num_classes = 7;
  cfg.model.encoder_stages = {8, 16};
  cfg.model.decoder_channels = 16;
  cfg.model.ttnet_channels = {4, 8, 16};
  TrainResult res = train_run(cfg);
  REQUIRE(res.epoch_mean_total.size() == 20);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += res.epoch_mean_total[i];
    last += res.epoch_mean_total[15 + i];
  }
  CHECK(last / 5.0 < first / 5.0);
  fs::remove_all(root);
}

TEST_CASE("gradcheck on the tiny xtc model") {
  GradCheckConfig cfg;
  GradCheckReport rep = gradcheck(cfg);
  INFO(rep.detach_note);
  for (auto& [group, err] : rep.group_max_rel_err) {
    INFO(group << " " << err);
    CHECK(err < 1e-4);
  }
  CHECK(rep.max_rel_err < 1e-4);
  CHECK(rep.detach_contract_ok);
}

TEST_CASE("align variant reaches both decoders through the transfer nets") {
  ModelConfig mc;
  mc.num_classes = 4;
  mc.encoder_stages = {4, 8};
  mc.decoder_channels = 8;
  mc.ttnet_channels = {2, 4, 8};
  mc.variant = Variant::ALIGN;
  XTaskNet<double> model(mc, 33);
  GenConfig gen;
  gen.H = 16;
  gen.W = 16;
  gen.C = 4;
  gen.seed = 44;
  auto samples = generate_dataset(gen, 2);
  std::vector<int64_t> idx = {0, 1};
  Batch<double> batch = assemble_batch<double>(samples, idx);
  auto out = model.forward(batch.image, true);
  auto [a_seg, a_dep] = align_losses(out.transferred_seg, batch.seg_target,
                                     out.transferred_depth, batch.depth_target,
                                     batch.depth_mask);
  model.zero_grads();
  (a_seg + a_dep).backward();
  auto mag = [&](const std::string& grp) {
    double m = 0;
    for (auto& p : model.parameters())
      if (parameter_group(p.name) == grp && p.tensor.has_grad())
        for (double g : p.tensor.grad()) m = std::max(m, std::abs(g));
    return m;
  };
  // gradients flow through the transfer nets into both direct branches
  CHECK(mag("F") > 0.0);
  CHECK(mag("G") > 0.0);
  CHECK(mag("dec1") > 0.0);
  CHECK(mag("dec2") > 0.0);
  CHECK(mag("encoder") > 0.0);
}

TEST_CASE("config validation and shape mismatch errors") {
  fs::path root = scratch_dir("badcfg");
  make_dataset(root / "train", 8, 1000);
  make_dataset(root / "eval", 4, 1100);
  TrainConfig cfg = small_train_config(root, Variant::XTC, 1);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train_run(cfg), Error);
  cfg = small_train_config(root, Variant::XTC, 1);
  cfg.lr = 0;
  CHECK_THROWS_AS(train_run(cfg), Error);
  cfg = small_train_config(root, Variant::XTC, 1);
  cfg.model.num_classes = 9;  // dataset has 4
  CHECK_THROWS_AS(train_run(cfg), Error);
  fs::remove_all(root);
}
