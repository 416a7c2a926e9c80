#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"
#include "xtask/losses.hpp"
#include "xtask/model.hpp"

using namespace xtask;
using xtask::testing::random_tensor;
using Catch::Approx;

namespace {

// Brute-force per-pixel oracles, written as plain scalar loops, independent
// of the tensor engine.

double oracle_seg_ce(std::span<const double> logits, std::span<const double> target,
                     int64_t N, int64_t C, int64_t H, int64_t W, int ignore) {
  double acc = 0;
  int64_t count = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        int cls = static_cast<int>(target[(n * H + h) * W + w]);
        if (cls == ignore) continue;
        double mx = -1e300;
        for (int64_t c = 0; c < C; ++c)
          mx = std::max(mx, logits[((n * C + c) * H + h) * W + w]);
        double denom = 0;
        for (int64_t c = 0; c < C; ++c)
          denom += std::exp(logits[((n * C + c) * H + h) * W + w] - mx);
        double p = std::exp(logits[((n * C + cls) * H + h) * W + w] - mx) / denom;
        acc += -std::log(std::max(p, 1e-12));
        ++count;
      }
  return acc / count;
}

double oracle_seg_xtc(std::span<const double> transferred, std::span<const double> direct,
                      int64_t N, int64_t C, int64_t H, int64_t W) {
  double acc = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        double mx_q = -1e300, mx_p = -1e300;
        for (int64_t c = 0; c < C; ++c) {
          mx_q = std::max(mx_q, direct[((n * C + c) * H + h) * W + w]);
          mx_p = std::max(mx_p, transferred[((n * C + c) * H + h) * W + w]);
        }
        double dq = 0, dp = 0;
        for (int64_t c = 0; c < C; ++c) {
          dq += std::exp(direct[((n * C + c) * H + h) * W + w] - mx_q);
          dp += std::exp(transferred[((n * C + c) * H + h) * W + w] - mx_p);
        }
        for (int64_t c = 0; c < C; ++c) {
          double q = std::exp(direct[((n * C + c) * H + h) * W + w] - mx_q) / dq;
          double p = std::exp(transferred[((n * C + c) * H + h) * W + w] - mx_p) / dp;
          acc += -q * std::log(std::max(p, 1e-12));
        }
      }
  return acc / (N * H * W);
}

double oracle_masked_l1(std::span<const double> pred, std::span<const double> target,
                        std::span<const double> mask) {
  double acc = 0, count = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] <= 0) continue;
    acc += std::abs(pred[i] - target[i]);
    count += 1;
  }
  return acc / count;
}

double oracle_all_pixel_l1(std::span<const double> a, std::span<const double> b) {
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

Tensor<double> random_targets(int64_t N, int64_t C, int64_t H, int64_t W, Rng& rng,
                              double void_frac = 0.2) {
  std::vector<double> t(static_cast<size_t>(N * H * W));
  for (auto& v : t)
    v = rng.uniform() < void_frac ? kVoidClass : static_cast<double>(rng.uniform_int(0, C - 1));
  return Tensor<double>::from({N, H, W}, std::move(t));
}

}  // namespace

TEST_CASE("seg cross entropy basics") {
  // logits hugely favoring the true class -> tiny loss
  int64_t N = 1, C = 3, H = 2, W = 2;
  std::vector<double> logits(static_cast<size_t>(N * C * H * W), 0.0);
  std::vector<double> target = {0, 1, 2, 1};
  for (int64_t i = 0; i < H * W; ++i)
    logits[static_cast<size_t>(target[i]) * H * W + i] = 50.0;
  auto loss = seg_cross_entropy(Tensor<double>::from({N, C, H, W}, logits),
                                Tensor<double>::from({N, H, W}, target));
  CHECK(loss.item() < 1e-3);

  // uniform logits, C=7 -> ln 7
  auto u = Tensor<double>::zeros({1, 7, 4, 4});
  auto t = Tensor<double>::zeros({1, 4, 4});
  CHECK(seg_cross_entropy(u, t).item() == Approx(std::log(7.0)).margin(1e-6));
  CHECK(seg_cross_entropy(u, t).item() == Approx(1.945910).margin(1e-6));

  // all pixels ignored -> empty-mask error
  auto ig = Tensor<double>::full({1, 4, 4}, kVoidClass);
  CHECK_THROWS_AS(seg_cross_entropy(u, ig), Error);
}

TEST_CASE("seg cross entropy matches the per-pixel oracle") {
  Rng rng(101);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t N = 2, C = 5, H = 3, W = 4;
    auto logits = random_tensor<double>({N, C, H, W}, rng, false, -3, 3);
    auto target = random_targets(N, C, H, W, rng);
    double got = seg_cross_entropy(logits, target).item();
    double want = oracle_seg_ce(logits.data(), target.data(), N, C, H, W, kVoidClass);
    CHECK(got == Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("seg consistency equals entropy when transferred == direct") {
  Rng rng(102);
  int64_t N = 1, C = 4, H = 2, W = 2;
  auto logits = random_tensor<double>({N, C, H, W}, rng, false, -2, 2);
  double loss = seg_consistency(logits, logits).item();
  // mean entropy of the softmax distribution
  double ent = 0;
  for (int64_t i = 0; i < H * W; ++i) {
    double mx = -1e300, d = 0;
    for (int64_t c = 0; c < C; ++c) mx = std::max(mx, logits.data()[c * H * W + i]);
    for (int64_t c = 0; c < C; ++c) d += std::exp(logits.data()[c * H * W + i] - mx);
    for (int64_t c = 0; c < C; ++c) {
      double p = std::exp(logits.data()[c * H * W + i] - mx) / d;
      ent += -p * std::log(p);
    }
  }
  CHECK(loss == Approx(ent / (N * H * W)).epsilon(1e-9));
}

TEST_CASE("seg consistency matches oracle and blocks the target branch") {
  Rng rng(103);
  for (int rep = 0; rep < 20; ++rep) {
    auto tr = random_tensor<double>({2, 4, 3, 3}, rng, false, -3, 3);
    auto di = random_tensor<double>({2, 4, 3, 3}, rng, false, -3, 3);
    double got = seg_consistency(tr, di).item();
    CHECK(got == Approx(oracle_seg_xtc(tr.data(), di.data(), 2, 4, 3, 3)).epsilon(1e-6));
  }
  // gradient flows only through the transferred branch
  auto tr = random_tensor<double>({1, 3, 2, 2}, rng, true);
  auto di = random_tensor<double>({1, 3, 2, 2}, rng, true);
  seg_consistency(tr, di).backward();
  CHECK(tr.has_grad());
  CHECK_FALSE(di.has_grad());
}

TEST_CASE("depth l1 basics and oracle") {
  Rng rng(104);
  auto pred = random_tensor<double>({1, 1, 4, 4}, rng, false);
  auto full = Tensor<double>::ones({1, 1, 4, 4});
  CHECK(depth_l1(pred, pred, full).item() == 0.0);

  auto shifted = pred + 0.5;
  CHECK(depth_l1(shifted, pred, full).item() == Approx(0.5).epsilon(1e-9));

  for (int rep = 0; rep < 20; ++rep) {
    auto p = random_tensor<double>({2, 1, 3, 4}, rng, false);
    auto t = random_tensor<double>({2, 1, 3, 4}, rng, false);
    std::vector<double> m(24);
    for (auto& v : m) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    m[0] = 1.0;  // keep the mask nonempty
    auto mask = Tensor<double>::from({2, 1, 3, 4}, m);
    CHECK(depth_l1(p, t, mask).item() ==
          Approx(oracle_masked_l1(p.data(), t.data(), mask.data())).epsilon(1e-6));
  }
  CHECK_THROWS_AS(depth_l1(pred, pred, Tensor<double>::zeros({1, 1, 4, 4})), Error);
}

TEST_CASE("depth consistency matches oracle and detaches the direct branch") {
  Rng rng(105);
  auto a = random_tensor<double>({2, 1, 4, 4}, rng, false);
  CHECK(depth_consistency(a, a).item() == 0.0);
  for (int rep = 0; rep < 20; ++rep) {
    auto tr = random_tensor<double>({2, 1, 3, 4}, rng, false);
    auto di = random_tensor<double>({2, 1, 3, 4}, rng, false);
    CHECK(depth_consistency(tr, di).item() ==
          Approx(oracle_all_pixel_l1(tr.data(), di.data())).epsilon(1e-6));
  }
  auto tr = random_tensor<double>({1, 1, 2, 2}, rng, true);
  auto di = random_tensor<double>({1, 1, 2, 2}, rng, true);
  depth_consistency(tr, di).backward();
  CHECK(tr.has_grad());
  CHECK_FALSE(di.has_grad());
}

TEST_CASE("alignment losses hit the floor on perfect transfer and keep gradients") {
  Rng rng(106);
  int64_t N = 1, C = 3, H = 4, W = 4;
  std::vector<double> target(static_cast<size_t>(H * W));
  for (auto& v : target) v = rng.uniform_int(0, C - 1);
  std::vector<double> logits(static_cast<size_t>(C * H * W), 0.0);
  for (int64_t i = 0; i < H * W; ++i)
    logits[static_cast<size_t>(target[i]) * H * W + i] = 60.0;
  auto y_seg = Tensor<double>::from({N, H, W}, target);
  auto t_seg = Tensor<double>::from({N, C, H, W}, logits, true);
  auto y_dep = random_tensor<double>({N, 1, H, W}, rng, false, 0.1, 1.0);
  auto mask = Tensor<double>::ones({N, 1, H, W});
  auto [a_seg, a_dep] = align_losses(t_seg, y_seg, y_dep, y_dep, mask);
  CHECK(a_seg.item() < 1e-3);  // CE floor for hard labels
  CHECK(a_dep.item() == 0.0);

  // gradients flow through the transferred branch (no detach against gt)
  a_seg.backward();
  CHECK(t_seg.has_grad());
}

TEST_CASE("alignment losses match the direct-loss oracles") {
  Rng rng(107);
  for (int rep = 0; rep < 10; ++rep) {
    int64_t N = 2, C = 4, H = 3, W = 3;
    auto t_seg = random_tensor<double>({N, C, H, W}, rng, false, -2, 2);
    auto y_seg = random_targets(N, C, H, W, rng);
    auto t_dep = random_tensor<double>({N, 1, H, W}, rng, false);
    auto y_dep = random_tensor<double>({N, 1, H, W}, rng, false);
    std::vector<double> m(static_cast<size_t>(N * H * W));
    for (auto& v : m) v = rng.uniform() < 0.7 ? 1.0 : 0.0;
    m[0] = 1.0;
    auto mask = Tensor<double>::from({N, 1, H, W}, m);
    auto [a_seg, a_dep] = align_losses(t_seg, y_seg, t_dep, y_dep, mask);
    CHECK(a_seg.item() ==
          Approx(oracle_seg_ce(t_seg.data(), y_seg.data(), N, C, H, W, kVoidClass))
              .epsilon(1e-6));
    CHECK(a_dep.item() ==
          Approx(oracle_masked_l1(t_dep.data(), y_dep.data(), mask.data())).epsilon(1e-6));
  }
}

TEST_CASE("task loss endpoints and affine mixing") {
  auto d = Tensor<double>::from({1}, {2.0});
  auto c = Tensor<double>::from({1}, {1.0});
  CHECK(task_loss(d, c, 0.0).item() == 2.0);  // bit-exact endpoint
  CHECK(task_loss(d, c, 1.0).item() == 1.0);
  CHECK(task_loss(d, c, 0.01).item() == Approx(1.99).margin(1e-12));
  CHECK_THROWS_AS(task_loss(d, c, 1.5), Error);

  Rng rng(108);
  // affine in lambda: midpoint equals the mean of the endpoints
  double l0 = task_loss(d, c, 0.25).item();
  double l1 = task_loss(d, c, 0.75).item();
  double lm = task_loss(d, c, 0.5).item();
  CHECK(lm == Approx(0.5 * (l0 + l1)).margin(1e-12));
  (void)rng;
}

TEST_CASE("masking invariance: arbitrary values at masked pixels change nothing") {
  Rng rng(109);
  int64_t N = 2, C = 4, H = 4, W = 4;
  auto logits = random_tensor<double>({N, C, H, W}, rng, false, -2, 2);
  auto target = random_targets(N, C, H, W, rng, 0.3);
  double base_ce = seg_cross_entropy(logits, target).item();

  // perturb logits at void pixels
  auto logits2 = Tensor<double>::from(logits.shape(),
                                      std::vector<double>(logits.data().begin(),
                                                          logits.data().end()));
  auto tv = target.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H * W; ++i)
      if (static_cast<int>(tv[n * H * W + i]) == kVoidClass)
        for (int64_t c = 0; c < C; ++c)
          logits2.mutable_data()[((n * C + c) * H + i / W) * W + i % W] = rng.uniform(-50, 50);
  CHECK(seg_cross_entropy(logits2, target).item() == base_ce);  // exact in f64

  auto pred = random_tensor<double>({N, 1, H, W}, rng, false);
  auto dep_t = random_tensor<double>({N, 1, H, W}, rng, false, 0.2, 1.0);
  std::vector<double> m(static_cast<size_t>(N * H * W));
  for (auto& v : m) v = rng.uniform() < 0.6 ? 1.0 : 0.0;
  m[3] = 1.0;
  auto mask = Tensor<double>::from({N, 1, H, W}, m);
  double base_l1 = depth_l1(pred, dep_t, mask).item();
  auto dep_t2 = Tensor<double>::from(dep_t.shape(),
                                     std::vector<double>(dep_t.data().begin(),
                                                         dep_t.data().end()));
  for (int64_t i = 0; i < N * H * W; ++i)
    if (m[static_cast<size_t>(i)] == 0.0) dep_t2.mutable_data()[i] = rng.uniform(-100, 100);
  CHECK(depth_l1(pred, dep_t2, mask).item() == base_l1);
}

TEST_CASE("losses are nonnegative and zero iff operands agree on the mask") {
  Rng rng(110);
  for (int rep = 0; rep < 10; ++rep) {
    auto p = random_tensor<double>({1, 1, 4, 4}, rng, false);
    auto t = random_tensor<double>({1, 1, 4, 4}, rng, false);
    auto mask = Tensor<double>::ones({1, 1, 4, 4});
    double v = depth_l1(p, t, mask).item();
    CHECK(v >= 0.0);
    if (v == 0.0)
      for (int64_t i = 0; i < 16; ++i) CHECK(p.data()[i] == t.data()[i]);
  }
}

TEST_CASE("combine_total schemes") {
  auto L1 = Tensor<double>::from({1}, {1.0});
  auto L2 = Tensor<double>::from({1}, {2.0});
  auto eq = WeightingState<double>::make(Weighting::equal);
  auto r = combine_total(L1, L2, eq);
  CHECK(r.total == 3.0);
  CHECK(r.omega1 == 1.0);
  CHECK(r.omega2 == 1.0);
  CHECK(r.objective.item() == 3.0);

  auto un = WeightingState<double>::make(Weighting::uncertainty);
  auto ru = combine_total(L1, L2, un);
  CHECK(ru.objective.item() == 3.0);  // s=0 reduces to equal weighting exactly
  CHECK(ru.total == 3.0);

  // uncertainty objective differentiates through s
  auto ru2 = combine_total(L1, L2, un);
  ru2.objective.backward();
  CHECK(un.s1.has_grad());
  // d/ds1 [exp(-s1) L1 + s1] at s1=0 is 1 - L1
  CHECK(un.s1.grad()[0] == Approx(1.0 - 1.0).margin(1e-12));
  CHECK(un.s2.grad()[0] == Approx(1.0 - 2.0).margin(1e-12));

  auto gn = WeightingState<double>::make(Weighting::gradnorm);
  gn.w1 = 1.5;
  gn.w2 = 0.5;
  auto rg = combine_total(L1, L2, gn);
  CHECK(rg.total == Approx(1.5 * 1.0 + 0.5 * 2.0));
  CHECK(rg.objective.item() == Approx(rg.total));
}

TEST_CASE("gradnorm update fixed point, direction, and normalization") {
  // equal gradient norms and equal ratios: weights unchanged
  auto [w1, w2] = gradnorm_update(2.0, 2.0, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.5, 0.1);
  CHECK(w1 == 1.0);
  CHECK(w2 == 1.0);

  // the task with the larger gradient norm loses weight
  auto [v1, v2] = gradnorm_update(4.0, 1.0, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.5, 0.05);
  CHECK(v1 < v2);
  CHECK(v1 + v2 == 2.0);  // exact by construction
  CHECK(v1 > 0.0);

  Rng rng(111);
  double a = 1.0, b = 1.0;
  for (int i = 0; i < 200; ++i) {
    auto [na, nb] = gradnorm_update(rng.uniform(0.01, 5.0), rng.uniform(0.01, 5.0),
                                    1.0, 2.0, rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0),
                                    a, b, 1.5, 0.1);
    a = na;
    b = nb;
    CHECK(a > 0.0);
    CHECK(b > 0.0);
    CHECK(a + b == 2.0);
  }

  CHECK_THROWS_AS(gradnorm_update(1, 1, 0.0, 1.0, 1, 1, 1, 1, 1.5, 0.1), Error);
}

TEST_CASE("stop-gradient property on a composed model") {
  // backward of (l_2to1 + l_1to2) alone: zero on parameters reachable only
  // through detached targets, nonzero on both transfer nets and the encoder.
  ModelConfig cfg;
  cfg.variant = Variant::XTC;
  cfg.num_classes = 4;
  cfg.encoder_stages = {4, 8};
  cfg.decoder_channels = 8;
  cfg.ttnet_channels = {2, 4, 8};
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    XTaskNet<double> model(cfg, seed);
    Rng rng(seed + 100);
    auto x = xtask::testing::random_tensor<double>({2, 3, 16, 16}, rng, false);
    auto out = model.forward(x, true);
    auto c1 = seg_consistency(out.transferred_seg, out.seg);
    auto c2 = depth_consistency(out.transferred_depth, out.depth);
    model.zero_grads();
    (c1 + c2).backward();
    auto mag = [&](const std::string& grp) {
      double m = 0;
      for (auto& p : model.parameters())
        if (parameter_group(p.name) == grp && p.tensor.has_grad())
          for (double g : p.tensor.grad()) m = std::max(m, std::abs(g));
      return m;
    };
    CHECK(mag("F") > 0.0);
    CHECK(mag("G") > 0.0);
    CHECK(mag("encoder") > 0.0);
    CHECK(mag("dec1") > 0.0);  // reached through G's input path
    CHECK(mag("dec2") > 0.0);  // reached through F's input path

    // each consistency loss alone: the detached target's decoder stays at zero
    model.zero_grads();
    auto out2 = model.forward(x, true);
    seg_consistency(out2.transferred_seg, out2.seg).backward();
    CHECK(mag("dec1") == 0.0);
    CHECK(mag("G") == 0.0);
    CHECK(mag("dec2") > 0.0);
    model.zero_grads();
    auto out3 = model.forward(x, true);
    depth_consistency(out3.transferred_depth, out3.depth).backward();
    CHECK(mag("dec2") == 0.0);
    CHECK(mag("F") == 0.0);
    CHECK(mag("dec1") > 0.0);
  }
}
