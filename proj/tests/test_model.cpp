#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "support.hpp"
#include "xtask/model.hpp"

using namespace xtask;
using xtask::testing::grad_check;
using xtask::testing::random_tensor;
using Catch::Approx;

namespace {

ModelConfig desk_config(Variant v = Variant::XTC) {
  ModelConfig c;
  c.variant = v;
  return c;  // defaults: stages {16,32,64}, decoder 32, ttnet {16,32,64}, C=7
}

ModelConfig tiny_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.num_classes = 4;
  c.encoder_stages = {4, 8};
  c.decoder_channels = 8;
  c.ttnet_channels = {2, 4, 8};
  return c;
}

}  // namespace

TEST_CASE("encoder stage resolutions") {
  Rng rng(1);
  ModelConfig cfg = desk_config();
  Encoder<float> enc(cfg, rng);
  auto x = random_tensor<float>({1, 3, 32, 64}, rng, false);
  auto feats = enc.forward(x, /*train=*/false);
  REQUIRE(feats.size() == 3);
  CHECK(feats[0].shape() == Shape{1, 16, 32, 64});
  CHECK(feats[1].shape() == Shape{1, 32, 16, 32});
  CHECK(feats[2].shape() == Shape{1, 64, 8, 16});
}

TEST_CASE("residual block with zero second conv is identity plus relu") {
  Rng rng(2);
  ResidualBlock<double> block(6, 6, 1, rng);
  std::fill(block.conv2.weight.mutable_data().begin(),
            block.conv2.weight.mutable_data().end(), 0.0);
  auto x = random_tensor<double>({2, 6, 4, 4}, rng, false, -1.0, 1.0);
  auto y = block.forward(x, /*train=*/true);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == Approx(std::max(x.data()[i], 0.0)).margin(1e-12));
}

TEST_CASE("parameter count matches a closed-form oracle") {
  Rng rng(3);
  ModelConfig cfg = tiny_config(Variant::XTC);
  XTaskNet<double> model(cfg, 3);

  auto conv_p = [](int64_t cin, int64_t cout, int64_t k, bool bias) {
    return cout * cin * k * k + (bias ? cout : 0);
  };
  auto bn_p = [](int64_t c) { return 2 * c; };
  int64_t s0 = 4, s1 = 8, D = 8, C = 4;
  // encoder: stem + stage0 (no proj) + stage1 (strided, projected)
  int64_t encoder = conv_p(3, s0, 3, false) + bn_p(s0);
  encoder += conv_p(s0, s0, 3, false) + bn_p(s0) + conv_p(s0, s0, 3, false) + bn_p(s0);
  encoder += conv_p(s0, s1, 3, false) + bn_p(s1) + conv_p(s1, s1, 3, false) + bn_p(s1) +
             conv_p(s0, s1, 1, false) + bn_p(s1);
  // decoder: one block (deepest, no skip concat) + 1x1 head
  auto decoder = [&](int64_t out_ch) {
    int64_t p = conv_p(s1, D, 3, false) + bn_p(D);
    p += 2 * (conv_p(D, D, 3, false) + bn_p(D));
    p += conv_p(D, out_ch, 1, true);
    return p;
  };
  // ttnet channels {2,4,8}; deepest expansive block has no skip concat
  auto ttnet = [&](int64_t in_ch, int64_t out_ch) {
    int64_t c0 = 2, c1 = 4, c2 = 8;
    int64_t p = conv_p(in_ch, c0, 3, true) + conv_p(c0, c0, 3, true);
    p += conv_p(c0, c1, 3, true) + conv_p(c1, c1, 3, true);
    p += conv_p(c1, c2, 3, true) + conv_p(c2, c2, 3, true);
    p += conv_p(c2, c2, 3, true) + conv_p(c2, c2, 3, true);
    p += conv_p(c2 + c2, c1, 3, true) + conv_p(c1, c1, 3, true);
    p += conv_p(c1 + c1, c0, 3, true) + conv_p(c0, c0, 3, true);
    p += conv_p(c0, out_ch, 1, true);
    return p;
  };
  int64_t expected = encoder + decoder(C) + decoder(1) + ttnet(1, C) + ttnet(C, 1);
  CHECK(model.parameter_count() == expected);
}

TEST_CASE("parameter names are unique and grouped") {
  ModelConfig cfg = tiny_config(Variant::XTC);
  XTaskNet<float> model(cfg, 5);
  std::set<std::string> names;
  std::set<std::string> groups;
  for (auto& t : model.named_tensors()) {
    CHECK(names.insert(t.name).second);
    groups.insert(parameter_group(t.name));
  }
  CHECK(groups == std::set<std::string>{"encoder", "dec1", "dec2", "F", "G"});

  XTaskNet<float> st(tiny_config(Variant::ST), 5);
  std::set<std::string> st_groups;
  for (auto& t : st.named_tensors()) st_groups.insert(parameter_group(t.name));
  CHECK(st_groups == std::set<std::string>{"encoder", "encoder2", "dec1", "dec2"});
}

TEST_CASE("decoder heads and batch handling") {
  Rng rng(4);
  ModelConfig cfg = tiny_config(Variant::MT);
  XTaskNet<float> model(cfg, 7);
  for (int64_t n : {1, 2, 5}) {
    auto x = random_tensor<float>({n, 3, 16, 16}, rng, false);
    auto out = model.forward(x, /*train=*/false);
    CHECK(out.seg.shape() == Shape{n, cfg.num_classes, 16, 16});
    CHECK(out.depth.shape() == Shape{n, 1, 16, 16});
    CHECK_FALSE(out.transferred_seg.defined());
    CHECK_FALSE(out.transferred_depth.defined());
  }
}

TEST_CASE("xtc forward output shapes at desk config") {
  Rng rng(5);
  XTaskNet<float> model(desk_config(Variant::XTC), 11);
  auto x = random_tensor<float>({2, 3, 32, 64}, rng, false);
  auto out = model.forward(x, /*train=*/false);
  CHECK(out.seg.shape() == Shape{2, 7, 32, 64});
  CHECK(out.depth.shape() == Shape{2, 1, 32, 64});
  CHECK(out.transferred_seg.shape() == Shape{2, 7, 32, 64});
  CHECK(out.transferred_depth.shape() == Shape{2, 1, 32, 64});
}

TEST_CASE("forward is deterministic and side-effect free in eval mode") {
  Rng rng(6);
  XTaskNet<float> model(tiny_config(Variant::XTC), 13);
  auto x = random_tensor<float>({2, 3, 16, 16}, rng, false);
  // capture running stats
  std::vector<float> stats_before;
  for (auto& t : model.named_tensors())
    if (!t.trainable)
      stats_before.insert(stats_before.end(), t.tensor.data().begin(), t.tensor.data().end());
  auto a = model.forward(x, false);
  auto b = model.forward(x, false);
  REQUIRE(a.seg.numel() == b.seg.numel());
  for (int64_t i = 0; i < a.seg.numel(); ++i) CHECK(a.seg.data()[i] == b.seg.data()[i]);
  for (int64_t i = 0; i < a.transferred_depth.numel(); ++i)
    CHECK(a.transferred_depth.data()[i] == b.transferred_depth.data()[i]);
  std::vector<float> stats_after;
  for (auto& t : model.named_tensors())
    if (!t.trainable)
      stats_after.insert(stats_after.end(), t.tensor.data().begin(), t.tensor.data().end());
  CHECK(stats_before == stats_after);
}

TEST_CASE("input resolution constraints are enforced") {
  XTaskNet<float> model(tiny_config(Variant::XTC), 17);
  CHECK_THROWS_AS(model.forward(Tensor<float>::ones({1, 3, 12, 12}), false), Error);

  // skip whose resolution disagrees with the upsampled features
  Rng rng(1);
  ModelConfig cfg = tiny_config(Variant::MT);
  cfg.encoder_stages = {4, 6, 8};  // two downsamplings -> block 1 concats
  Decoder<float> dec(cfg, 2, rng);
  std::vector<Tensor<float>> feats = {Tensor<float>::ones({1, 4, 16, 16}),
                                      Tensor<float>::ones({1, 6, 16, 16}),  // should be 8x8
                                      Tensor<float>::ones({1, 8, 4, 4})};
  CHECK_THROWS_AS(dec.forward(feats, false), Error);
}

TEST_CASE("loss on one decoder leaves the others untouched") {
  Rng rng(7);
  XTaskNet<double> model(tiny_config(Variant::XTC), 19);
  auto params = model.parameters();
  auto x = random_tensor<double>({2, 3, 16, 16}, rng, false);
  auto out = model.forward(x, /*train=*/true);
  model.zero_grads();
  sum(out.seg * out.seg).backward();
  double dec1_mag = 0, enc_mag = 0;
  for (auto& p : params) {
    std::string g = parameter_group(p.name);
    double mx = 0;
    if (p.tensor.has_grad())
      for (double v : p.tensor.grad()) mx = std::max(mx, std::abs(v));
    if (g == "dec2" || g == "F" || g == "G") {
      CHECK(mx == 0.0);
    } else if (g == "dec1") {
      dec1_mag = std::max(dec1_mag, mx);
    } else if (g == "encoder") {
      enc_mag = std::max(enc_mag, mx);
    }
  }
  CHECK(dec1_mag > 0.0);
  CHECK(enc_mag > 0.0);
}

TEST_CASE("st variant trains two disjoint parameter sets") {
  Rng rng(8);
  XTaskNet<double> model(tiny_config(Variant::ST), 23);
  auto params = model.parameters();
  auto x = random_tensor<double>({2, 3, 16, 16}, rng, false);
  auto out = model.forward(x, /*train=*/true);
  model.zero_grads();
  sum(abs(out.depth)).backward();
  for (auto& p : params) {
    std::string g = parameter_group(p.name);
    double mx = 0;
    if (p.tensor.has_grad())
      for (double v : p.tensor.grad()) mx = std::max(mx, std::abs(v));
    if (g == "encoder" || g == "dec1") CHECK(mx == 0.0);
  }
}

TEST_CASE("ttnet shapes and gradient check on 16x16") {
  Rng rng(9);
  TTNet<double> tt(2, 1, {2, 3, 5}, rng);
  auto x = random_tensor<double>({1, 2, 16, 16}, rng);
  auto y = tt.forward(x);
  REQUIRE(y.shape() == Shape{1, 1, 16, 16});

  auto probe = random_tensor<double>({1, 1, 16, 16}, rng, false);
  auto f = [&] { return sum(tt.forward(x) * probe).item(); };
  std::vector<NamedTensor<double>> params;
  tt.collect("tt", params);
  sum(tt.forward(x) * probe).backward();
  CHECK(grad_check(x, f) < 1e-4);
  double worst = 0;
  for (auto& p : params) {
    auto fd = xtask::testing::finite_difference(p.tensor, f);
    worst = std::max(worst,
                     xtask::testing::max_rel_err(p.tensor.grad(), std::span<const double>(fd)));
  }
  CHECK(worst < 1e-4);

  CHECK_THROWS_AS(tt.forward(Tensor<double>::ones({1, 2, 12, 12})), Error);
}

TEST_CASE("checkpoint round trip preserves every tensor bit-exactly") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "xtask_ckpt_test";
  fs::remove_all(dir);
  XTaskNet<float> model(tiny_config(Variant::XTC), 29);
  // nonzero running stats so buffers are exercised too
  Rng rng(31);
  auto x = random_tensor<float>({2, 3, 16, 16}, rng, false);
  model.forward(x, /*train=*/true);
  save_checkpoint(dir, model, 42);

  auto [loaded, step] = load_checkpoint<float>(dir);
  CHECK(step == 42);
  auto a = model.named_tensors();
  auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].name == b[i].name);
    REQUIRE(a[i].tensor.shape() == b[i].tensor.shape());
    auto av = a[i].tensor.data();
    auto bv = b[i].tensor.data();
    for (size_t j = 0; j < av.size(); ++j) REQUIRE(av[j] == bv[j]);
  }
  // same eval output
  auto out1 = model.forward(x, false);
  auto out2 = loaded.forward(x, false);
  for (int64_t i = 0; i < out1.seg.numel(); ++i)
    REQUIRE(out1.seg.data()[i] == out2.seg.data()[i]);
  fs::remove_all(dir);
}

TEST_CASE("model config validation") {
  ModelConfig bad = tiny_config(Variant::XTC);
  bad.ttnet_channels = {4, 4, 8};
  CHECK_THROWS_AS(XTaskNet<float>(bad, 1), Error);
  ModelConfig bad2 = tiny_config(Variant::XTC);
  bad2.num_classes = 1;
  CHECK_THROWS_AS(XTaskNet<float>(bad2, 1), Error);
}
