#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtask/common.hpp"
#include "xtask/losses.hpp"  // kVoidClass
#include "xtask/tensor.hpp"
#include "xtask/tensor_io.hpp"

namespace xtask {

enum class DepthMode { raw, inverse_disparity };

inline const char* to_string(DepthMode m) {
  return m == DepthMode::raw ? "raw" : "inverse_disparity";
}

inline DepthMode depth_mode_from_string(const std::string& s) {
  if (s == "raw") return DepthMode::raw;
  if (s == "inverse_disparity") return DepthMode::inverse_disparity;
  fail(ErrorCategory::config, "unknown depth mode '" + s + "'");
}

/// Paired RGB image, per-pixel class labels (255 = void), and per-pixel depth
/// (0 = invalid). All planes are spatially aligned.
struct SceneSample {
  Tensor<float> image;  // (3,H,W) in [0,1]
  Tensor<float> seg;    // (H,W) class ids
  Tensor<float> depth;  // (H,W)
};

struct GenConfig {
  int64_t H = 32, W = 64;
  int64_t C = 7;
  int64_t min_shapes = 8, max_shapes = 16;
  DepthMode depth_mode = DepthMode::inverse_disparity;
  double noise_std = 0.10;
  uint64_t seed = 0;
  // Depth layout: foreground classes occupy distinct bands between min_depth
  // and fg_depth_max; the background sits farther with a vertical gradient.
  double min_depth = 2.0;
  double fg_depth_max = 8.0;
  double bg_depth = 10.0;
  double bg_depth_slope = 2.0;
  double depth_jitter = 0.4;
  // Per-shape albedo jitter decouples raw brightness from depth, so depth
  // must be read through shape identity rather than shading alone.
  double albedo_jitter = 0.25;
  double invalid_frac = 0.02;
  double void_frac = 0.02;

  void validate() const {
    check(H >= 8 && W >= 8 && H % 8 == 0 && W % 8 == 0, ErrorCategory::config,
          "generator H and W must be multiples of 8");
    check(C >= 2 && C <= 200, ErrorCategory::config, "generator needs 2 <= C <= 200");
    check(min_shapes >= 0 && max_shapes >= min_shapes, ErrorCategory::config,
          "invalid shape-count range");
    check(min_depth > 0, ErrorCategory::config, "min_depth must be positive");
  }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"H", c.H}, {"W", c.W}, {"C", c.C},
       {"min_shapes", c.min_shapes}, {"max_shapes", c.max_shapes},
       {"depth_mode", to_string(c.depth_mode)}, {"noise_std", c.noise_std},
       {"seed", c.seed}, {"min_depth", c.min_depth}, {"fg_depth_max", c.fg_depth_max},
       {"bg_depth", c.bg_depth}, {"bg_depth_slope", c.bg_depth_slope},
       {"depth_jitter", c.depth_jitter}, {"albedo_jitter", c.albedo_jitter},
       {"invalid_frac", c.invalid_frac},
       {"void_frac", c.void_frac}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  if (j.contains("H")) j.at("H").get_to(c.H);
  if (j.contains("W")) j.at("W").get_to(c.W);
  if (j.contains("C")) j.at("C").get_to(c.C);
  if (j.contains("min_shapes")) j.at("min_shapes").get_to(c.min_shapes);
  if (j.contains("max_shapes")) j.at("max_shapes").get_to(c.max_shapes);
  if (j.contains("depth_mode"))
    c.depth_mode = depth_mode_from_string(j.at("depth_mode").get<std::string>());
  if (j.contains("noise_std")) j.at("noise_std").get_to(c.noise_std);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("min_depth")) j.at("min_depth").get_to(c.min_depth);
  if (j.contains("fg_depth_max")) j.at("fg_depth_max").get_to(c.fg_depth_max);
  if (j.contains("bg_depth")) j.at("bg_depth").get_to(c.bg_depth);
  if (j.contains("bg_depth_slope")) j.at("bg_depth_slope").get_to(c.bg_depth_slope);
  if (j.contains("depth_jitter")) j.at("depth_jitter").get_to(c.depth_jitter);
  if (j.contains("albedo_jitter")) j.at("albedo_jitter").get_to(c.albedo_jitter);
  if (j.contains("invalid_frac")) j.at("invalid_frac").get_to(c.invalid_frac);
  if (j.contains("void_frac")) j.at("void_frac").get_to(c.void_frac);
}

/// Base depth band of a foreground class; pairwise distinct by construction.
inline double class_base_depth(const GenConfig& cfg, int64_t cls) {
  if (cfg.C == 2) return cfg.min_depth;
  double step = (cfg.fg_depth_max - cfg.min_depth) / static_cast<double>(cfg.C - 2);
  return cfg.min_depth + static_cast<double>(cls - 1) * step;
}

/// Fixed per-class base color (golden-angle hue wheel; class 0 a muted gray).
inline std::array<float, 3> class_color(int64_t cls) {
  if (cls == 0) return {0.45f, 0.5f, 0.55f};
  double h = std::fmod(0.137 + 0.618033988749895 * static_cast<double>(cls - 1), 1.0) * 6.0;
  double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = 1; g = x; break;
    case 1: r = x; g = 1; break;
    case 2: g = 1; b = x; break;
    case 3: g = x; b = 1; break;
    case 4: r = x; b = 1; break;
    default: r = 1; b = x; break;
  }
  return {static_cast<float>(0.25 + 0.75 * r), static_cast<float>(0.25 + 0.75 * g),
          static_cast<float>(0.25 + 0.75 * b)};
}

/// Layered scene: background at far depth with a vertical gradient, K shapes
/// with class-banded depths (near occludes far), image colored per class and
/// shaded by inverse depth, plus sparse invalid-depth and void-label pixels.
inline SceneSample generate_scene(const GenConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t H = cfg.H, W = cfg.W;
  std::vector<float> seg(static_cast<size_t>(H * W), 0.0f);
  std::vector<float> depth(static_cast<size_t>(H * W));
  for (int64_t y = 0; y < H; ++y) {
    float d = static_cast<float>(cfg.bg_depth +
                                 cfg.bg_depth_slope * (H > 1 ? double(y) / double(H - 1) : 0.0));
    for (int64_t x = 0; x < W; ++x) depth[y * W + x] = d;
  }

  struct Blob {
    int64_t cls;
    bool ellipse;
    double cy, cx, ry, rx, depth, albedo;
  };
  int64_t k = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  std::vector<Blob> blobs;
  for (int64_t i = 0; i < k; ++i) {
    Blob b;
    b.cls = cfg.C >= 3 ? rng.uniform_int(1, cfg.C - 1) : 1;
    b.ellipse = rng.uniform() < 0.5;
    b.cy = rng.uniform(0.0, double(H - 1));
    b.cx = rng.uniform(0.0, double(W - 1));
    b.ry = rng.uniform(double(H) / 10.0, double(H) / 4.0);
    b.rx = rng.uniform(double(W) / 12.0, double(W) / 4.0);
    b.depth = std::max(cfg.min_depth, class_base_depth(cfg, b.cls) +
                                          rng.uniform(-cfg.depth_jitter, cfg.depth_jitter));
    b.albedo = 1.0 + rng.uniform(-cfg.albedo_jitter, cfg.albedo_jitter);
    blobs.push_back(b);
  }
  // Far shapes first so nearer ones occlude them.
  std::sort(blobs.begin(), blobs.end(),
            [](const Blob& a, const Blob& b) { return a.depth > b.depth; });
  std::vector<float> albedo(static_cast<size_t>(H * W), 1.0f);
  for (const Blob& b : blobs) {
    int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(b.cy - b.ry)));
    int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(std::ceil(b.cy + b.ry)));
    int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(b.cx - b.rx)));
    int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(b.cx + b.rx)));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        if (b.ellipse) {
          double dy = (y - b.cy) / b.ry, dx = (x - b.cx) / b.rx;
          if (dy * dy + dx * dx > 1.0) continue;
        }
        seg[y * W + x] = static_cast<float>(b.cls);
        depth[y * W + x] = static_cast<float>(b.depth);
        albedo[y * W + x] = static_cast<float>(b.albedo);
      }
  }

  std::vector<float> image(static_cast<size_t>(3 * H * W));
  for (int64_t i = 0; i < H * W; ++i) {
    auto color = class_color(static_cast<int64_t>(seg[i]));
    double shade = (0.3 + 0.7 * (cfg.min_depth / depth[i])) * albedo[i];
    for (int64_t c = 0; c < 3; ++c) {
      double v = color[c] * shade + cfg.noise_std * rng.normal();
      image[c * H * W + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }

  // Sparse invalid-depth and void-label pixels; the occluded geometry above
  // is untouched so per-class depth statistics stay intact.
  for (int64_t i = 0; i < H * W; ++i)
    if (rng.uniform() < cfg.invalid_frac) depth[i] = 0.0f;
  for (int64_t i = 0; i < H * W; ++i)
    if (rng.uniform() < cfg.void_frac) seg[i] = static_cast<float>(kVoidClass);

  SceneSample s;
  s.image = Tensor<float>::from({3, H, W}, std::move(image));
  s.seg = Tensor<float>::from({H, W}, std::move(seg));
  s.depth = Tensor<float>::from({H, W}, std::move(depth));
  return s;
}

/// target = 1/depth on valid pixels; invalid (0) pixels stay 0 and stay
/// masked. Far surfaces map near 0, so targets are finite everywhere.
inline Tensor<float> to_inverse_disparity(const Tensor<float>& depth) {
  std::vector<float> out(depth.data().begin(), depth.data().end());
  for (auto& v : out) v = v > 0.0f ? 1.0f / v : 0.0f;
  Shape s = depth.shape();
  return Tensor<float>::from(std::move(s), std::move(out));
}

// ---- augmentation -------------------------------------------------------------

struct AugmentConfig {
  double hflip_prob = 0.5;
  std::vector<double> crop_scales = {1.0, 1.2, 1.5};
  std::array<double, 3> mean = {0.0, 0.0, 0.0};
  std::array<double, 3> stddev = {1.0, 1.0, 1.0};
  bool normalize = true;

  void validate() const {
    check(hflip_prob >= 0 && hflip_prob <= 1, ErrorCategory::config,
          "hflip_prob must lie in [0,1]");
    check(!crop_scales.empty(), ErrorCategory::config, "crop_scales must be nonempty");
    for (double s : crop_scales)
      check(s >= 1.0, ErrorCategory::config, "crop scales must be >= 1");
    for (double s : stddev)
      check(s > 0, ErrorCategory::config, "normalization std must be positive");
  }
};

namespace detail {

inline void hflip_plane(std::vector<float>& v, int64_t planes, int64_t H, int64_t W) {
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < H; ++y) {
      float* row = v.data() + (p * H + y) * W;
      std::reverse(row, row + W);
    }
}

inline float bilinear_at(const float* p, int64_t H, int64_t W, double sy, double sx) {
  sy = std::clamp(sy, 0.0, double(H - 1));
  sx = std::clamp(sx, 0.0, double(W - 1));
  int64_t y0 = static_cast<int64_t>(std::floor(sy)), x0 = static_cast<int64_t>(std::floor(sx));
  int64_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  double fy = sy - y0, fx = sx - x0;
  double v = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
             fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
  return static_cast<float>(v);
}

/// Bilinear over valid (nonzero) depth contributors only, renormalized; the
/// output pixel is invalid exactly when its nearest source pixel is invalid,
/// so augmentation never fabricates valid depth.
inline float depth_bilinear_at(const float* p, int64_t H, int64_t W, double sy, double sx) {
  double scy = std::clamp(sy, 0.0, double(H - 1));
  double scx = std::clamp(sx, 0.0, double(W - 1));
  int64_t ny = static_cast<int64_t>(std::lround(scy));
  int64_t nx = static_cast<int64_t>(std::lround(scx));
  if (p[ny * W + nx] <= 0.0f) return 0.0f;
  int64_t y0 = static_cast<int64_t>(std::floor(scy)), x0 = static_cast<int64_t>(std::floor(scx));
  int64_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  double fy = scy - y0, fx = scx - x0;
  const double w[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
  const int64_t idx[4] = {y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1};
  double acc = 0, wsum = 0;
  for (int i = 0; i < 4; ++i) {
    if (p[idx[i]] > 0.0f) {
      acc += w[i] * p[idx[i]];
      wsum += w[i];
    }
  }
  return wsum > 0 ? static_cast<float>(acc / wsum) : 0.0f;
}

inline float nearest_at(const float* p, int64_t H, int64_t W, double sy, double sx) {
  int64_t y = std::clamp<int64_t>(static_cast<int64_t>(std::lround(sy)), 0, H - 1);
  int64_t x = std::clamp<int64_t>(static_cast<int64_t>(std::lround(sx)), 0, W - 1);
  return p[y * W + x];
}

}  // namespace detail

/// Joint flip + scaled crop + image normalization. The same index map is
/// applied to image, labels, and depth; labels resample nearest so no classes
/// are invented, depth resamples valid-aware bilinear.
inline SceneSample augment(const SceneSample& sample, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t H = sample.seg.dim(0), W = sample.seg.dim(1);
  std::vector<float> img(sample.image.data().begin(), sample.image.data().end());
  std::vector<float> seg(sample.seg.data().begin(), sample.seg.data().end());
  std::vector<float> dep(sample.depth.data().begin(), sample.depth.data().end());

  if (rng.uniform() < cfg.hflip_prob) {
    detail::hflip_plane(img, 3, H, W);
    detail::hflip_plane(seg, 1, H, W);
    detail::hflip_plane(dep, 1, H, W);
  }

  double s = cfg.crop_scales[static_cast<size_t>(
      rng.uniform_int(0, static_cast<int64_t>(cfg.crop_scales.size()) - 1))];
  if (s > 1.0) {
    int64_t Hs = static_cast<int64_t>(std::lround(H * s));
    int64_t Ws = static_cast<int64_t>(std::lround(W * s));
    int64_t oy = rng.uniform_int(0, Hs - H);
    int64_t ox = rng.uniform_int(0, Ws - W);
    std::vector<float> img2(img.size()), seg2(seg.size()), dep2(dep.size());
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        // One shared index map: output pixel -> source coordinates.
        double sy = (y + oy + 0.5) / s - 0.5;
        double sx = (x + ox + 0.5) / s - 0.5;
        for (int64_t c = 0; c < 3; ++c)
          img2[(c * H + y) * W + x] =
              detail::bilinear_at(img.data() + c * H * W, H, W, sy, sx);
        seg2[y * W + x] = detail::nearest_at(seg.data(), H, W, sy, sx);
        dep2[y * W + x] = detail::depth_bilinear_at(dep.data(), H, W, sy, sx);
      }
    img = std::move(img2);
    seg = std::move(seg2);
    dep = std::move(dep2);
  }

  if (cfg.normalize) {
    for (int64_t c = 0; c < 3; ++c) {
      float m = static_cast<float>(cfg.mean[c]);
      float inv = static_cast<float>(1.0 / cfg.stddev[c]);
      float* p = img.data() + c * H * W;
      for (int64_t i = 0; i < H * W; ++i) p[i] = (p[i] - m) * inv;
    }
  }

  SceneSample out;
  out.image = Tensor<float>::from({3, H, W}, std::move(img));
  out.seg = Tensor<float>::from({H, W}, std::move(seg));
  out.depth = Tensor<float>::from({H, W}, std::move(dep));
  return out;
}

// ---- on-disk dataset -----------------------------------------------------------

struct DatasetMeta {
  int64_t count = 0;
  int64_t H = 0, W = 0, C = 0;
  DepthMode depth_mode = DepthMode::inverse_disparity;
  uint64_t seed = 0;
  std::array<double, 3> mean = {0, 0, 0};
  std::array<double, 3> stddev = {1, 1, 1};
  GenConfig gen;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SceneSample> samples;
};

/// Samples are pure functions of (config, seed, index), so generation order
/// or parallelism cannot change the data.
inline std::vector<SceneSample> generate_dataset(const GenConfig& cfg, int64_t n) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0xb5297a4d3a2d9fefULL * (uint64_t(i) + 1));
    SceneSample s = generate_scene(cfg, rng);
    if (cfg.depth_mode == DepthMode::inverse_disparity) s.depth = to_inverse_disparity(s.depth);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::array<std::array<double, 3>, 2> channel_stats(const std::vector<SceneSample>& ss) {
  std::array<double, 3> mean{}, var{};
  int64_t n = 0;
  for (const auto& s : ss) {
    int64_t hw = s.seg.numel();
    auto v = s.image.data();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < hw; ++i) mean[c] += v[c * hw + i];
    n += hw;
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& s : ss) {
    int64_t hw = s.seg.numel();
    auto v = s.image.data();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < hw; ++i) {
        double d = v[c * hw + i] - mean[c];
        var[c] += d * d;
      }
  }
  std::array<double, 3> stddev;
  for (int64_t c = 0; c < 3; ++c) stddev[c] = std::max(std::sqrt(var[c] / n), 1e-8);
  return {mean, stddev};
}

inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<SceneSample>& samples, const GenConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  check(!ec, ErrorCategory::io, "cannot create dataset directory " + dir.string());
  auto stats = channel_stats(samples);
  nlohmann::json manifest;
  manifest["count"] = samples.size();
  manifest["H"] = cfg.H;
  manifest["W"] = cfg.W;
  manifest["C"] = cfg.C;
  manifest["depth_mode"] = to_string(cfg.depth_mode);
  manifest["seed"] = cfg.seed;
  manifest["stats"] = {{"mean", stats[0]}, {"std", stats[1]}};
  manifest["gen"] = cfg;
  std::ofstream mf(dir / "manifest.json");
  check(mf.good(), ErrorCategory::io, "cannot write dataset manifest in " + dir.string());
  mf << manifest.dump(2) << '\n';
  for (size_t i = 0; i < samples.size(); ++i) {
    std::string idx = std::to_string(i);
    write_tensor_file<float>(dir / (idx + ".img"), samples[i].image);
    write_tensor_file<float>(dir / (idx + ".seg"), samples[i].seg);
    write_tensor_file<float>(dir / (idx + ".dep"), samples[i].depth);
  }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  check(mf.good(), ErrorCategory::io, "missing dataset manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
  check(!manifest.is_discarded(), ErrorCategory::data,
        "malformed dataset manifest: " + (dir / "manifest.json").string());
  for (const char* key : {"count", "H", "W", "C", "depth_mode"})
    check(manifest.contains(key), ErrorCategory::data,
          std::string("dataset manifest missing '") + key + "'");
  Dataset ds;
  ds.meta.count = manifest["count"].get<int64_t>();
  ds.meta.H = manifest["H"].get<int64_t>();
  ds.meta.W = manifest["W"].get<int64_t>();
  ds.meta.C = manifest["C"].get<int64_t>();
  ds.meta.depth_mode = depth_mode_from_string(manifest["depth_mode"].get<std::string>());
  ds.meta.seed = manifest.value("seed", uint64_t(0));
  if (manifest.contains("stats")) {
    manifest["stats"]["mean"].get_to(ds.meta.mean);
    manifest["stats"]["std"].get_to(ds.meta.stddev);
  }
  if (manifest.contains("gen")) ds.meta.gen = manifest["gen"].get<GenConfig>();
  Shape img_shape = {3, ds.meta.H, ds.meta.W};
  Shape plane_shape = {ds.meta.H, ds.meta.W};
  for (int64_t i = 0; i < ds.meta.count; ++i) {
    std::string idx = std::to_string(i);
    SceneSample s;
    s.image = read_tensor_as<float>(dir / (idx + ".img"));
    s.seg = read_tensor_as<float>(dir / (idx + ".seg"));
    s.depth = read_tensor_as<float>(dir / (idx + ".dep"));
    check(s.image.shape() == img_shape && s.seg.shape() == plane_shape &&
              s.depth.shape() == plane_shape,
          ErrorCategory::shape,
          "dataset sample " + idx + " does not match the manifest resolution");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace xtask
