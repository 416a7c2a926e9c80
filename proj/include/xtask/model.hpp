#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtask/nn_ops.hpp"
#include "xtask/tensor.hpp"
#include "xtask/tensor_io.hpp"

namespace xtask {

enum class Variant { ST, MT, ALIGN, XTC };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::ST: return "ST";
    case Variant::MT: return "MT";
    case Variant::ALIGN: return "ALIGN";
    case Variant::XTC: return "XTC";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "ST") return Variant::ST;
  if (s == "MT") return Variant::MT;
  if (s == "ALIGN") return Variant::ALIGN;
  if (s == "XTC") return Variant::XTC;
  fail(ErrorCategory::config, "unknown variant '" + s + "' (expected ST|MT|ALIGN|XTC)");
}

struct ModelConfig {
  int64_t in_channels = 3;
  int64_t num_classes = 7;
  std::vector<int64_t> encoder_stages = {16, 32, 64};
  int64_t decoder_channels = 32;
  std::vector<int64_t> ttnet_channels = {16, 32, 64};
  Variant variant = Variant::XTC;

  /// Number of 2x downsamplings in the encoder; the decoder mirrors it so the
  /// output resolution equals the input resolution.
  int64_t decoder_blocks() const {
    return static_cast<int64_t>(encoder_stages.size()) - 1;
  }

  void validate() const {
    check(in_channels >= 1, ErrorCategory::config, "in_channels must be >= 1");
    check(num_classes >= 2, ErrorCategory::config, "num_classes must be >= 2");
    check(!encoder_stages.empty(), ErrorCategory::config, "encoder_stages must be nonempty");
    for (int64_t c : encoder_stages)
      check(c >= 1, ErrorCategory::config, "encoder stage channels must be >= 1");
    check(decoder_channels >= 1, ErrorCategory::config, "decoder_channels must be >= 1");
    check(ttnet_channels.size() == 3, ErrorCategory::config,
          "ttnet_channels must list exactly 3 stages");
    for (size_t i = 1; i < ttnet_channels.size(); ++i)
      check(ttnet_channels[i] > ttnet_channels[i - 1], ErrorCategory::config,
            "ttnet_channels must be strictly increasing");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"num_classes", c.num_classes},
       {"encoder_stages", c.encoder_stages},
       {"decoder_channels", c.decoder_channels},
       {"ttnet_channels", c.ttnet_channels},
       {"variant", to_string(c.variant)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("encoder_stages")) j.at("encoder_stages").get_to(c.encoder_stages);
  if (j.contains("decoder_channels")) j.at("decoder_channels").get_to(c.decoder_channels);
  if (j.contains("ttnet_channels")) j.at("ttnet_channels").get_to(c.ttnet_channels);
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
}

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

// ---- layers ----------------------------------------------------------------

template <std::floating_point T>
struct Conv2d {
  Tensor<T> weight;  // (F, C, kh, kw)
  Tensor<T> bias;    // (F) or undefined
  int64_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride_, int64_t pad_,
         bool use_bias, Rng& rng) {
    stride = stride_;
    pad = pad_;
    int64_t fan_in = in_ch * k * k;
    T std_dev = std::sqrt(T(2) / static_cast<T>(fan_in));  // Kaiming fan-in
    std::vector<T> w(static_cast<size_t>(out_ch * fan_in));
    for (auto& v : w) v = static_cast<T>(rng.normal()) * std_dev;
    weight = Tensor<T>::from({out_ch, in_ch, k, k}, std::move(w), true);
    if (use_bias) {
      T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
      std::vector<T> b(static_cast<size_t>(out_ch));
      for (auto& v : b) v = static_cast<T>(rng.uniform(-bound, bound));
      bias = Tensor<T>::from({out_ch}, std::move(b), true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
  }
};

template <std::floating_point T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5), momentum = T(0.1);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t channels) {
    gamma = Tensor<T>::ones({channels}, true);
    beta = Tensor<T>::zeros({channels}, true);
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::ones({channels});
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, train, eps, momentum);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

// ---- encoder ---------------------------------------------------------------

/// Residual block: two 3x3 convs with BN, identity shortcut; a strided block
/// projects the shortcut with a 1x1 conv.
template <std::floating_point T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> proj;
  std::optional<BatchNorm2d<T>> proj_bn;

  ResidualBlock() = default;
  ResidualBlock(int64_t in_ch, int64_t out_ch, int64_t stride, Rng& rng)
      : conv1(in_ch, out_ch, 3, stride, 1, false, rng),
        conv2(out_ch, out_ch, 3, 1, 1, false, rng),
        bn1(out_ch),
        bn2(out_ch) {
    if (stride != 1 || in_ch != out_ch) {
      proj.emplace(in_ch, out_ch, 1, stride, 0, false, rng);
      proj_bn.emplace(out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> h = relu(bn1.forward(conv1.forward(x), train));
    h = bn2.forward(conv2.forward(h), train);
    Tensor<T> sc = proj ? proj_bn->forward(proj->forward(x), train) : x;
    return relu(h + sc);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
    if (proj) {
      proj->collect(prefix + ".proj", out);
      proj_bn->collect(prefix + ".proj_bn", out);
    }
  }
};

/// Residual stack: 3x3 stem at full resolution, then one residual block per
/// stage; every stage after the first downsamples by 2.
template <std::floating_point T>
struct Encoder {
  Conv2d<T> stem;
  BatchNorm2d<T> stem_bn;
  std::vector<ResidualBlock<T>> stages;

  Encoder() = default;
  Encoder(const ModelConfig& cfg, Rng& rng)
      : stem(cfg.in_channels, cfg.encoder_stages[0], 3, 1, 1, false, rng),
        stem_bn(cfg.encoder_stages[0]) {
    int64_t prev = cfg.encoder_stages[0];
    for (size_t i = 0; i < cfg.encoder_stages.size(); ++i) {
      int64_t ch = cfg.encoder_stages[i];
      stages.emplace_back(prev, ch, i == 0 ? 1 : 2, rng);
      prev = ch;
    }
  }

  /// Per-stage feature maps, shallow to deep; the last entry is the bottleneck.
  std::vector<Tensor<T>> forward(const Tensor<T>& x, bool train) {
    std::vector<Tensor<T>> feats;
    Tensor<T> h = relu(stem_bn.forward(stem.forward(x), train));
    for (auto& s : stages) {
      h = s.forward(h, train);
      feats.push_back(h);
    }
    return feats;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    stem.collect(prefix + ".stem", out);
    stem_bn.collect(prefix + ".stem_bn", out);
    for (size_t i = 0; i < stages.size(); ++i)
      stages[i].collect(prefix + ".stage" + std::to_string(i), out);
  }
};

// ---- decoder ---------------------------------------------------------------

/// Decoder block: three 3x3 conv+BN+ReLU layers at decoder_channels, then a
/// 2x upsample. The concat with the encoder skip happens in the decoder
/// before the block runs.
template <std::floating_point T>
struct DecoderBlock {
  Conv2d<T> conv1, conv2, conv3;
  BatchNorm2d<T> bn1, bn2, bn3;

  DecoderBlock() = default;
  DecoderBlock(int64_t in_ch, int64_t out_ch, Rng& rng)
      : conv1(in_ch, out_ch, 3, 1, 1, false, rng),
        conv2(out_ch, out_ch, 3, 1, 1, false, rng),
        conv3(out_ch, out_ch, 3, 1, 1, false, rng),
        bn1(out_ch),
        bn2(out_ch),
        bn3(out_ch) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> h = relu(bn1.forward(conv1.forward(x), train));
    h = relu(bn2.forward(conv2.forward(h), train));
    h = relu(bn3.forward(conv3.forward(h), train));
    return upsample_nearest2x(h);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
    conv3.collect(prefix + ".conv3", out);
    bn3.collect(prefix + ".bn3", out);
  }
};

/// Mirrors the encoder's downsamplings: block i runs at the resolution of
/// encoder stage k-i and concats that stage's features first. The deepest
/// block's matching feature IS the bottleneck it receives, so it takes no
/// concat. After the last block's upsample a 1x1 head maps to the task
/// dimension.
template <std::floating_point T>
struct Decoder {
  std::vector<DecoderBlock<T>> blocks;
  Conv2d<T> head;  // 1x1 to the task dimension

  Decoder() = default;
  Decoder(const ModelConfig& cfg, int64_t out_ch, Rng& rng) {
    int64_t k = cfg.decoder_blocks();
    int64_t prev = cfg.encoder_stages.back();
    for (int64_t i = 0; i < k; ++i) {
      int64_t skip_ch = i == 0 ? 0 : cfg.encoder_stages[static_cast<size_t>(k - i)];
      blocks.emplace_back(prev + skip_ch, cfg.decoder_channels, rng);
      prev = cfg.decoder_channels;
    }
    head = Conv2d<T>(prev, out_ch, 1, 1, 0, true, rng);
  }

  Tensor<T> forward(const std::vector<Tensor<T>>& encoder_feats, bool train) {
    size_t k = blocks.size();
    Tensor<T> h = encoder_feats.back();
    for (size_t i = 0; i < k; ++i) {
      if (i > 0) {
        const Tensor<T>& skip = encoder_feats[k - i];
        check(h.dim(2) == skip.dim(2) && h.dim(3) == skip.dim(3), ErrorCategory::shape,
              "decoder resolution mismatch between skip " + shape_str(skip.shape()) +
                  " and upsampled features " + shape_str(h.shape()));
        h = concat(h, skip, 1);
      }
      h = blocks[i].forward(h, train);
    }
    return head.forward(h);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    head.collect(prefix + ".head", out);
  }
};

// ---- task-transfer network ---------------------------------------------------

/// Small U-Net mapping one task's prediction into the other task's space:
/// three contracting blocks (two 3x3 conv+ReLU, then 2x2 maxpool) and three
/// expansive blocks built symmetrically (skip concat, two 3x3 conv+ReLU, then
/// 2x upsample), no normalization layers. The deepest expansive block has no
/// skip; its matching feature is the bottleneck it receives.
template <std::floating_point T>
struct TTNet {
  struct Stage {
    Conv2d<T> conv_a, conv_b;
  };
  std::vector<Stage> down, up;
  Conv2d<T> head;

  TTNet() = default;
  TTNet(int64_t in_ch, int64_t out_ch, const std::vector<int64_t>& ch, Rng& rng) {
    int64_t prev = in_ch;
    for (int64_t c : ch) {
      down.push_back({Conv2d<T>(prev, c, 3, 1, 1, true, rng),
                      Conv2d<T>(c, c, 3, 1, 1, true, rng)});
      prev = c;
    }
    for (size_t i = ch.size(); i-- > 0;) {
      int64_t c = ch[i];
      int64_t skip_ch = (i + 1 == ch.size()) ? 0 : ch[i + 1];
      up.push_back({Conv2d<T>(prev + skip_ch, c, 3, 1, 1, true, rng),
                    Conv2d<T>(c, c, 3, 1, 1, true, rng)});
      prev = c;
    }
    head = Conv2d<T>(prev, out_ch, 1, 1, 0, true, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    check(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0, ErrorCategory::shape,
          "task-transfer net needs spatial extents divisible by 8, got " +
              shape_str(x.shape()));
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (auto& s : down) {
      h = relu(s.conv_a.forward(h));
      h = relu(s.conv_b.forward(h));
      skips.push_back(h);
      h = maxpool2d(h);
    }
    size_t depth = down.size();
    for (size_t i = 0; i < up.size(); ++i) {
      if (i > 0) h = concat(h, skips[depth - i], 1);
      h = relu(up[i].conv_a.forward(h));
      h = relu(up[i].conv_b.forward(h));
      h = upsample_nearest2x(h);
    }
    return head.forward(h);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < down.size(); ++i) {
      down[i].conv_a.collect(prefix + ".down" + std::to_string(i) + ".conv_a", out);
      down[i].conv_b.collect(prefix + ".down" + std::to_string(i) + ".conv_b", out);
    }
    for (size_t i = 0; i < up.size(); ++i) {
      up[i].conv_a.collect(prefix + ".up" + std::to_string(i) + ".conv_a", out);
      up[i].conv_b.collect(prefix + ".up" + std::to_string(i) + ".conv_b", out);
    }
    head.collect(prefix + ".head", out);
  }
};

// ---- full model -------------------------------------------------------------

template <std::floating_point T>
struct ForwardOutput {
  Tensor<T> seg;    // (N, C, H, W) logits
  Tensor<T> depth;  // (N, 1, H, W)
  Tensor<T> transferred_seg;    // defined for ALIGN/XTC
  Tensor<T> transferred_depth;  // defined for ALIGN/XTC
  std::vector<Tensor<T>> encoder_feats;
};

/// Shared encoder, per-task decoders, and (for ALIGN/XTC) the two
/// task-transfer networks. The ST variant instead holds two fully disjoint
/// encoder+decoder pairs.
template <std::floating_point T>
struct XTaskNet {
  ModelConfig cfg;
  Encoder<T> encoder;
  std::optional<Encoder<T>> encoder2;  // ST only: depth task's own encoder
  Decoder<T> dec_seg, dec_depth;
  std::optional<TTNet<T>> tt_depth_to_seg;  // F
  std::optional<TTNet<T>> tt_seg_to_depth;  // G

  XTaskNet() = default;
  XTaskNet(const ModelConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    encoder = Encoder<T>(cfg, rng);
    if (cfg.variant == Variant::ST) encoder2.emplace(cfg, rng);
    dec_seg = Decoder<T>(cfg, cfg.num_classes, rng);
    dec_depth = Decoder<T>(cfg, 1, rng);
    if (cfg.variant == Variant::ALIGN || cfg.variant == Variant::XTC) {
      tt_depth_to_seg.emplace(1, cfg.num_classes, cfg.ttnet_channels, rng);
      tt_seg_to_depth.emplace(cfg.num_classes, 1, cfg.ttnet_channels, rng);
    }
  }

  bool has_ttnets() const { return tt_depth_to_seg.has_value(); }

  ForwardOutput<T> forward(const Tensor<T>& x, bool train) {
    check(x.rank() == 4 && x.dim(1) == cfg.in_channels, ErrorCategory::shape,
          "model input must be (N," + std::to_string(cfg.in_channels) + ",H,W), got " +
              shape_str(x.shape()));
    int64_t div = int64_t(1) << cfg.decoder_blocks();
    check(x.dim(2) % div == 0 && x.dim(3) % div == 0, ErrorCategory::shape,
          "input spatial extents must be divisible by " + std::to_string(div));
    if (has_ttnets())
      check(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0, ErrorCategory::shape,
            "input spatial extents must be divisible by 8 for task-transfer nets");

    ForwardOutput<T> out;
    if (cfg.variant == Variant::ST) {
      out.encoder_feats = encoder.forward(x, train);
      out.seg = dec_seg.forward(out.encoder_feats, train);
      auto feats2 = encoder2->forward(x, train);
      out.depth = dec_depth.forward(feats2, train);
      return out;
    }
    out.encoder_feats = encoder.forward(x, train);
    out.seg = dec_seg.forward(out.encoder_feats, train);
    out.depth = dec_depth.forward(out.encoder_feats, train);
    if (has_ttnets()) {
      out.transferred_seg = tt_depth_to_seg->forward(out.depth);
      out.transferred_depth = tt_seg_to_depth->forward(softmax(out.seg, 1));
    }
    return out;
  }

  /// All named tensors, parameters and buffers alike. Group = name prefix up
  /// to the first dot: encoder, encoder2, dec1, dec2, F, G.
  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<NamedTensor<T>> out;
    encoder.collect("encoder", out);
    if (encoder2) encoder2->collect("encoder2", out);
    dec_seg.collect("dec1", out);
    dec_depth.collect("dec2", out);
    if (tt_depth_to_seg) tt_depth_to_seg->collect("F", out);
    if (tt_seg_to_depth) tt_seg_to_depth->collect("G", out);
    return out;
  }

  std::vector<NamedTensor<T>> parameters() {
    std::vector<NamedTensor<T>> all = named_tensors(), out;
    for (auto& t : all)
      if (t.trainable) out.push_back(std::move(t));
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

inline std::string parameter_group(const std::string& name) {
  return name.substr(0, name.find('.'));
}

// ---- checkpointing -----------------------------------------------------------

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& dir, XTaskNet<T>& model, int64_t step) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  check(!ec, ErrorCategory::io, "cannot create checkpoint directory " + dir.string());
  auto tensors = model.named_tensors();
  nlohmann::json manifest;
  manifest["config"] = model.cfg;
  manifest["step"] = step;
  manifest["dtype"] = dtype_name<T>();
  nlohmann::json list = nlohmann::json::array();
  for (auto& t : tensors) {
    list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"trainable", t.trainable}});
    write_tensor_file<T>(dir / (t.name + ".t"), t.tensor.shape(), t.tensor.data());
  }
  manifest["tensors"] = list;
  std::ofstream out(dir / "manifest.json");
  check(out.good(), ErrorCategory::io, "cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  check(in.good(), ErrorCategory::io, "missing checkpoint manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
  check(!manifest.is_discarded(), ErrorCategory::data,
        "malformed checkpoint manifest: " + (dir / "manifest.json").string());
  return manifest;
}

template <std::floating_point T>
std::pair<XTaskNet<T>, int64_t> load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  check(manifest.contains("config") && manifest.contains("tensors"), ErrorCategory::data,
        "checkpoint manifest missing fields: " + dir.string());
  ModelConfig cfg = manifest["config"].get<ModelConfig>();
  XTaskNet<T> model(cfg, 0);
  auto tensors = model.named_tensors();
  for (auto& entry : manifest["tensors"]) {
    std::string name = entry["name"].get<std::string>();
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const NamedTensor<T>& t) { return t.name == name; });
    check(it != tensors.end(), ErrorCategory::data,
          "checkpoint tensor '" + name + "' does not exist in the model");
    StoredTensor stored = read_tensor_file(dir / (name + ".t"));
    check(stored.shape == it->tensor.shape(), ErrorCategory::shape,
          "checkpoint tensor '" + name + "' has shape " + shape_str(stored.shape) +
              ", model expects " + shape_str(it->tensor.shape()));
    auto dst = it->tensor.mutable_data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(stored.data[i]);
  }
  int64_t step = manifest.value("step", int64_t(0));
  return {std::move(model), step};
}

}  // namespace xtask
