#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <json.hpp>

#include "xtask/tensor.hpp"

namespace xtask {

/// Segmentation + depth evaluation summary. per_class_iou entries are NaN for
/// classes absent from both prediction and ground truth (excluded from the
/// mean).
struct MetricsReport {
  double miou = 0;
  double pix_acc = 0;
  double abs_err = 0;
  double rel_err = 0;  // ratio, not percent
  std::vector<double> per_class_iou;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"miou", r.miou}, {"pix_acc", r.pix_acc}, {"abs_err", r.abs_err},
       {"rel_err", r.rel_err}};
  nlohmann::json per = nlohmann::json::array();
  for (double v : r.per_class_iou) {
    if (std::isnan(v)) per.push_back(nullptr);
    else per.push_back(v);
  }
  j["per_class_iou"] = per;
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("miou").get_to(r.miou);
  j.at("pix_acc").get_to(r.pix_acc);
  j.at("abs_err").get_to(r.abs_err);
  j.at("rel_err").get_to(r.rel_err);
  r.per_class_iou.clear();
  if (j.contains("per_class_iou"))
    for (const auto& v : j["per_class_iou"])
      r.per_class_iou.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : v.get<double>());
}

/// counts[g*C + p]: pixels with ground truth g predicted as p, over pixels
/// whose ground truth is not `ignore_index`.
inline std::vector<int64_t> confusion_matrix(std::span<const int32_t> pred,
                                             std::span<const int32_t> gt, int64_t C,
                                             int ignore_index = 255) {
  check(pred.size() == gt.size(), ErrorCategory::shape,
        "confusion_matrix: prediction/target length mismatch");
  std::vector<int64_t> counts(static_cast<size_t>(C * C), 0);
  for (size_t i = 0; i < gt.size(); ++i) {
    int32_t g = gt[i];
    if (g == ignore_index) continue;
    int32_t p = pred[i];
    check(g >= 0 && g < C && p >= 0 && p < C, ErrorCategory::data,
          "confusion_matrix: class id out of range");
    counts[static_cast<size_t>(g) * C + p]++;
  }
  return counts;
}

struct SegScores {
  double miou = 0;
  double pix_acc = 0;
  std::vector<double> per_class_iou;
};

/// IoU_c = TP/(TP+FP+FN); classes with zero union are excluded from the mean.
inline SegScores miou_pixacc(const std::vector<int64_t>& conf, int64_t C) {
  int64_t total = 0, diag = 0;
  for (int64_t g = 0; g < C; ++g)
    for (int64_t p = 0; p < C; ++p) {
      total += conf[g * C + p];
      if (g == p) diag += conf[g * C + p];
    }
  check(total > 0, ErrorCategory::data, "miou_pixacc: empty confusion matrix");
  SegScores s;
  s.pix_acc = static_cast<double>(diag) / static_cast<double>(total);
  s.per_class_iou.assign(C, std::numeric_limits<double>::quiet_NaN());
  double iou_sum = 0;
  int64_t present = 0;
  for (int64_t c = 0; c < C; ++c) {
    int64_t tp = conf[c * C + c];
    int64_t fn = 0, fp = 0;
    for (int64_t k = 0; k < C; ++k) {
      if (k != c) {
        fn += conf[c * C + k];
        fp += conf[k * C + c];
      }
    }
    int64_t uni = tp + fp + fn;
    if (uni == 0) continue;  // class absent from both gt and prediction
    double iou = static_cast<double>(tp) / static_cast<double>(uni);
    s.per_class_iou[c] = iou;
    iou_sum += iou;
    ++present;
  }
  check(present > 0, ErrorCategory::data, "miou_pixacc: no classes present");
  s.miou = iou_sum / static_cast<double>(present);
  return s;
}

/// abs_err = mean |pred-gt| and rel_err = mean |pred-gt|/gt over valid pixels.
inline std::pair<double, double> depth_errors(std::span<const double> pred,
                                              std::span<const double> gt,
                                              std::span<const uint8_t> valid) {
  check(pred.size() == gt.size() && pred.size() == valid.size(), ErrorCategory::shape,
        "depth_errors: operand length mismatch");
  double abs_sum = 0, rel_sum = 0;
  int64_t n = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    check(gt[i] > 0, ErrorCategory::data, "depth_errors: nonpositive ground truth in mask");
    double d = std::abs(pred[i] - gt[i]);
    abs_sum += d;
    rel_sum += d / gt[i];
    ++n;
  }
  check(n > 0, ErrorCategory::data, "depth_errors: empty valid mask");
  return {abs_sum / n, rel_sum / n};
}

/// Average signed relative gain of `model` over `base` across metrics,
/// sign-corrected by `lower_is_better`, reported in percent.
inline double delta_m(std::span<const double> model, std::span<const double> base,
                      std::span<const bool> lower_is_better) {
  check(model.size() == base.size() && model.size() == lower_is_better.size(),
        ErrorCategory::shape, "delta_m: metric list length mismatch");
  check(!model.empty(), ErrorCategory::data, "delta_m: empty metric lists");
  double acc = 0;
  for (size_t i = 0; i < model.size(); ++i) {
    check(base[i] != 0.0, ErrorCategory::data, "delta_m: zero baseline metric");
    double gain = (model[i] - base[i]) / base[i];
    acc += lower_is_better[i] ? -gain : gain;
  }
  return 100.0 * acc / static_cast<double>(model.size());
}

/// Delta_m over the canonical metric vector (miou, pix_acc, abs_err, rel_err).
inline double delta_m(const MetricsReport& model, const MetricsReport& base) {
  const double m[4] = {model.miou, model.pix_acc, model.abs_err, model.rel_err};
  const double b[4] = {base.miou, base.pix_acc, base.abs_err, base.rel_err};
  const bool flags[4] = {false, false, true, true};
  return delta_m(std::span<const double>(m, 4), std::span<const double>(b, 4),
                 std::span<const bool>(flags, 4));
}

/// Argmax over the channel axis of (N,C,H,W) logits.
template <std::floating_point T>
std::vector<int32_t> argmax_channel(const Tensor<T>& logits) {
  check(logits.rank() == 4, ErrorCategory::shape, "argmax_channel expects NCHW");
  int64_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<int32_t> ids(static_cast<size_t>(N * HW));
  auto v = logits.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      int32_t best = 0;
      T bv = v[(n * C) * HW + i];
      for (int64_t c = 1; c < C; ++c) {
        T cv = v[(n * C + c) * HW + i];
        if (cv > bv) {
          bv = cv;
          best = static_cast<int32_t>(c);
        }
      }
      ids[n * HW + i] = best;
    }
  return ids;
}

}  // namespace xtask
