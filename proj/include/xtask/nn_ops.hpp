#pragma once

#include <cstring>
#include <vector>

#include "xtask/tensor.hpp"

namespace xtask {

namespace detail {

/// Unfolds one sample (C,H,W) into a (C*kh*kw) x (Ho*Wo) column matrix.
/// Out-of-bounds taps read as zero.
template <std::floating_point T>
void im2col(const T* src, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < C; ++c) {
    const T* plane = src + c * H * W;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride + ki - pad;
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* srow = plane + ih * W;
          if (stride == 1) {
            // Contiguous middle segment with zero side bands.
            int64_t iw0 = kj - pad;  // input column for ow = 0
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min<int64_t>(Wo, W - iw0);
            if (lo > 0) std::fill(dst, dst + std::min(lo, Wo), T(0));
            if (hi > lo) std::copy(srow + iw0 + lo, srow + iw0 + hi, dst + lo);
            if (hi < Wo) std::fill(dst + std::max<int64_t>(hi, 0), dst + Wo, T(0));
          } else {
            for (int64_t ow = 0; ow < Wo; ++ow) {
              int64_t iw = ow * stride + kj - pad;
              dst[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col. Stride-1 rows reduce to contiguous
/// segment additions.
template <std::floating_point T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* dst) {
  for (int64_t c = 0; c < C; ++c) {
    T* plane = dst + c * H * W;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          T* drow = plane + ih * W;
          const T* srow = row + oh * Wo;
          if (stride == 1) {
            int64_t iw0 = kj - pad;
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min<int64_t>(Wo, W - iw0);
            T* d = drow + iw0;
            for (int64_t i = lo; i < hi; ++i) d[i] += srow[i];
          } else {
            for (int64_t ow = 0; ow < Wo; ++ow) {
              int64_t iw = ow * stride + kj - pad;
              if (iw >= 0 && iw < W) drow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

template <std::floating_point T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

/// 2-d cross-correlation over NCHW with the kernel laid out (F,C,kh,kw).
/// `bias` may be undefined for a bias-free convolution.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
  check(x.rank() == 4, ErrorCategory::shape, "conv2d input must be NCHW");
  check(w.rank() == 4, ErrorCategory::shape, "conv2d kernel must be FCKhKw");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t F = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check(C == Cw, ErrorCategory::shape,
        "conv2d channel mismatch: input has " + std::to_string(C) + ", kernel expects " +
            std::to_string(Cw));
  check(kh % 2 == 1 && kw % 2 == 1, ErrorCategory::shape, "conv2d kernel extents must be odd");
  check(stride >= 1 && pad >= 0, ErrorCategory::shape, "conv2d stride/pad out of range");
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  check(H + 2 * pad - kh >= 0 && W + 2 * pad - kw >= 0 && Ho > 0 && Wo > 0,
        ErrorCategory::shape, "conv2d produces nonpositive output extent");
  if (bias.defined())
    check(bias.rank() == 1 && bias.dim(0) == F, ErrorCategory::shape,
          "conv2d bias must have one entry per filter");

  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  const int64_t K = C * kh * kw, HW = Ho * Wo;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  // When the kernel needs gradients, keep the unfolded columns from the
  // forward pass so the backward dW GEMM does not redo im2col.
  const bool track = autodiff_enabled() &&
                     (x.requires_grad() || w.requires_grad() ||
                      (bias.defined() && bias.requires_grad()));
  const bool cache_col = track && w.requires_grad() && !pointwise;

  std::vector<T> out(static_cast<size_t>(N * F * HW));
  std::shared_ptr<T[]> col_cache;
  if (cache_col) col_cache.reset(new T[static_cast<size_t>(N * K * HW)]);
  {
    std::vector<T>& scratch = detail::conv_scratch<T>();
    if (!pointwise && !cache_col) scratch.resize(static_cast<size_t>(K * HW));
    detail::ConstMatMap<T> Wm(wn->value.data(), F, K);
    for (int64_t n = 0; n < N; ++n) {
      const T* src = xn->value.data() + n * C * H * W;
      const T* cols = src;
      if (!pointwise) {
        T* buf = cache_col ? col_cache.get() + n * K * HW : scratch.data();
        detail::im2col(src, C, H, W, kh, kw, stride, pad, Ho, Wo, buf);
        cols = buf;
      }
      detail::MatMap<T> O(out.data() + n * F * HW, F, HW);
      O.noalias() = Wm * detail::ConstMatMap<T>(cols, K, HW);
    }
    if (bn) {
      for (int64_t n = 0; n < N; ++n)
        for (int64_t f = 0; f < F; ++f) {
          T bv = bn->value[f];
          T* dst = out.data() + (n * F + f) * HW;
          for (int64_t i = 0; i < HW; ++i) dst[i] += bv;
        }
    }
  }

  std::vector<Tensor<T>> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_op<T>(
      {N, F, Ho, Wo}, std::move(out), std::move(parents),
      [xn, wn, bn, col_cache = std::move(col_cache), N, C, H, W, F, kh, kw, stride, pad,
       Ho, Wo, K, HW, pointwise](TapeNode<T>& self) {
        detail::ConstMatMap<T> Wm(wn->value.data(), F, K);
        if (wn->requires_grad) wn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        std::vector<T> dcol;
        if (!pointwise && xn->requires_grad) dcol.resize(static_cast<size_t>(K * HW));
        for (int64_t n = 0; n < N; ++n) {
          detail::ConstMatMap<T> G(self.grad.data() + n * F * HW, F, HW);
          if (wn->requires_grad) {
            const T* cols = pointwise ? xn->value.data() + n * C * H * W
                                      : col_cache.get() + n * K * HW;
            detail::MatMap<T>(wn->grad.data(), F, K).noalias() +=
                G * detail::ConstMatMap<T>(cols, K, HW).transpose();
          }
          if (xn->requires_grad) {
            if (pointwise) {
              detail::MatMap<T>(xn->grad.data() + n * C * H * W, K, HW).noalias() +=
                  Wm.transpose() * G;
            } else {
              detail::MatMap<T>(dcol.data(), K, HW).noalias() = Wm.transpose() * G;
              detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                 xn->grad.data() + n * C * H * W);
            }
          }
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t f = 0; f < F; ++f) {
              const T* g = self.grad.data() + (n * F + f) * HW;
              T acc = T(0);
              for (int64_t i = 0; i < HW; ++i) acc += g[i];
              bn->grad[f] += acc;
            }
        }
      });
}

/// Batch normalization over NCHW. In training mode the batch statistics
/// normalize the activations and update the running buffers in place; in
/// eval mode the frozen running statistics are used and left untouched.
template <std::floating_point T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       T eps = T(1e-5), T momentum = T(0.1)) {
  check(x.rank() == 4, ErrorCategory::shape, "batch_norm2d input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(gamma.numel() == C && beta.numel() == C, ErrorCategory::shape,
        "batch_norm2d gamma/beta must be per-channel");
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const int64_t HW = H * W;
  const int64_t m = N * HW;  // samples per channel

  std::vector<T> out(xn->value.size());
  if (training) {
    check(m > 1, ErrorCategory::data,
          "batch_norm2d degenerate batch: need more than one value per channel in "
          "training mode");
    std::vector<T> mean_c(C), invstd_c(C);
    std::vector<T> xhat(xn->value.size());
    for (int64_t c = 0; c < C; ++c) {
      // One pass; double accumulators keep the f32 path stable.
      double s = 0, s2 = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xn->value.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          double d = static_cast<double>(p[i]);
          s += d;
          s2 += d * d;
        }
      }
      double mu_d = s / static_cast<double>(m);
      T mu = static_cast<T>(mu_d);
      T v = static_cast<T>(std::max(0.0, s2 / static_cast<double>(m) - mu_d * mu_d));
      mean_c[c] = mu;
      invstd_c[c] = T(1) / std::sqrt(v + eps);
      running_mean.mutable_data()[c] =
          (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
      running_var.mutable_data()[c] =
          (T(1) - momentum) * running_var.data()[c] + momentum * v;
      T g = gn->value[c], b = bn->value[c], is = invstd_c[c];
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xn->value.data() + (n * C + c) * HW;
        T* xh = xhat.data() + (n * C + c) * HW;
        T* o = out.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          xh[i] = (p[i] - mu) * is;
          o[i] = g * xh[i] + b;
        }
      }
    }
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, xhat = std::move(xhat), invstd = std::move(invstd_c), N, C,
         HW, m](TapeNode<T>& self) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (int64_t c = 0; c < C; ++c) {
            T sum_g = T(0), sum_gx = T(0);
            for (int64_t n = 0; n < N; ++n) {
              const T* g = self.grad.data() + (n * C + c) * HW;
              const T* xh = xhat.data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
              }
            }
            if (gn->requires_grad) {
              gn->ensure_grad();
              gn->grad[c] += sum_gx;
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              bn->grad[c] += sum_g;
            }
            if (xn->requires_grad) {
              xn->ensure_grad();
              // Full batch-statistics gradient.
              T k = gn->value[c] * invstd[c];
              for (int64_t n = 0; n < N; ++n) {
                const T* g = self.grad.data() + (n * C + c) * HW;
                const T* xh = xhat.data() + (n * C + c) * HW;
                T* dx = xn->grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i)
                  dx[i] += k * (g[i] - inv_m * sum_g - xh[i] * inv_m * sum_gx);
              }
            }
          }
        });
  }

  // Eval: affine transform with frozen statistics.
  const auto rm = running_mean.data();
  const auto rv = running_var.data();
  std::vector<T> scale(C), shift(C);
  for (int64_t c = 0; c < C; ++c) {
    T is = T(1) / std::sqrt(rv[c] + eps);
    scale[c] = gn->value[c] * is;
    shift[c] = bn->value[c] - rm[c] * scale[c];
  }
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = xn->value.data() + (n * C + c) * HW;
      T* o = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) o[i] = scale[c] * p[i] + shift[c];
    }
  std::vector<T> rm_copy(rm.begin(), rm.end()), rv_copy(rv.begin(), rv.end());
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, rm = std::move(rm_copy), rv = std::move(rv_copy), eps, N, C,
       HW](TapeNode<T>& self) {
        for (int64_t c = 0; c < C; ++c) {
          T is = T(1) / std::sqrt(rv[c] + eps);
          T sum_g = T(0), sum_gx = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const T* g = self.grad.data() + (n * C + c) * HW;
            const T* p = xn->value.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              sum_g += g[i];
              sum_gx += g[i] * (p[i] - rm[c]) * is;
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[c] += sum_gx;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[c] += sum_g;
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            T k = gn->value[c] * is;
            for (int64_t n = 0; n < N; ++n) {
              const T* g = self.grad.data() + (n * C + c) * HW;
              T* dx = xn->grad.data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) dx[i] += k * g[i];
            }
          }
        }
      });
}

/// 2x2 max pooling with stride 2. Ties go to the first maximal element in
/// row-major order.
template <std::floating_point T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  check(x.rank() == 4, ErrorCategory::shape, "maxpool2d input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % 2 == 0 && W % 2 == 0, ErrorCategory::shape,
        "maxpool2d requires even spatial extents, got " + shape_str(x.shape()));
  int64_t Ho = H / 2, Wo = W / 2;
  auto xn = x.node();
  std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo));
  std::vector<int32_t> argmax(out.size());
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* p = xn->value.data() + nc * H * W;
    T* o = out.data() + nc * Ho * Wo;
    int32_t* am = argmax.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        int64_t i0 = (2 * oh) * W + 2 * ow;
        int64_t cand[4] = {i0, i0 + 1, i0 + W, i0 + W + 1};
        int64_t best = cand[0];
        for (int j = 1; j < 4; ++j)
          if (p[cand[j]] > p[best]) best = cand[j];
        o[oh * Wo + ow] = p[best];
        am[oh * Wo + ow] = static_cast<int32_t>(best);
      }
  }
  return detail::make_op<T>(
      {N, C, Ho, Wo}, std::move(out), {x},
      [xn, argmax = std::move(argmax), N, C, H, W, Ho, Wo](TapeNode<T>& self) {
        xn->ensure_grad();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          T* dx = xn->grad.data() + nc * H * W;
          const T* g = self.grad.data() + nc * Ho * Wo;
          const int32_t* am = argmax.data() + nc * Ho * Wo;
          for (int64_t i = 0; i < Ho * Wo; ++i) dx[am[i]] += g[i];
        }
      });
}

/// Nearest-neighbor 2x upsampling; backward sums the four duplicated taps.
template <std::floating_point T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  check(x.rank() == 4, ErrorCategory::shape, "upsample_nearest2x input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H * 2, Wo = W * 2;
  auto xn = x.node();
  std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* p = xn->value.data() + nc * H * W;
    T* o = out.data() + nc * Ho * Wo;
    for (int64_t h = 0; h < H; ++h) {
      T* r0 = o + (2 * h) * Wo;
      for (int64_t w = 0; w < W; ++w) {
        r0[2 * w] = p[h * W + w];
        r0[2 * w + 1] = p[h * W + w];
      }
      std::copy_n(r0, Wo, r0 + Wo);
    }
  }
  return detail::make_op<T>(
      {N, C, Ho, Wo}, std::move(out), {x}, [xn, N, C, H, W, Wo](TapeNode<T>& self) {
        xn->ensure_grad();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          T* dx = xn->grad.data() + nc * H * W;
          const T* g = self.grad.data() + nc * (H * 2) * Wo;
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
              const T* g0 = g + (2 * h) * Wo + 2 * w;
              dx[h * W + w] += g0[0] + g0[1] + g0[Wo] + g0[Wo + 1];
            }
        }
      });
}

}  // namespace xtask
