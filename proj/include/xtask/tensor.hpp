#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "xtask/common.hpp"

namespace xtask {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

/// Thread-local switch: while disabled, new ops produce constants with no
/// graph linkage. Used for evaluation passes.
inline bool& autodiff_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(autodiff_enabled()) { autodiff_enabled() = false; }
  ~NoGradGuard() { autodiff_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// One recorded operation (or leaf) of the reverse-mode tape. Parents always
/// precede their consumers in execution order, so a depth-first walk from the
/// loss yields a valid topological order.
template <std::floating_point T>
struct TapeNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> parents;
  // Pulls this node's grad and accumulates into the parents. Receives the
  // node itself so closures can read value/grad without self-references.
  std::function<void(TapeNode&)> backward;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }

  void accumulate(std::span<const T> g) {
    ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

/// Dense n-dimensional array participating in a reverse-mode graph.
/// Value-semantic handle; copies share the underlying node.
template <std::floating_point T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()), ErrorCategory::shape,
          "tensor data length " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
    auto n = std::make_shared<TapeNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), T(0));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    check(numel() == 1, ErrorCategory::shape, "item() requires a single-element tensor");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Same values, no graph linkage; gradients never flow through the result.
  Tensor detach() const {
    auto n = std::make_shared<TapeNode<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  /// Reverse sweep from a scalar. Leaf grads accumulate additively; grads of
  /// interior nodes are reset at the start of each sweep so repeated calls
  /// over the same graph stay correct.
  void backward() const {
    check(numel() == 1, ErrorCategory::shape,
          "backward() requires a scalar loss, got shape " + shape_str(node_->shape));
    std::vector<TapeNode<T>*> order;
    topo_order(order);
    for (TapeNode<T>* n : order) {
      if (n->backward) n->grad.assign(n->value.size(), T(0));
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TapeNode<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  std::shared_ptr<TapeNode<T>> node() const { return node_; }

  explicit Tensor(std::shared_ptr<TapeNode<T>> n) : node_(std::move(n)) {}

 private:
  void topo_order(std::vector<TapeNode<T>*>& order) const {
    // Iterative post-order DFS; parents land before consumers.
    std::unordered_set<TapeNode<T>*> seen;
    std::vector<std::pair<TapeNode<T>*, size_t>> stack;
    if (!node_->requires_grad) {
      order.push_back(node_.get());
      return;
    }
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        TapeNode<T>* p = n->parents[i++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TapeNode<T>> node_;
};

namespace detail {

/// Builds a graph node. If autodiff is off or no parent participates, the
/// result is a plain constant and the closure is dropped.
template <std::floating_point T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(TapeNode<T>&)> backward) {
  auto n = std::make_shared<TapeNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = autodiff_enabled();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

// ---- trailing-dimension broadcasting -----------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < ra ? a[ra - 1 - i] : 1;
    int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      fail(ErrorCategory::shape,
           "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

/// Row-major strides of `s` viewed at the rank of `out`, with 0 on
/// broadcast dimensions.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> natural(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    natural[i] = acc;
    acc *= s[i];
  }
  std::vector<int64_t> strides(out.size(), 0);
  size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i)
    strides[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : natural[i];
  return strides;
}

/// Visits every element of `out_shape`, handing linear offsets into the two
/// broadcast operands and the output.
template <class Fn>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  int64_t total = shape_numel(out_shape);
  size_t r = out_shape.size();
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

template <std::floating_point T, class F, class DFA, class DFB>
Tensor<T> binary_ew(const Tensor<T>& a, const Tensor<T>& b, F f, DFA dfa, DFB dfb) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto an = a.node();
  auto bn = b.node();
  if (as == bs) {
    std::vector<T> out(an->value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(an->value[i], bn->value[i]);
    return make_op<T>(
        as, std::move(out), {a, b}, [an, bn, dfa, dfb](TapeNode<T>& self) {
          if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
              an->grad[i] += dfa(an->value[i], bn->value[i]) * self.grad[i];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
              bn->grad[i] += dfb(an->value[i], bn->value[i]) * self.grad[i];
          }
        });
  }
  Shape os = broadcast_shape(as, bs);
  auto sa = broadcast_strides(as, os);
  auto sb = broadcast_strides(bs, os);
  std::vector<T> out(static_cast<size_t>(shape_numel(os)));
  for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
    out[i] = f(an->value[ia], bn->value[ib]);
  });
  return make_op<T>(
      os, std::move(out), {a, b},
      [an, bn, os, sa, sb, dfa, dfb](TapeNode<T>& self) {
        // Broadcast backward: gradients reduce-sum onto each operand's shape.
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
          T g = self.grad[i];
          if (an->requires_grad) an->grad[ia] += dfa(an->value[ia], bn->value[ib]) * g;
          if (bn->requires_grad) bn->grad[ib] += dfb(an->value[ia], bn->value[ib]) * g;
        });
      });
}

template <std::floating_point T, class F, class DF>
Tensor<T> unary_ew(const Tensor<T>& a, F f, DF df) {
  auto an = a.node();
  std::vector<T> out(an->value.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(an->value[i]);
  return make_op<T>(a.shape(), std::move(out), {a}, [an, df](TapeNode<T>& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += df(an->value[i], self.value[i]) * self.grad[i];
  });
}

template <std::floating_point T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <std::floating_point T>
using MatMap = Eigen::Map<RowMat<T>>;
template <std::floating_point T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---- arithmetic ----------------------------------------------------------

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <std::floating_point T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <std::floating_point T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <std::floating_point T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <std::floating_point T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <std::floating_point T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

template <std::floating_point T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <std::floating_point T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <std::floating_point T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <std::floating_point T>
Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <std::floating_point T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <std::floating_point T>
Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }

// ---- nonlinearities -------------------------------------------------------

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

inline constexpr double kLogFloor = 1e-12;

/// log with the input clamped at 1e-12; gradient is zero in the clamped
/// region.
template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  const T floor = static_cast<T>(kLogFloor);
  return detail::unary_ew(
      a, [floor](T x) { return std::log(x < floor ? floor : x); },
      [floor](T x, T) { return x < floor ? T(0) : T(1) / x; });
}

template <std::floating_point T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Numerically stabilized softmax along `axis`.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const Shape& s = a.shape();
  check(axis >= 0 && axis < static_cast<int>(s.size()), ErrorCategory::shape,
        "softmax axis out of range for shape " + shape_str(s));
  int64_t n_axis = s[axis];
  int64_t inner = 1, outer = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  auto an = a.node();
  std::vector<T> out(an->value.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n_axis * inner + in;
      T mx = an->value[base];
      for (int64_t k = 1; k < n_axis; ++k)
        mx = std::max(mx, an->value[base + k * inner]);
      T sum = T(0);
      for (int64_t k = 0; k < n_axis; ++k) {
        T e = std::exp(an->value[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (int64_t k = 0; k < n_axis; ++k) out[base + k * inner] *= inv;
    }
  }
  return detail::make_op<T>(
      s, std::move(out), {a}, [an, n_axis, inner, outer](TapeNode<T>& self) {
        // dx = p * (g - sum_axis(g * p))
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * n_axis * inner + in;
            T dot = T(0);
            for (int64_t k = 0; k < n_axis; ++k) {
              int64_t i = base + k * inner;
              dot += self.grad[i] * self.value[i];
            }
            for (int64_t k = 0; k < n_axis; ++k) {
              int64_t i = base + k * inner;
              an->grad[i] += self.value[i] * (self.grad[i] - dot);
            }
          }
        }
      });
}

// ---- reductions and structure ---------------------------------------------

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  auto an = a.node();
  T acc = T(0);
  for (T v : an->value) acc += v;
  return detail::make_op<T>({1}, {acc}, {a}, [an](TapeNode<T>& self) {
    an->ensure_grad();
    T g = self.grad[0];
    for (auto& gv : an->grad) gv += g;
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return sum(a) * (T(1) / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> detach(const Tensor<T>& a) {
  return a.detach();
}

template <std::floating_point T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  check(as.size() == bs.size(), ErrorCategory::shape, "concat rank mismatch");
  check(axis >= 0 && axis < static_cast<int>(as.size()), ErrorCategory::shape,
        "concat axis out of range");
  for (size_t i = 0; i < as.size(); ++i)
    check(static_cast<int>(i) == axis || as[i] == bs[i], ErrorCategory::shape,
          "concat extent mismatch off-axis: " + shape_str(as) + " vs " + shape_str(bs));
  Shape os = as;
  os[axis] += bs[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= as[i];
  for (size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  int64_t wa = as[axis] * inner, wb = bs[axis] * inner, wo = wa + wb;
  auto an = a.node();
  auto bn = b.node();
  std::vector<T> out(static_cast<size_t>(shape_numel(os)));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(an->value.data() + o * wa, wa, out.data() + o * wo);
    std::copy_n(bn->value.data() + o * wb, wb, out.data() + o * wo + wa);
  }
  return detail::make_op<T>(
      os, std::move(out), {a, b}, [an, bn, outer, wa, wb, wo](TapeNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < wa; ++i) an->grad[o * wa + i] += self.grad[o * wo + i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < wb; ++i)
              bn->grad[o * wb + i] += self.grad[o * wo + wa + i];
        }
      });
}

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 2 && b.rank() == 2, ErrorCategory::shape, "matmul expects 2-d tensors");
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  check(k == k2, ErrorCategory::shape,
        "matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  std::vector<T> out(static_cast<size_t>(m * n));
  {
    detail::ConstMatMap<T> A(an->value.data(), m, k), B(bn->value.data(), k, n);
    detail::MatMap<T> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return detail::make_op<T>(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TapeNode<T>& self) {
        detail::ConstMatMap<T> A(an->value.data(), m, k), B(bn->value.data(), k, n),
            G(self.grad.data(), m, n);
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MatMap<T>(an->grad.data(), m, k).noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::MatMap<T>(bn->grad.data(), k, n).noalias() += A.transpose() * G;
        }
      });
}

}  // namespace xtask
