#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "drl/common.hpp"

namespace drl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
  return r + "]";
}

// One node of the reverse-mode tape. A tensor's value and its tape record are
// fused: leaves have no parents, op results keep shared handles to their
// inputs plus a closure that routes the output gradient to them. Saved
// activations live in the closure. A tape is confined to one thread; distinct
// tapes never share mutable state (parameter leaves shared across concurrent
// forward passes are read-only).
struct TapeNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backprop;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    }
    if (!all_finite(data)) throw NumericError("tensor initialized with non-finite values");
    node_ = std::make_shared<TapeNode>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->value.size(), 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const& { return node_->value; }
  std::vector<double>& values() & { return node_->value; }
  // rvalue access copies out, so values() of a temporary cannot dangle
  std::vector<double> values() && { return node_->value; }
  double at(std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  const std::vector<double>& grad() const& {
    if (!node_->requires_grad) throw ValueError("grad() on a tensor that does not require grad");
    return node_->grad;
  }
  std::vector<double> grad() && {
    if (!node_->requires_grad) throw ValueError("grad() on a tensor that does not require grad");
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Leaf copy sharing nothing; keeps requires_grad, resets grad.
  Tensor clone() const {
    return Tensor(node_->shape, node_->value, node_->requires_grad);
  }

  // Leaf view of the same values without tape participation.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  // Reverse sweep from a scalar. Visits reachable grad-requiring nodes in
  // reverse topological order exactly once; gradients accumulate, the caller
  // zeroes them between uses. Leaves not reachable from the loss keep their
  // zero gradient.
  void backward() const {
    if (size() != 1) throw ValueError("backward() requires a scalar loss");
    if (!node_->requires_grad) throw ValueError("backward() on a tensor outside the tape");

    std::vector<TapeNode*> order;
    std::unordered_set<TapeNode*> seen;
    struct Frame {
      TapeNode* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        TapeNode* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    // Interior grads are scratch space for this sweep; only leaves accumulate
    // across calls.
    for (TapeNode* n : order) {
      if (!n->parents.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

  std::shared_ptr<TapeNode> node() const { return node_; }

  explicit Tensor(std::shared_ptr<TapeNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TapeNode> node_;
};

namespace detail {

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<TapeNode>> parents,
                      std::function<void(TapeNode&)> backprop) {
  if (!all_finite(value)) throw NumericError(std::string("non-finite result in op '") + op + "'");
  auto n = std::make_shared<TapeNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->grad.assign(n->value.size(), 0.0);
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

// Trailing-dimension broadcasting: shapes are aligned at their last
// dimension; aligned extents must match or be 1.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> stride_a;  // per out dim, 0 where broadcast
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline BroadcastPlan broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  BroadcastPlan plan;
  plan.out_shape.assign(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    plan.out_shape[i] = std::max(da, db);
  }
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  plan.stride_a.assign(nd, 0);
  plan.stride_b.assign(nd, 0);
  for (std::size_t i = 0; i < nd; ++i) {
    if (i >= nd - a.size() && a[i - (nd - a.size())] != 1) plan.stride_a[i] = sa[i - (nd - a.size())];
    if (i >= nd - b.size() && b[i - (nd - b.size())] != 1) plan.stride_b[i] = sb[i - (nd - b.size())];
  }
  return plan;
}

// Walks every output element of a broadcast result, handing (out, ia, ib)
// flat indices to the visitor in row-major order.
template <typename F>
inline void for_each_broadcast(const BroadcastPlan& plan, F&& visit) {
  const std::size_t nd = plan.out_shape.size();
  const std::size_t total = shape_numel(plan.out_shape);
  std::vector<std::size_t> coord(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t out = 0; out < total; ++out) {
    visit(out, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      if (++coord[d] < plan.out_shape[d]) {
        ia += plan.stride_a[d];
        ib += plan.stride_b[d];
        break;
      }
      coord[d] = 0;
      ia -= plan.stride_a[d] * (plan.out_shape[d] - 1);
      ib -= plan.stride_b[d] * (plan.out_shape[d] - 1);
    }
  }
}

template <typename Fwd, typename BwdA, typename BwdB>
inline Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, BwdA dfda,
                               BwdB dfdb) {
  auto an = a.node();
  auto bn = b.node();
  if (an->shape == bn->shape) {  // fast path, no index arithmetic
    std::vector<double> out(an->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(an->value[i], bn->value[i]);
    return make_op(op, an->shape, std::move(out), {an, bn}, [an, bn, dfda, dfdb](TapeNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double g = self.grad[i];
        if (an->requires_grad) an->grad[i] += g * dfda(an->value[i], bn->value[i]);
        if (bn->requires_grad) bn->grad[i] += g * dfdb(an->value[i], bn->value[i]);
      }
    });
  }
  BroadcastPlan plan = broadcast_shapes(an->shape, bn->shape);
  std::vector<double> out(shape_numel(plan.out_shape));
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(an->value[ia], bn->value[ib]);
  });
  return make_op(op, plan.out_shape, std::move(out), {an, bn},
                 [an, bn, plan, dfda, dfdb](TapeNode& self) {
                   for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     const double g = self.grad[o];
                     if (an->requires_grad) an->grad[ia] += g * dfda(an->value[ia], bn->value[ib]);
                     if (bn->requires_grad) bn->grad[ib] += g * dfdb(an->value[ia], bn->value[ib]);
                   });
                 });
}

template <typename Fwd, typename Bwd>
inline Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Bwd dfdx) {
  auto an = a.node();
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(an->value[i]);
  return make_op(op, an->shape, std::move(out), {an}, [an, dfdx](TapeNode& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// --- elementwise ---

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor add(const Tensor& a, double c) {
  return detail::unary_op(
      "add_s", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul(const Tensor& a, double c) {
  return detail::unary_op(
      "mul_s", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

inline Tensor sub(const Tensor& a, double c) { return add(a, -c); }
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }
inline Tensor sub(double c, const Tensor& a) { return add(neg(a), c); }

inline Tensor relu(const Tensor& a) {
  // subgradient 0 at the kink
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// sign(0) = 0; derivative is zero almost everywhere, so no gradient flows.
inline Tensor sign(const Tensor& a) {
  return detail::unary_op(
      "sign", a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      [](double, double) { return 0.0; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo must not exceed hi");
  return detail::unary_op(
      "clamp", a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// --- structure ---

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size()) {
    throw ShapeError("reshape to " + shape_str(new_shape) + " changes element count");
  }
  auto an = a.node();
  return detail::make_op("reshape", std::move(new_shape), an->value, {an}, [an](TapeNode& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

// Concatenation along dim 0; trailing dims must match.
inline Tensor concat0(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw ShapeError("concat0: trailing dimensions differ: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  auto an = a.node();
  auto bn = b.node();
  Shape out_shape = sa;
  out_shape[0] = sa[0] + sb[0];
  std::vector<double> out;
  out.reserve(an->value.size() + bn->value.size());
  out.insert(out.end(), an->value.begin(), an->value.end());
  out.insert(out.end(), bn->value.begin(), bn->value.end());
  return detail::make_op("concat0", std::move(out_shape), std::move(out), {an, bn},
                         [an, bn](TapeNode& self) {
                           const std::size_t na = an->value.size();
                           if (an->requires_grad) {
                             for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             for (std::size_t i = 0; i < bn->value.size(); ++i) {
                               bn->grad[i] += self.grad[na + i];
                             }
                           }
                         });
}

// --- reductions ---

inline Tensor sum(const Tensor& a) {
  auto an = a.node();
  double s = 0.0;
  for (double x : an->value) s += x;
  return detail::make_op("sum", {1}, {s}, {an}, [an](TapeNode& self) {
    const double g = self.grad[0];
    for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g;
  });
}

inline Tensor mean(const Tensor& a) {
  auto an = a.node();
  double s = 0.0;
  for (double x : an->value) s += x;
  const double inv = 1.0 / static_cast<double>(an->value.size());
  return detail::make_op("mean", {1}, {s * inv}, {an}, [an, inv](TapeNode& self) {
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g;
  });
}

// --- linear algebra ---

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects rank-2 tensors");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto an = a.node();
  auto bn = b.node();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = an->value[i * k + l];
      if (av == 0.0) continue;
      const double* brow = &bn->value[l * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_op("matmul", {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](TapeNode& self) {
    if (an->requires_grad) {  // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          const double* grow = &self.grad[i * n];
          const double* brow = &bn->value[l * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          an->grad[i * k + l] += acc;
        }
      }
    }
    if (bn->requires_grad) {  // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &self.grad[i * n];
        for (std::size_t l = 0; l < k; ++l) {
          const double av = an->value[i * k + l];
          if (av == 0.0) continue;
          double* brow = &bn->grad[l * n];
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
}

// Cross-correlation over NCHW input with an FCkhkw kernel; same stride and
// zero padding on both spatial axes.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t padding = 0) {
  if (input.ndim() != 4 || kernel.ndim() != 4) throw ShapeError("conv2d expects NCHW input and FCHW kernel");
  if (stride == 0) throw ValueError("conv2d stride must be positive");
  const std::size_t N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
  const std::size_t F = kernel.shape()[0], KC = kernel.shape()[1], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (C != KC) throw ShapeError("conv2d channel mismatch");
  if (H + 2 * padding < kh || W + 2 * padding < kw) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t OH = (H + 2 * padding - kh) / stride + 1;
  const std::size_t OW = (W + 2 * padding - kw) / stride + 1;

  auto xn = input.node();
  auto kn = kernel.node();
  std::vector<double> out(N * F * OH * OW, 0.0);
  const auto& x = xn->value;
  const auto& k = kn->value;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double* xin = &x[((n * C + c) * H) * W];
            const double* kin = &k[((f * C + c) * kh) * kw];
            for (std::size_t i = 0; i < kh; ++i) {
              const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t j = 0; j < kw; ++j) {
                const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                acc += xin[ih * static_cast<long>(W) + iw] * kin[i * kw + j];
              }
            }
          }
          out[((n * F + f) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
  return detail::make_op(
      "conv2d", {N, F, OH, OW}, std::move(out), {xn, kn},
      [xn, kn, N, C, H, W, F, kh, kw, OH, OW, stride, padding](TapeNode& self) {
        const auto& x = xn->value;
        const auto& k = kn->value;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t oh = 0; oh < OH; ++oh) {
              for (std::size_t ow = 0; ow < OW; ++ow) {
                const double g = self.grad[((n * F + f) * OH + oh) * OW + ow];
                if (g == 0.0) continue;
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t xbase = ((n * C + c) * H) * W;
                  const std::size_t kbase = ((f * C + c) * kh) * kw;
                  for (std::size_t i = 0; i < kh; ++i) {
                    const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
                    if (ih < 0 || ih >= static_cast<long>(H)) continue;
                    for (std::size_t j = 0; j < kw; ++j) {
                      const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
                      if (iw < 0 || iw >= static_cast<long>(W)) continue;
                      const std::size_t xi = xbase + static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
                      const std::size_t ki = kbase + i * kw + j;
                      if (xn->requires_grad) xn->grad[xi] += g * k[ki];
                      if (kn->requires_grad) kn->grad[ki] += g * x[xi];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// --- classification heads ---

inline void check_labels(const std::vector<int>& labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) throw ShapeError("label count does not match batch rows");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValueError("label " + std::to_string(y) + " out of range [0, " + std::to_string(classes) + ")");
    }
  }
}

// Row softmax with max-subtraction.
inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("softmax_rows expects [N x C] logits");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  auto ln = logits.node();
  std::vector<double> out(N * C);
  for (std::size_t r = 0; r < N; ++r) {
    const double* l = &ln->value[r * C];
    double m = l[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, l[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(l[c] - m);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = std::exp(l[c] - m) / z;
  }
  return detail::make_op("softmax", {N, C}, std::move(out), {ln}, [ln, N, C](TapeNode& self) {
    for (std::size_t r = 0; r < N; ++r) {
      const double* p = &self.value[r * C];
      const double* g = &self.grad[r * C];
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[c] * p[c];
      for (std::size_t c = 0; c < C; ++c) ln->grad[r * C + c] += p[c] * (g[c] - dot);
    }
  });
}

// Per-row negative log softmax probability of the true class.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy_rows expects [N x C] logits");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  check_labels(labels, N, C);
  auto ln = logits.node();
  std::vector<double> out(N);
  auto probs = std::make_shared<std::vector<double>>(N * C);  // saved for backward
  for (std::size_t r = 0; r < N; ++r) {
    const double* l = &ln->value[r * C];
    double m = l[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, l[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(l[c] - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(l[c] - m) / z;
    out[r] = lse - l[labels[r]];
  }
  return detail::make_op("ce_rows", {N}, std::move(out), {ln}, [ln, probs, labels, N, C](TapeNode& self) {
    for (std::size_t r = 0; r < N; ++r) {
      const double g = self.grad[r];
      for (std::size_t c = 0; c < C; ++c) {
        const double onehot = (static_cast<std::size_t>(labels[r]) == c) ? 1.0 : 0.0;
        ln->grad[r * C + c] += g * ((*probs)[r * C + c] - onehot);
      }
    }
  });
}

// Mean cross-entropy over the batch.
inline Tensor softmax_ce(const Tensor& logits, const std::vector<int>& labels) {
  return mean(cross_entropy_rows(logits, labels));
}

// Gathers logits[r, idx[r]].
inline Tensor select_class(const Tensor& logits, const std::vector<int>& idx) {
  if (logits.ndim() != 2) throw ShapeError("select_class expects [N x C] logits");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  check_labels(idx, N, C);
  auto ln = logits.node();
  std::vector<double> out(N);
  for (std::size_t r = 0; r < N; ++r) out[r] = ln->value[r * C + idx[r]];
  return detail::make_op("select_class", {N}, std::move(out), {ln}, [ln, idx, C](TapeNode& self) {
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      ln->grad[r * C + idx[r]] += self.grad[r];
    }
  });
}

// Per-row max over classes excluding one; gradient routes to the argmax
// (lowest index on ties).
inline Tensor row_max_excluding(const Tensor& logits, const std::vector<int>& excluded) {
  if (logits.ndim() != 2) throw ShapeError("row_max_excluding expects [N x C] logits");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  if (C < 2) throw ShapeError("row_max_excluding needs at least two classes");
  check_labels(excluded, N, C);
  auto ln = logits.node();
  std::vector<double> out(N);
  auto argmax = std::make_shared<std::vector<std::size_t>>(N);
  for (std::size_t r = 0; r < N; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (c == static_cast<std::size_t>(excluded[r])) continue;
      if (ln->value[r * C + c] > best) {
        best = ln->value[r * C + c];
        bi = c;
      }
    }
    out[r] = best;
    (*argmax)[r] = bi;
  }
  return detail::make_op("row_max_excl", {N}, std::move(out), {ln}, [ln, argmax, C](TapeNode& self) {
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      ln->grad[r * C + (*argmax)[r]] += self.grad[r];
    }
  });
}

// Prediction helper; lowest index wins ties.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("argmax_rows expects [N x C] logits");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  std::vector<int> out(N);
  for (std::size_t r = 0; r < N; ++r) {
    std::size_t bi = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (logits.at(r * C + c) > logits.at(r * C + bi)) bi = c;
    }
    out[r] = static_cast<int>(bi);
  }
  return out;
}

}  // namespace drl
