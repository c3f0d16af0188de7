#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "movie/common.hpp"

namespace movie {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapRM = Eigen::Map<const MatRM<S>>;

// One node in the reverse-mode tape. Gradients accumulate in-place; the
// trainer zeroes parameter grads between steps.
template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    n_ = std::make_shared<TensorNode<S>>();
    n_->shape = std::move(shape);
    n_->data = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<S>(numel(shape), S(0)),
                  requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, S(1)), requires_grad);
  }
  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, value), requires_grad);
  }
  static Tensor scalar(S value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<S>{value}, requires_grad);
  }

  // Fan-in scaled uniform init, limit = sqrt(3 / fan_in) (unit-variance /
  // fan_in), the convention for conv and FC weights here.
  static Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng,
                               bool requires_grad = true) {
    std::size_t n = numel(shape);
    // sqrt(6/fan): He-uniform, keeps activation variance roughly constant
    // through the relu stages
    double limit = std::sqrt(6.0 / double(std::max<std::size_t>(fan_in, 1)));
    std::vector<S> d(n);
    for (auto& v : d) v = S(rng.uniform(-limit, limit));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->data.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t ndim() const { return n_->shape.size(); }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<S>& data() { return n_->data; }
  const std::vector<S>& data() const { return n_->data; }
  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

  S item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->data[0];
  }

  std::shared_ptr<TensorNode<S>> node() const { return n_; }

  // Detached copy of the values (no tape edge).
  Tensor detached() const { return Tensor(n_->shape, n_->data, false); }

  // Cast to another precision (detached; used by the gradient-check suite).
  template <class T>
  Tensor<T> cast() const {
    std::vector<T> d(n_->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(n_->data[i]);
    return Tensor<T>(n_->shape, std::move(d), false);
  }

 private:
  std::shared_ptr<TensorNode<S>> n_;
};

namespace detail {

template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> data,
                      std::vector<Tensor<S>> parents,
                      std::function<void(TensorNode<S>&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  Tensor<S> out(std::move(shape), std::move(data), rg);
  if (rg) {
    auto node = out.node();
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return out;
}

// Numpy-style broadcast: align shapes on the right, extent-1 axes repeat,
// missing leading axes repeat.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per out-axis, 0 if broadcast
};

inline BroadcastPlan broadcast(const Shape& a, const Shape& b) {
  std::size_t nd = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.resize(nd);
  p.stride_a.assign(nd, 0);
  p.stride_b.assign(nd, 0);
  std::vector<std::size_t> ea(nd, 1), eb(nd, 1);
  for (std::size_t i = 0; i < a.size(); ++i) ea[nd - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) eb[nd - b.size() + i] = b[i];
  for (std::size_t i = 0; i < nd; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      throw ShapeError("incompatible shapes for broadcast: " + shape_str(a) +
                       " vs " + shape_str(b));
    p.out[i] = std::max(ea[i], eb[i]);
  }
  // Row-major strides in units of elements, zeroed along broadcast axes.
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = nd; i-- > 0;) {
    p.stride_a[i] = (ea[i] == 1 && p.out[i] != 1) ? 0 : sa;
    p.stride_b[i] = (eb[i] == 1 && p.out[i] != 1) ? 0 : sb;
    sa *= ea[i];
    sb *= eb[i];
  }
  return p;
}

// Visit every output element with the two source offsets.
template <class F>
void for_broadcast(const BroadcastPlan& p, F&& fn) {
  std::size_t n = numel(p.out);
  std::size_t nd = p.out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      idx[d]++;
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      idx[d] = 0;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
    }
  }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::broadcast(a.shape(), b.shape());
  std::vector<S> out(numel(plan.out));
  const auto& da = a.data();
  const auto& db = b.data();
  detail::for_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = da[ia] + db[ib];
  });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      plan.out, std::move(out), {a, b}, [plan, an, bn](TensorNode<S>& o) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        detail::for_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                        std::size_t ib) {
          if (an->requires_grad) an->grad[ia] += o.grad[i];
          if (bn->requires_grad) bn->grad[ib] += o.grad[i];
        });
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::broadcast(a.shape(), b.shape());
  std::vector<S> out(numel(plan.out));
  const auto& da = a.data();
  const auto& db = b.data();
  detail::for_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = da[ia] * db[ib];
  });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<S>(
      plan.out, std::move(out), {a, b}, [plan, an, bn](TensorNode<S>& o) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        detail::for_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                        std::size_t ib) {
          if (an->requires_grad) an->grad[ia] += o.grad[i] * bn->data[ib];
          if (bn->requires_grad) bn->grad[ib] += o.grad[i] * an->data[ia];
        });
      });
}

namespace detail {
template <class S, class Fwd, class Bwd>
Tensor<S> unary(const Tensor<S>& a, Fwd fwd, Bwd bwd) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto an = a.node();
  return make_result<S>(a.shape(), std::move(out), {a},
                        [an, bwd](TensorNode<S>& o) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < o.data.size(); ++i)
                            an->grad[i] += o.grad[i] * bwd(an->data[i], o.data[i]);
                        });
}
}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary(
      a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Tensor<S> tanh_op(const Tensor<S>& a) {
  return detail::unary(
      a, [](S x) { return std::tanh(x); },
      [](S, S y) { return S(1) - y * y; });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return detail::unary(
      a, [c](S x) { return c * x; }, [c](S, S) { return c; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S s = 0;
  for (S v : a.data()) s += v;
  auto an = a.node();
  return detail::make_result<S>(Shape{1}, {s}, {a}, [an](TensorNode<S>& o) {
    an->ensure_grad();
    for (auto& g : an->grad) g += o.grad[0];
  });
}

// ---- linear algebra --------------------------------------------------------

// x: ...xD_in flattened to MxD_in; y = x W (+ b). Realizes all FC layers.
template <class S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b = nullptr) {
  if (w.ndim() != 2)
    throw ShapeError("affine weight must be 2-d, got " + shape_str(w.shape()));
  std::size_t din = w.dim(0), dout = w.dim(1);
  if (x.ndim() < 1 || x.shape().back() != din)
    throw ShapeError("affine inner-dimension mismatch: x " +
                     shape_str(x.shape()) + " vs W " + shape_str(w.shape()));
  if (b && (b->ndim() != 1 || b->dim(0) != dout))
    throw ShapeError("affine bias must have shape [" + std::to_string(dout) +
                     "], got " + shape_str(b->shape()));
  std::size_t m = x.size() / din;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(dout);

  std::vector<S> out(m * dout);
  {
    CMapRM<S> X(x.data().data(), m, din);
    CMapRM<S> W(w.data().data(), din, dout);
    MapRM<S> Y(out.data(), m, dout);
    Y.noalias() = X * W;
    if (b) Y.rowwise() += Eigen::Map<const Eigen::RowVector<S, Eigen::Dynamic>>(
               b->data().data(), dout);
  }
  auto xn = x.node();
  auto wn = w.node();
  std::shared_ptr<TensorNode<S>> bn = b ? b->node() : nullptr;
  std::vector<Tensor<S>> parents = {x, w};
  if (b) parents.push_back(*b);
  return detail::make_result<S>(
      out_shape, std::move(out), parents,
      [m, din, dout, xn, wn, bn](TensorNode<S>& o) {
        CMapRM<S> G(o.grad.data(), m, dout);
        if (xn->requires_grad) {
          xn->ensure_grad();
          MapRM<S> dX(xn->grad.data(), m, din);
          CMapRM<S> W(wn->data.data(), din, dout);
          dX.noalias() += G * W.transpose();
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          MapRM<S> dW(wn->grad.data(), din, dout);
          CMapRM<S> X(xn->data.data(), m, din);
          dW.noalias() += X.transpose() * G;
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          Eigen::Map<Eigen::RowVector<S, Eigen::Dynamic>> dB(bn->grad.data(), dout);
          dB += G.colwise().sum();
        }
      });
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul expects 2-d operands: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  return affine(a, b);
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.ndim() != 2)
    throw ShapeError("transpose expects a 2-d tensor, got " + shape_str(a.shape()));
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<S> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto an = a.node();
  return detail::make_result<S>(Shape{c, r}, std::move(out), {a},
                                [r, c, an](TensorNode<S>& o) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                      an->grad[i * c + j] += o.grad[j * r + i];
                                });
}

// ---- convolution -----------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k,
                                   std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation with zero padding; im2col + GEMM.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (x.ndim() != 3)
    throw ShapeError("conv2d input must be CxHxW, got " + shape_str(x.shape()));
  if (kernel.ndim() != 4 || kernel.dim(1) != x.dim(0) ||
      kernel.dim(2) != kernel.dim(3))
    throw ShapeError("conv2d kernel must be C_out x C_in x k x k matching input " +
                     shape_str(x.shape()) + ", got " + shape_str(kernel.shape()));
  std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (k > h + 2 * padding || k > w + 2 * padding)
    throw ShapeError("conv2d kernel " + std::to_string(k) +
                     " larger than padded input " + shape_str(x.shape()) +
                     " with padding " + std::to_string(padding));
  std::size_t ho = conv_out_extent(h, k, stride, padding);
  std::size_t wo = conv_out_extent(w, k, stride, padding);

  std::size_t patch = cin * k * k;
  std::vector<S> cols(patch * ho * wo, S(0));
  const auto& xd = x.data();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        std::size_t row = (c * k + ki) * k + kj;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(padding);
          if (ii < 0 || ii >= std::ptrdiff_t(h)) continue;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(padding);
            if (jj < 0 || jj >= std::ptrdiff_t(w)) continue;
            cols[row * ho * wo + oi * wo + oj] = xd[(c * h + ii) * w + jj];
          }
        }
      }

  std::vector<S> out(cout * ho * wo);
  {
    CMapRM<S> K(kernel.data().data(), cout, patch);
    CMapRM<S> C(cols.data(), patch, ho * wo);
    MapRM<S> Y(out.data(), cout, ho * wo);
    Y.noalias() = K * C;
  }
  auto xn = x.node();
  auto kn = kernel.node();
  auto cols_keep = std::make_shared<std::vector<S>>(std::move(cols));
  return detail::make_result<S>(
      Shape{cout, ho, wo}, std::move(out), {x, kernel},
      [=](TensorNode<S>& o) {
        CMapRM<S> G(o.grad.data(), cout, ho * wo);
        if (kn->requires_grad) {
          kn->ensure_grad();
          MapRM<S> dK(kn->grad.data(), cout, patch);
          CMapRM<S> C(cols_keep->data(), patch, ho * wo);
          dK.noalias() += G * C.transpose();
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          MatRM<S> dcols(patch, ho * wo);
          CMapRM<S> K(kn->data.data(), cout, patch);
          dcols.noalias() = K.transpose() * G;
          // col2im scatter
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                std::size_t row = (c * k + ki) * k + kj;
                for (std::size_t oi = 0; oi < ho; ++oi) {
                  std::ptrdiff_t ii =
                      std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(padding);
                  if (ii < 0 || ii >= std::ptrdiff_t(h)) continue;
                  for (std::size_t oj = 0; oj < wo; ++oj) {
                    std::ptrdiff_t jj =
                        std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(padding);
                    if (jj < 0 || jj >= std::ptrdiff_t(w)) continue;
                    xn->grad[(c * h + ii) * w + jj] += dcols(row, oi * wo + oj);
                  }
                }
              }
        }
      });
}

// ---- pooling / normalization ----------------------------------------------

template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.ndim() != 3)
    throw ShapeError("global_avg_pool input must be CxHxW, got " +
                     shape_str(x.shape()));
  std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<S> out(c, S(0));
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < hw; ++j) out[i] += x.data()[i * hw + j];
    out[i] /= S(hw);
  }
  auto xn = x.node();
  return detail::make_result<S>(Shape{c}, std::move(out), {x},
                                [c, hw, xn](TensorNode<S>& o) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < c; ++i)
                                    for (std::size_t j = 0; j < hw; ++j)
                                      xn->grad[i * hw + j] += o.grad[i] / S(hw);
                                });
}

namespace detail {
// Shared normalization backward for one group of n values standardized to
// xhat and scaled by gain: dx = gain/s * (dy - mean(dy) - xhat*mean(dy*xhat)).
template <class S>
void norm_group_backward(const S* dy, const S* xhat, S gain, S inv_std,
                         std::size_t n, S* dx, S* dgain, S* dbias) {
  S mdy = 0, mdyx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mdy += dy[i];
    mdyx += dy[i] * xhat[i];
  }
  if (dgain) *dgain += mdyx;
  if (dbias) *dbias += mdy;
  mdy /= S(n);
  mdyx /= S(n);
  if (dx)
    for (std::size_t i = 0; i < n; ++i)
      dx[i] += gain * inv_std * (dy[i] - mdy - xhat[i] * mdyx);
}
}  // namespace detail

// Per-sample per-channel standardization over HxW, then per-channel affine.
template <class S>
Tensor<S> channel_norm(const Tensor<S>& x, const Tensor<S>& gain,
                       const Tensor<S>& bias, S eps = S(1e-5)) {
  if (x.ndim() != 3)
    throw ShapeError("channel_norm input must be CxHxW, got " +
                     shape_str(x.shape()));
  std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("channel_norm gain/bias must have length " +
                     std::to_string(c));
  std::vector<S> out(c * hw);
  auto xhat = std::make_shared<std::vector<S>>(c * hw);
  auto inv_std = std::make_shared<std::vector<S>>(c);
  for (std::size_t i = 0; i < c; ++i) {
    S mu = 0;
    for (std::size_t j = 0; j < hw; ++j) mu += x.data()[i * hw + j];
    mu /= S(hw);
    S var = 0;
    for (std::size_t j = 0; j < hw; ++j) {
      S d = x.data()[i * hw + j] - mu;
      var += d * d;
    }
    var /= S(hw);
    S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < hw; ++j) {
      S xh = (x.data()[i * hw + j] - mu) * is;
      (*xhat)[i * hw + j] = xh;
      out[i * hw + j] = gain.data()[i] * xh + bias.data()[i];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x, gain, bias}, [=](TensorNode<S>& o) {
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < c; ++i)
          detail::norm_group_backward<S>(
              o.grad.data() + i * hw, xhat->data() + i * hw, gn->data[i],
              (*inv_std)[i], hw,
              xn->requires_grad ? xn->grad.data() + i * hw : nullptr,
              gn->requires_grad ? &gn->grad[i] : nullptr,
              bn->requires_grad ? &bn->grad[i] : nullptr);
      });
}

// Layer normalization over the last axis of an NxD matrix.
template <class S>
Tensor<S> row_norm(const Tensor<S>& x, const Tensor<S>& gain,
                   const Tensor<S>& bias, S eps = S(1e-5)) {
  if (x.ndim() != 2)
    throw ShapeError("row_norm input must be NxD, got " + shape_str(x.shape()));
  std::size_t n = x.dim(0), d = x.dim(1);
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("row_norm gain/bias must have length " + std::to_string(d));
  std::vector<S> out(n * d);
  auto xhat = std::make_shared<std::vector<S>>(n * d);
  auto inv_std = std::make_shared<std::vector<S>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    S mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x.data()[r * d + j];
    mu /= S(d);
    S var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      S dd = x.data()[r * d + j] - mu;
      var += dd * dd;
    }
    var /= S(d);
    S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      S xh = (x.data()[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x, gain, bias}, [=](TensorNode<S>& o) {
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        // gain varies within a row group, so the group means are taken over
        // dxhat = dy * gain rather than dy alone
        for (std::size_t r = 0; r < n; ++r) {
          S mdxh = 0, mdxhx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            S dy = o.grad[r * d + j];
            S xh = (*xhat)[r * d + j];
            mdxh += dy * gn->data[j];
            mdxhx += dy * gn->data[j] * xh;
            if (gn->requires_grad) gn->grad[j] += dy * xh;
            if (bn->requires_grad) bn->grad[j] += dy;
          }
          mdxh /= S(d);
          mdxhx /= S(d);
          if (xn->requires_grad)
            for (std::size_t j = 0; j < d; ++j)
              xn->grad[r * d + j] += (*inv_std)[r] *
                                     (o.grad[r * d + j] * gn->data[j] - mdxh -
                                      (*xhat)[r * d + j] * mdxhx);
        }
      });
}

// ---- softmax / loss --------------------------------------------------------

// Softmax over the last axis; positions with mask=0 receive zero weight.
// 1-d input: mask over its entries. 2-d input: mask over columns, applied to
// every row. At least one position must be unmasked.
template <class S>
Tensor<S> masked_softmax(const Tensor<S>& x, const std::vector<char>& mask) {
  std::size_t d = x.shape().back();
  if (mask.size() != d)
    throw ShapeError("mask length " + std::to_string(mask.size()) +
                     " does not match softmax axis " + std::to_string(d));
  bool any = false;
  for (char m : mask) any = any || (m != 0);
  if (!any) throw ContractError("masked_softmax: all positions masked");
  std::size_t rows = x.size() / d;
  std::vector<S> out(x.size(), S(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data().data() + r * d;
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < d; ++j)
      if (mask[j] && xr[j] > mx) mx = xr[j];
    S z = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (mask[j]) z += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < d; ++j)
      if (mask[j]) out[r * d + j] = std::exp(xr[j] - mx) / z;
  }
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x}, [rows, d, xn](TensorNode<S>& o) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          S dot = 0;
          for (std::size_t j = 0; j < d; ++j)
            dot += o.grad[r * d + j] * o.data[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            xn->grad[r * d + j] +=
                o.data[r * d + j] * (o.grad[r * d + j] - dot);
        }
      });
}

// -log softmax(logits)[target], max-subtracted for stability.
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::size_t target) {
  if (logits.ndim() != 1)
    throw ShapeError("softmax_cross_entropy expects 1-d logits, got " +
                     shape_str(logits.shape()));
  std::size_t k = logits.dim(0);
  if (target >= k)
    throw ContractError("softmax_cross_entropy target " + std::to_string(target) +
                        " out of range [0, " + std::to_string(k) + ")");
  S mx = *std::max_element(logits.data().begin(), logits.data().end());
  S z = 0;
  for (S v : logits.data()) z += std::exp(v - mx);
  S loss = std::log(z) - (logits.data()[target] - mx);
  auto ln = logits.node();
  return detail::make_result<S>(
      Shape{1}, {loss}, {logits}, [k, target, ln](TensorNode<S>& o) {
        ln->ensure_grad();
        S mx = *std::max_element(ln->data.begin(), ln->data.end());
        S z = 0;
        for (S v : ln->data) z += std::exp(v - mx);
        for (std::size_t j = 0; j < k; ++j) {
          S p = std::exp(ln->data[j] - mx) / z;
          ln->grad[j] += o.grad[0] * (p - (j == target ? S(1) : S(0)));
        }
      });
}

// ---- reshaping / gathering -------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  auto xn = x.node();
  return detail::make_result<S>(std::move(shape), x.data(), {x},
                                [xn](TensorNode<S>& o) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    xn->grad[i] += o.grad[i];
                                });
}

// Gather rows of an embedding table; gradient flows only to looked-up rows.
template <class S>
Tensor<S> embedding_rows(const Tensor<S>& table, const std::vector<std::size_t>& ids) {
  if (table.ndim() != 2)
    throw ShapeError("embedding table must be VxE, got " + shape_str(table.shape()));
  std::size_t v = table.dim(0), e = table.dim(1);
  for (std::size_t id : ids)
    if (id >= v)
      throw ContractError("embedding id " + std::to_string(id) +
                          " out of vocabulary of size " + std::to_string(v));
  std::vector<S> out(ids.size() * e);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + ids[i] * e, e, out.data() + i * e);
  auto tn = table.node();
  auto n = ids.size();
  return detail::make_result<S>(Shape{n, e}, std::move(out), {table},
                                [ids, e, tn](TensorNode<S>& o) {
                                  tn->ensure_grad();
                                  for (std::size_t i = 0; i < ids.size(); ++i)
                                    for (std::size_t j = 0; j < e; ++j)
                                      tn->grad[ids[i] * e + j] += o.grad[i * e + j];
                                });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, std::size_t start, std::size_t count) {
  if (x.ndim() != 2 || start + count > x.dim(0))
    throw ShapeError("slice_rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " +
                     shape_str(x.shape()));
  std::size_t d = x.dim(1);
  std::vector<S> out(x.data().begin() + start * d,
                     x.data().begin() + (start + count) * d);
  auto xn = x.node();
  return detail::make_result<S>(Shape{count, d}, std::move(out), {x},
                                [start, d, xn](TensorNode<S>& o) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    xn->grad[start * d + i] += o.grad[i];
                                });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t start, std::size_t count) {
  if (x.ndim() != 2 || start + count > x.dim(1))
    throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " +
                     shape_str(x.shape()));
  std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<S> out(n * count);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(x.data().data() + r * d + start, count, out.data() + r * count);
  auto xn = x.node();
  return detail::make_result<S>(Shape{n, count}, std::move(out), {x},
                                [n, d, start, count, xn](TensorNode<S>& o) {
                                  xn->ensure_grad();
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t j = 0; j < count; ++j)
                                      xn->grad[r * d + start + j] +=
                                          o.grad[r * count + j];
                                });
}

// Concatenate 2-d blocks (or 1-d vectors treated as single rows) along rows.
template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  std::size_t d = parts[0].shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.shape().back() != d)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    rows += p.ndim() == 1 ? 1 : p.dim(0);
  }
  std::vector<S> out;
  out.reserve(rows * d);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<S>(Shape{rows, d}, std::move(out), parts,
                                [nodes](TensorNode<S>& o) {
                                  std::size_t off = 0;
                                  for (auto& pn : nodes) {
                                    if (pn->requires_grad) {
                                      pn->ensure_grad();
                                      for (std::size_t i = 0; i < pn->data.size(); ++i)
                                        pn->grad[i] += o.grad[off + i];
                                    }
                                    off += pn->data.size();
                                  }
                                });
}

// Concatenate 1-d vectors into one 1-d vector.
template <class S>
Tensor<S> concat_vec(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_vec: empty input");
  std::vector<S> out;
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  std::size_t n = out.size();
  return detail::make_result<S>(Shape{n}, std::move(out), parts,
                                [nodes](TensorNode<S>& o) {
                                  std::size_t off = 0;
                                  for (auto& pn : nodes) {
                                    if (pn->requires_grad) {
                                      pn->ensure_grad();
                                      for (std::size_t i = 0; i < pn->data.size(); ++i)
                                        pn->grad[i] += o.grad[off + i];
                                    }
                                    off += pn->data.size();
                                  }
                                });
}

// ---- backward --------------------------------------------------------------

// Reverse topological accumulation from a scalar loss. Gradients accumulate
// into existing grad buffers; callers reset between steps.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward requires a scalar loss, got " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // interior grads are scratch per call; only leaves accumulate across calls
  for (auto* node : order)
    if (node->backprop) node->grad.assign(node->data.size(), S(0));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

}  // namespace movie
