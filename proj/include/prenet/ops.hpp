#ifndef PRENET_OPS_HPP
#define PRENET_OPS_HPP

#include "prenet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace prenet {

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

// (outer, len, inner) factorisation of a shape around one axis.
struct AxisView {
  Index outer = 1, len = 1, inner = 1;
};
inline AxisView axis_view(const Shape& s, Index axis) {
  AxisView v;
  for (Index i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) v.inner *= s[i];
  return v;
}

struct ConvGeometry {
  Index channels, height, width, kernel, stride, pad, out_h, out_w;
};

template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols) {
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.channels; ++c)
    for (Index ki = 0; ki < g.kernel; ++ki)
      for (Index kj = 0; kj < g.kernel; ++kj) {
        Scalar* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        const Scalar* src = img + c * g.height * g.width;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          Scalar* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            dst[ow] = (iw < 0 || iw >= g.width) ? Scalar(0) : src[ih * g.width + iw];
          }
        }
      }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* img) {
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.channels; ++c)
    for (Index ki = 0; ki < g.kernel; ++ki)
      for (Index kj = 0; kj < g.kernel; ++kj) {
        const Scalar* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        Scalar* dst = img + c * g.height * g.width;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.width) dst[ih * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " +
                                              shape_string(b.shape()));
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = self.parent_grad(i)) g->array() += self.grad->array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() * factor;
  return make_result<Scalar>(std::move(out), {a}, [factor](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) g->array() += self.grad->array() * factor;
  });
}

/// a*x + b*y for same-shape inputs.
template <typename Scalar>
Var<Scalar> axpby(Scalar a, const Var<Scalar>& x, Scalar b, const Var<Scalar>& y) {
  detail::require(x.shape() == y.shape(), "axpby: shape mismatch");
  Tensor<Scalar> out(x.shape());
  out.array() = a * x.value().array() + b * y.value().array();
  return make_result<Scalar>(std::move(out), {x, y}, [a, b](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) g->array() += a * self.grad->array();
    if (auto* g = self.parent_grad(1)) g->array() += b * self.grad->array();
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().max(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0))
      g->array() += (self.parents[0]->value.array() > Scalar(0)).select(self.grad->array(), Scalar(0));
  });
}

/// Exponential-linear unit with unit scale.
template <typename Scalar>
Var<Scalar> elu(const Var<Scalar>& x) {
  const auto& xv = x.value().array();
  Tensor<Scalar> out(x.shape());
  out.array() = (xv > Scalar(0)).select(xv, xv.exp() - Scalar(1));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) {
      const auto& in = self.parents[0]->value.array();
      g->array() += self.grad->array() * (in > Scalar(0)).select(Tensor<Scalar>::Array::Ones(in.size()), in.exp());
    }
  });
}

/// Sum of x * weights (weights constant); scalar output.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights) {
  detail::require(x.shape() == weights.shape(), "weighted_sum: shape mismatch");
  Tensor<Scalar> out = Tensor<Scalar>::scalar((x.value().array() * weights.array()).sum());
  return make_result<Scalar>(std::move(out), {x}, [weights](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) g->array() += weights.array() * self.grad->item();
  });
}

// ---------------------------------------------------------------------------
// Shape

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) g->array() += self.grad->array();
  });
}

/// (N, A, B) -> (N, B, A).
template <typename Scalar>
Var<Scalar> transpose12(const Var<Scalar>& x) {
  detail::require(x.value().rank() == 3, "transpose12 expects a rank-3 tensor");
  const Index n = x.dim(0), a = x.dim(1), b = x.dim(2);
  Tensor<Scalar> out({n, b, a});
  for (Index i = 0; i < n; ++i)
    MatrixMap<Scalar>(out.data() + i * a * b, b, a) = ConstMatrixMap<Scalar>(x.value().data() + i * a * b, a, b).transpose();
  return make_result<Scalar>(std::move(out), {x}, [n, a, b](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0))
      for (Index i = 0; i < n; ++i)
        MatrixMap<Scalar>(g->data() + i * a * b, a, b) +=
            ConstMatrixMap<Scalar>(self.grad->data() + i * a * b, b, a).transpose();
  });
}

/// Concatenation along `axis`; every other extent must agree.
template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& xs, Index axis) {
  detail::require(!xs.empty(), "concat of an empty list");
  Shape shape = xs.front().shape();
  Index total = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    detail::require(s.size() == shape.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<Index>(i) != axis)
        detail::require(s[i] == shape[i], "concat: extent mismatch on axis " + std::to_string(i) + ": " +
                                              shape_string(s) + " vs " + shape_string(shape));
    total += s[axis];
  }
  shape[axis] = total;
  Tensor<Scalar> out(shape);
  const auto view = detail::axis_view(shape, axis);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const Index chunk = x.dim(axis) * view.inner;
    for (Index o = 0; o < view.outer; ++o)
      std::copy_n(x.value().data() + o * chunk, chunk, out.data() + o * total * view.inner + off * view.inner);
    off += x.dim(axis);
  }
  std::vector<Index> lens;
  for (const auto& x : xs) lens.push_back(x.dim(axis));
  return make_result<Scalar>(std::move(out), xs, [view, total, offsets, lens](Node<Scalar>& self) {
    for (std::size_t k = 0; k < lens.size(); ++k) {
      auto* g = self.parent_grad(k);
      if (!g) continue;
      const Index chunk = lens[k] * view.inner;
      for (Index o = 0; o < view.outer; ++o) {
        const Scalar* src = self.grad->data() + o * total * view.inner + offsets[k] * view.inner;
        Scalar* dst = g->data() + o * chunk;
        for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Mean over one axis (axis removed).
template <typename Scalar>
Var<Scalar> mean_axis(const Var<Scalar>& x, Index axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  Tensor<Scalar> out(shape);
  const Scalar inv = v.len > 0 ? Scalar(1) / Scalar(v.len) : Scalar(0);
  for (Index o = 0; o < v.outer; ++o)
    for (Index l = 0; l < v.len; ++l)
      for (Index i = 0; i < v.inner; ++i) out[o * v.inner + i] += x.value()[(o * v.len + l) * v.inner + i] * inv;
  return make_result<Scalar>(std::move(out), {x}, [v, inv](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0))
      for (Index o = 0; o < v.outer; ++o)
        for (Index l = 0; l < v.len; ++l)
          for (Index i = 0; i < v.inner; ++i) (*g)[(o * v.len + l) * v.inner + i] += (*self.grad)[o * v.inner + i] * inv;
  });
}

/// Max over one axis (axis removed). Ties resolve to the first position;
/// the gradient is routed to that position only.
template <typename Scalar>
Var<Scalar> max_axis(const Var<Scalar>& x, Index axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  detail::require(v.len > 0 || v.outer * v.inner == 0, "max over an empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  Tensor<Scalar> out(shape);
  std::vector<Index> arg(static_cast<std::size_t>(v.outer * v.inner), 0);
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      Index best = 0;
      Scalar bv = x.value()[o * v.len * v.inner + i];
      for (Index l = 1; l < v.len; ++l) {
        const Scalar c = x.value()[(o * v.len + l) * v.inner + i];
        if (c > bv) bv = c, best = l;
      }
      out[o * v.inner + i] = bv;
      arg[o * v.inner + i] = best;
    }
  return make_result<Scalar>(std::move(out), {x}, [v, arg = std::move(arg)](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0))
      for (Index o = 0; o < v.outer; ++o)
        for (Index i = 0; i < v.inner; ++i)
          (*g)[(o * v.len + arg[o * v.inner + i]) * v.inner + i] += (*self.grad)[o * v.inner + i];
  });
}

/// (N, C, H, W) -> (N, C) spatial mean.
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  detail::require(x.value().rank() == 4, "global_avg_pool expects NCHW");
  return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

/// (N, C, H, W) -> (N, C) spatial max.
template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& x) {
  detail::require(x.value().rank() == 4, "global_max_pool expects NCHW");
  return max_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

/// Adaptive average pooling of NCHW to (out_h, out_w) with bins
/// [floor(i*H/out), ceil((i+1)*H/out)).
template <typename Scalar>
Var<Scalar> adaptive_avg_pool(const Var<Scalar>& x, Index out_h, Index out_w) {
  detail::require(x.value().rank() == 4, "adaptive_avg_pool expects NCHW");
  detail::require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: output size must be positive");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(h >= 1 && w >= 1, "adaptive_avg_pool: empty spatial extent");
  auto lo = [](Index i, Index in, Index out) { return (i * in) / out; };
  auto hi = [](Index i, Index in, Index out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<Scalar> out({x.dim(0), x.dim(1), out_h, out_w});
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = x.value().data() + p * h * w;
    for (Index i = 0; i < out_h; ++i)
      for (Index j = 0; j < out_w; ++j) {
        const Index h0 = lo(i, h, out_h), h1 = hi(i, h, out_h), w0 = lo(j, w, out_w), w1 = hi(j, w, out_w);
        Scalar acc = 0;
        for (Index a = h0; a < h1; ++a)
          for (Index b = w0; b < w1; ++b) acc += src[a * w + b];
        out[(p * out_h + i) * out_w + j] = acc / Scalar((h1 - h0) * (w1 - w0));
      }
  }
  return make_result<Scalar>(std::move(out), {x}, [=](Node<Scalar>& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (Index p = 0; p < planes; ++p)
      for (Index i = 0; i < out_h; ++i)
        for (Index j = 0; j < out_w; ++j) {
          const Index h0 = lo(i, h, out_h), h1 = hi(i, h, out_h), w0 = lo(j, w, out_w), w1 = hi(j, w, out_w);
          const Scalar share = (*self.grad)[(p * out_h + i) * out_w + j] / Scalar((h1 - h0) * (w1 - w0));
          for (Index a = h0; a < h1; ++a)
            for (Index b = w0; b < w1; ++b) (*g)[p * h * w + a * w + b] += share;
        }
  });
}

/// k x k max pooling with stride and implicit -inf padding.
template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel, Index stride, Index pad) {
  detail::require(x.value().rank() == 4, "max_pool2d expects NCHW");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = (h + 2 * pad - kernel) / stride + 1, ow = (w + 2 * pad - kernel) / stride + 1;
  detail::require(oh >= 1 && ow >= 1, "max_pool2d: input " + std::to_string(h) + "x" + std::to_string(w) + " too small");
  Tensor<Scalar> out({x.dim(0), x.dim(1), oh, ow});
  std::vector<Index> arg(static_cast<std::size_t>(out.size()));
  for (Index p = 0; p < planes; ++p)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index where = -1;
        for (Index a = 0; a < kernel; ++a)
          for (Index b = 0; b < kernel; ++b) {
            const Index ih = i * stride - pad + a, iw = j * stride - pad + b;
            if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
            const Index idx = p * h * w + ih * w + iw;
            if (where < 0 || x.value()[idx] > best) best = x.value()[idx], where = idx;
          }
        const Index o = (p * oh + i) * ow + j;
        out[o] = best;
        arg[o] = where;
      }
  return make_result<Scalar>(std::move(out), {x}, [arg = std::move(arg)](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0))
      for (std::size_t o = 0; o < arg.size(); ++o) (*g)[arg[o]] += (*self.grad)[static_cast<Index>(o)];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// y = x W^T + b over the last axis of x. W is (out, in); bias may be undefined.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Index in = weight.dim(1), out_f = weight.dim(0);
  detail::require(x.value().rank() >= 1 && x.dim(-1) == in,
                  "linear: input " + shape_string(x.shape()) + " does not match weight " + shape_string(weight.shape()));
  const Index rows = x.value().size() / std::max<Index>(in, 1);
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor<Scalar> out(shape);
  auto y = out.matrix(rows, out_f);
  y.noalias() = x.value().matrix(rows, in) * weight.value().matrix(out_f, in).transpose();
  if (bias.defined()) y.rowwise() += bias.value().matrix(1, out_f).row(0);
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [rows, in, out_f](Node<Scalar>& self) {
    auto gy = std::as_const(*self.grad).matrix(rows, out_f);
    if (auto* g = self.parent_grad(0)) g->matrix(rows, in).noalias() += gy * self.parents[1]->value.matrix(out_f, in);
    if (auto* g = self.parent_grad(1))
      g->matrix(out_f, in).noalias() += gy.transpose() * self.parents[0]->value.matrix(rows, in);
    if (auto* g = self.parent_grad(2)) g->matrix(1, out_f) += gy.colwise().sum();
  });
}

/// Batched product of rank-3 tensors: (N,L,K) x (N,K,M), or (N,L,K) x (N,M,K)^T.
template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b) {
  detail::require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0), "bmm: rank-3 batch mismatch");
  const Index n = a.dim(0), l = a.dim(1), k = a.dim(2);
  const Index m = transpose_b ? b.dim(1) : b.dim(2);
  detail::require((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm: inner dimension mismatch");
  Tensor<Scalar> out({n, l, m});
  for (Index i = 0; i < n; ++i) {
    ConstMatrixMap<Scalar> am(a.value().data() + i * l * k, l, k);
    MatrixMap<Scalar> om(out.data() + i * l * m, l, m);
    if (transpose_b)
      om.noalias() = am * ConstMatrixMap<Scalar>(b.value().data() + i * m * k, m, k).transpose();
    else
      om.noalias() = am * ConstMatrixMap<Scalar>(b.value().data() + i * k * m, k, m);
  }
  return make_result<Scalar>(std::move(out), {a, b}, [=](Node<Scalar>& self) {
    auto* ga = self.parent_grad(0);
    auto* gb = self.parent_grad(1);
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (Index i = 0; i < n; ++i) {
      ConstMatrixMap<Scalar> go(self.grad->data() + i * l * m, l, m);
      ConstMatrixMap<Scalar> am(av.data() + i * l * k, l, k);
      if (transpose_b) {
        ConstMatrixMap<Scalar> bm(bv.data() + i * m * k, m, k);
        if (ga) MatrixMap<Scalar>(ga->data() + i * l * k, l, k).noalias() += go * bm;
        if (gb) MatrixMap<Scalar>(gb->data() + i * m * k, m, k).noalias() += go.transpose() * am;
      } else {
        ConstMatrixMap<Scalar> bm(bv.data() + i * k * m, k, m);
        if (ga) MatrixMap<Scalar>(ga->data() + i * l * k, l, k).noalias() += go * bm.transpose();
        if (gb) MatrixMap<Scalar>(gb->data() + i * k * m, k, m).noalias() += am.transpose() * go;
      }
    }
  });
}

/// 2-d convolution of NCHW input with (out, in, k, k) weights.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Index stride, Index pad) {
  detail::require(x.value().rank() == 4, "conv2d expects NCHW input, got " + shape_string(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oc = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == c, "conv2d: input has " + std::to_string(c) + " channels, weight expects " +
                                          std::to_string(weight.dim(1)));
  const detail::ConvGeometry geo{c, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1};
  detail::require(geo.out_h >= 1 && geo.out_w >= 1, "conv2d: input " + std::to_string(h) + "x" + std::to_string(w) +
                                                        " smaller than kernel " + std::to_string(k));
  const Index plane = geo.out_h * geo.out_w, patch = c * k * k;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  Tensor<Scalar> out({n, oc, geo.out_h, geo.out_w});
  RowMatrix<Scalar> cols(pointwise ? 0 : patch, pointwise ? 0 : plane);
  auto wm = weight.value().matrix(oc, patch);
  for (Index i = 0; i < n; ++i) {
    const Scalar* img = x.value().data() + i * c * h * w;
    MatrixMap<Scalar> om(out.data() + i * oc * plane, oc, plane);
    if (pointwise) {
      om.noalias() = wm * ConstMatrixMap<Scalar>(img, c, plane);
    } else {
      detail::im2col(img, geo, cols.data());
      om.noalias() = wm * cols;
    }
    if (bias.defined()) om.colwise() += bias.value().matrix(oc, 1).col(0);
  }
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [=](Node<Scalar>& self) {
    auto* gx = self.parent_grad(0);
    auto* gw = self.parent_grad(1);
    auto* gb = self.parent_grad(2);
    const auto& xv = self.parents[0]->value;
    auto wmat = self.parents[1]->value.matrix(oc, patch);
    RowMatrix<Scalar> buf(pointwise ? 0 : patch, pointwise ? 0 : plane);
    RowMatrix<Scalar> dcols(pointwise ? 0 : patch, pointwise ? 0 : plane);
    for (Index i = 0; i < n; ++i) {
      ConstMatrixMap<Scalar> go(self.grad->data() + i * oc * plane, oc, plane);
      const Scalar* img = xv.data() + i * c * h * w;
      if (gb) gb->matrix(oc, 1).col(0) += go.rowwise().sum();
      if (pointwise) {
        if (gw) gw->matrix(oc, patch).noalias() += go * ConstMatrixMap<Scalar>(img, c, plane).transpose();
        if (gx) MatrixMap<Scalar>(gx->data() + i * c * h * w, c, plane).noalias() += wmat.transpose() * go;
      } else {
        if (gw) {
          detail::im2col(img, geo, buf.data());
          gw->matrix(oc, patch).noalias() += go * buf.transpose();
        }
        if (gx) {
          dcols.noalias() = wmat.transpose() * go;
          detail::col2im(dcols.data(), geo, gx->data() + i * c * h * w);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Running statistics of a batch-normalisation layer.
template <typename Scalar>
struct NormStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

/// Per-channel normalisation over axes {0, 2, 3, ...} of an (N, C, ...) input.
/// Training mode normalises with batch statistics and updates `stats`
/// (unbiased running variance); eval mode uses `stats`.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, NormStats<Scalar>& stats,
                       bool training, Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
  detail::require(x.value().rank() >= 2, "batch_norm expects (N, C, ...)");
  const Index n = x.dim(0), c = x.dim(1);
  detail::require(gamma.dim(0) == c, "batch_norm: channel mismatch " + std::to_string(c) + " vs " +
                                         std::to_string(gamma.dim(0)));
  const Index inner = n == 0 ? 0 : x.value().size() / (n * c);
  const Index count = n * inner;
  Vector<Scalar> mean = Vector<Scalar>::Zero(c), invstd(c);
  auto at = [&](Index b, Index ch) { return x.value().data() + (b * c + ch) * inner; };
  if (training && count > 0) {
    Vector<Scalar> var = Vector<Scalar>::Zero(c);
    for (Index ch = 0; ch < c; ++ch) {
      Scalar s = 0;
      for (Index b = 0; b < n; ++b) s += Eigen::Map<const Vector<Scalar>>(at(b, ch), inner).sum();
      mean(ch) = s / Scalar(count);
      Scalar v = 0;
      for (Index b = 0; b < n; ++b) v += (Eigen::Map<const Vector<Scalar>>(at(b, ch), inner).array() - mean(ch)).square().sum();
      var(ch) = v / Scalar(count);
    }
    invstd = (var.array() + eps).rsqrt();
    const Scalar unbias = count > 1 ? Scalar(count) / Scalar(count - 1) : Scalar(1);
    stats.mean.array() = (Scalar(1) - momentum) * stats.mean.array() + momentum * mean.array();
    stats.var.array() = (Scalar(1) - momentum) * stats.var.array() + momentum * unbias * var.array();
  } else {
    mean = Eigen::Map<const Vector<Scalar>>(stats.mean.data(), c);
    invstd = (Eigen::Map<const Vector<Scalar>>(stats.var.data(), c).array() + eps).rsqrt();
  }
  const bool batch_stats = training && count > 0;
  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> out(x.shape());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * inner;
      xhat.array().segment(off, inner) = (x.value().array().segment(off, inner) - mean(ch)) * invstd(ch);
      out.array().segment(off, inner) = xhat.array().segment(off, inner) * gamma.value()[ch] + beta.value()[ch];
    }
  return make_result<Scalar>(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat)](Node<Scalar>& self) {
        const auto& g = *self.grad;
        const auto& gam = self.parents[1]->value;
        auto* gx = self.parent_grad(0);
        auto* gg = self.parent_grad(1);
        auto* gbeta = self.parent_grad(2);
        for (Index ch = 0; ch < c; ++ch) {
          Scalar sum_g = 0, sum_gx = 0;
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * inner;
            sum_g += g.array().segment(off, inner).sum();
            sum_gx += (g.array().segment(off, inner) * xhat.array().segment(off, inner)).sum();
          }
          if (gg) (*gg)[ch] += sum_gx;
          if (gbeta) (*gbeta)[ch] += sum_g;
          if (!gx) continue;
          const Scalar k = gam[ch] * invstd(ch);
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * inner;
            if (batch_stats)
              gx->array().segment(off, inner) +=
                  k * (g.array().segment(off, inner) - sum_g / Scalar(count) -
                       xhat.array().segment(off, inner) * (sum_gx / Scalar(count)));
            else
              gx->array().segment(off, inner) += k * g.array().segment(off, inner);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Probabilities

/// Row softmax over the last axis (max-shifted).
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits) {
  Tensor<Scalar> out(logits.shape());
  if (logits.size() == 0) return out;
  auto x = logits.matrix();
  auto y = out.matrix();
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mx = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& logits) {
  return make_result<Scalar>(softmax_rows(logits.value()), {logits}, [](Node<Scalar>& self) {
    if (auto* g = self.parent_grad(0)) {
      auto y = self.value.matrix();
      auto go = std::as_const(*self.grad).matrix();
      Vector<Scalar> dot = (go.array() * y.array()).rowwise().sum();
      g->matrix().array() += y.array() * (go.array().colwise() - dot.array());
    }
  });
}

/// Mean over rows of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  detail::require(logits.value().rank() == 2, "cross_entropy expects (batch, classes) logits");
  const Index n = logits.dim(0), c = logits.dim(1);
  detail::require(static_cast<Index>(labels.size()) == n, "cross_entropy: " + std::to_string(labels.size()) +
                                                               " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    detail::require(y >= 0 && y < c, "label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
  Tensor<Scalar> probs = softmax_rows(logits.value());
  auto x = logits.value().matrix();
  Scalar total = 0;
  for (Index r = 0; r < n; ++r) {
    const Scalar mx = x.row(r).maxCoeff();
    const Scalar lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    total += lse - x(r, labels[static_cast<std::size_t>(r)]);
  }
  const Scalar inv = n > 0 ? Scalar(1) / Scalar(n) : Scalar(0);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<Scalar>(Tensor<Scalar>::scalar(total * inv), {logits},
                             [probs = std::move(probs), lab = std::move(lab), inv](Node<Scalar>& self) {
                               if (auto* g = self.parent_grad(0)) {
                                 const Scalar s = self.grad->item() * inv;
                                 auto gm = g->matrix();
                                 auto pm = probs.matrix();
                                 for (Index r = 0; r < gm.rows(); ++r) {
                                   gm.row(r) += s * pm.row(r);
                                   gm(r, lab[static_cast<std::size_t>(r)]) -= s;
                                 }
                               }
                             });
}

/// Batch-mean KL(p || q) over rows; probabilities are floored at `floor`
/// inside the logarithm and terms with p = 0 vanish.
template <typename Scalar>
Var<Scalar> kl_divergence(const Var<Scalar>& p, const Var<Scalar>& q, Scalar floor = Scalar(1e-12)) {
  detail::require(p.shape() == q.shape() && p.value().rank() == 2, "kl_divergence: shape mismatch");
  const Index n = p.dim(0);
  const auto& pa = p.value().array();
  const auto& qa = q.value().array();
  const auto logp = pa.max(floor).log();
  const auto logq = qa.max(floor).log();
  const Scalar inv = n > 0 ? Scalar(1) / Scalar(n) : Scalar(0);
  const Scalar value = (pa * (logp - logq)).sum() * inv;
  return make_result<Scalar>(Tensor<Scalar>::scalar(value), {p, q}, [inv, floor](Node<Scalar>& self) {
    const Scalar s = self.grad->item() * inv;
    const auto& pv = self.parents[0]->value.array();
    const auto& qv = self.parents[1]->value.array();
    if (auto* g = self.parent_grad(0))
      g->array() += s * (pv.max(floor).log() - qv.max(floor).log() + (pv > floor).template cast<Scalar>());
    if (auto* g = self.parent_grad(1)) g->array() -= s * (qv > floor).select(pv / qv.max(floor), Scalar(0));
  });
}

}  // namespace prenet

#endif  // PRENET_OPS_HPP
