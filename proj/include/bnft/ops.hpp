#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/rng.hpp"
#include "bnft/tensor.hpp"

namespace bnft {

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  bool any = false;
  for (const auto* in : inputs) {
    if (in->requires_grad()) {
      any = true;
      out.node()->parents.push_back(in->node());
    }
  }
  if (any) {
    out.node()->requires_grad = true;
    out.node()->backward = std::move(backward);
  }
  return out;
}

// Row-major strides of `in` viewed inside `out` under trailing alignment;
// broadcast dimensions get stride 0.
inline std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t din = in[in.size() - 1 - k];
    const std::size_t pos = out.size() - 1 - k;
    strides[pos] = (din == 1 && out[pos] != 1) ? 0 : stride;
    stride *= din;
  }
  return strides;
}

// Calls f(flat_index, mapped_index) for every element of `shape`, where the
// mapped index is computed from `strides`.
template <class F>
void walk(const Shape& shape, const std::vector<std::size_t>& strides, F&& f) {
  const std::size_t total = numel(shape);
  const std::size_t r = shape.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t j = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, j);
    std::size_t d = r - 1;
    ++idx[d];
    j += strides[d];
    while (idx[d] == shape[d] && d > 0) {
      j -= strides[d] * shape[d];
      idx[d] = 0;
      --d;
      ++idx[d];
      j += strides[d];
    }
  }
}

inline Shape strip_leading_ones(const Shape& s) {
  std::size_t k = 0;
  while (k < s.size() && s[k] == 1) ++k;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
}

inline bool is_trailing_suffix(const Shape& small, const Shape& big) {
  const Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

struct BroadcastPlan {
  enum class Kind { Same, BSuffix, ASuffix, General };
  Shape out;
  Kind kind = Kind::General;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> sa, sb;
};

// Calls f(io, ia, ib) over the broadcast output.
template <class F>
void broadcast_for_each(const BroadcastPlan& plan, F&& f) {
  const std::size_t total = numel(plan.out);
  switch (plan.kind) {
    case BroadcastPlan::Kind::Same:
      for (std::size_t i = 0; i < total; ++i) f(i, i, i);
      return;
    case BroadcastPlan::Kind::BSuffix:
      for (std::size_t i = 0, j = 0; i < total; ++i) {
        f(i, i, j);
        if (++j == plan.nb) j = 0;
      }
      return;
    case BroadcastPlan::Kind::ASuffix:
      for (std::size_t i = 0, j = 0; i < total; ++i) {
        f(i, j, i);
        if (++j == plan.na) j = 0;
      }
      return;
    case BroadcastPlan::Kind::General:
      break;
  }
  const std::size_t r = plan.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    std::size_t d = r - 1;
    ++idx[d];
    ia += plan.sa[d];
    ib += plan.sb[d];
    while (idx[d] == plan.out[d] && d > 0) {
      ia -= plan.sa[d] * plan.out[d];
      ib -= plan.sb[d] * plan.out[d];
      idx[d] = 0;
      --d;
      ++idx[d];
      ia += plan.sa[d];
      ib += plan.sb[d];
    }
  }
}

}  // namespace detail

// Standard trailing-dimension broadcasting.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

namespace detail {

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shapes(a, b);
  plan.na = numel(a);
  plan.nb = numel(b);
  if (a == b) {
    plan.kind = BroadcastPlan::Kind::Same;
  } else if (numel(a) == numel(plan.out) && is_trailing_suffix(b, plan.out)) {
    plan.kind = BroadcastPlan::Kind::BSuffix;
  } else if (numel(b) == numel(plan.out) && is_trailing_suffix(a, plan.out)) {
    plan.kind = BroadcastPlan::Kind::ASuffix;
  } else {
    plan.sa = aligned_strides(a, plan.out);
    plan.sb = aligned_strides(b, plan.out);
  }
  return plan;
}

// z = f(x, y) elementwise with broadcasting. dfx/dfy give the partials given
// (x, y, z).
template <class T, class F, class DX, class DY>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, DX dfx, DY dfy) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  broadcast_for_each(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { out[io] = f(pa[ia], pb[ib]); });
  auto na = a.node();
  auto nb = b.node();
  Shape shape = plan.out;
  return make_result<T>(std::move(shape), std::move(out), {&a, &b},
                        [na, nb, plan = std::move(plan), dfx, dfy](const Node<T>& self) {
                          const T* g = self.grad.data();
                          const T* z = self.data.data();
                          const T* x = na->data.data();
                          const T* y = nb->data.data();
                          if (na->requires_grad) {
                            na->ensure_grad();
                            T* gx = na->grad.data();
                            broadcast_for_each(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                              gx[ia] += g[io] * dfx(x[ia], y[ib], z[io]);
                            });
                          }
                          if (nb->requires_grad) {
                            nb->ensure_grad();
                            T* gy = nb->grad.data();
                            broadcast_for_each(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                              gy[ib] += g[io] * dfy(x[ia], y[ib], z[io]);
                            });
                          }
                        });
}

// y = f(x) elementwise; df(x, y) is the derivative.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  auto na = a.node();
  return make_result<T>(a.shape(), std::move(out), {&a}, [na, df](const Node<T>& self) {
    na->ensure_grad();
    const std::size_t n = self.data.size();
    for (std::size_t i = 0; i < n; ++i) na->grad[i] += self.grad[i] * df(na->data[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { Add, Sub, Mul, Div };

template <class T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  switch (op) {
    case BinaryOp::Add:
      return detail::binary(
          a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
    case BinaryOp::Sub:
      return detail::binary(
          a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
    case BinaryOp::Mul:
      return detail::binary(
          a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
    case BinaryOp::Div:
      return detail::binary(
          a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
          [](T, T y, T z) { return -z / y; });
  }
  throw Error("unknown binary op");
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) { return scale(a, T(-1)); }

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// The derivative at 0 is taken as 0 so constant channels do not produce
// inf * 0 downstream.
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  auto na = a.node();
  return detail::make_result<T>(std::move(shape), a.vec(), {&a}, [na](const detail::Node<T>& self) {
    na->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdims = false) {
  const Shape& in = a.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) {
    if (ax >= in.size()) throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for " + to_string(in));
    reduced[ax] = true;
  }
  Shape kept, keep_shape;
  for (std::size_t d = 0; d < in.size(); ++d) {
    keep_shape.push_back(reduced[d] ? 1 : in[d]);
    if (!reduced[d]) kept.push_back(in[d]);
  }
  if (kept.empty()) kept.push_back(1);
  // Map every input element onto its output slot.
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    if (!reduced[d]) {
      strides[d] = stride;
      stride *= in[d];
    }
  }
  std::vector<T> out(numel(kept), T(0));
  const T* pa = a.data().data();
  detail::walk(in, strides, [&](std::size_t i, std::size_t j) { out[j] += pa[i]; });
  auto na = a.node();
  Shape result_shape = keepdims ? keep_shape : kept;
  return detail::make_result<T>(std::move(result_shape), std::move(out), {&a},
                                [na, strides](const detail::Node<T>& self) {
                                  na->ensure_grad();
                                  T* g = na->grad.data();
                                  const T* go = self.grad.data();
                                  detail::walk(na->shape, strides, [&](std::size_t i, std::size_t j) { g[i] += go[j]; });
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum(a, axes);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
struct Moments {
  Tensor<T> mean;
  Tensor<T> variance;
};

// Mean and population variance over `axes`. Both outputs are differentiable.
template <class T>
Moments<T> reduce_moments(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw ShapeError("reduce_moments needs at least one axis");
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= x.rank()) throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for " + to_string(x.shape()));
    count *= x.dim(ax);
  }
  const T inv = T(1) / static_cast<T>(count);
  auto mean_k = scale(reduce_sum(x, axes, true), inv);
  auto centered = x - mean_k;
  auto var_k = scale(reduce_sum(square(centered), axes, true), inv);
  Shape kept;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (std::find(axes.begin(), axes.end(), d) == axes.end()) kept.push_back(x.dim(d));
  }
  if (kept.empty()) kept.push_back(1);
  return {reshape(mean_k, kept), reshape(var_k, kept)};
}

// Concatenation along the last axis; leading extents must agree.
template <class T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const Shape lead(first.begin(), first.end() - 1);
  std::size_t total_c = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw ShapeError("concat: mismatched shapes " + to_string(first) + " and " + to_string(s));
    }
    widths.push_back(s.back());
    total_c += s.back();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total_c);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * total_c + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total_c);
  Tensor<T> result(std::move(shape), std::move(out));
  std::vector<typename Tensor<T>::NodePtr> nodes;
  bool any = false;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    if (p.requires_grad()) {
      any = true;
      result.node()->parents.push_back(p.node());
    }
  }
  if (any) {
    result.node()->requires_grad = true;
    result.node()->backward = [nodes, widths, rows, total_c](const detail::Node<T>& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k]->requires_grad) {
          nodes[k]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < widths[k]; ++c) {
              nodes[k]->grad[r * widths[k] + c] += self.grad[r * total_c + off + c];
            }
          }
        }
        off += widths[k];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto na = a.node();
  auto nb = b.node();
  return detail::make_result<T>({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](const detail::Node<T>& self) {
    const T* g = self.grad.data();
    if (na->requires_grad) {
      // dA = dC * B^T
      na->ensure_grad();
      const T* pb = nb->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
          na->grad[i * k + p] += acc;
        }
      }
    }
    if (nb->requires_grad) {
      // dB = A^T * dC
      nb->ensure_grad();
      const T* pa = na->data.data();
      T* gb = nb->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = pa[i * k + p];
          T* grow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * g[i * n + j];
        }
      }
    }
  });
}

enum class Padding { Same, Valid };

struct ConvGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

// TensorFlow-style output size and leading padding for one spatial axis.
inline ConvGeometry conv_geometry(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
  ConvGeometry g;
  if (padding == Padding::Valid) {
    if (k > in) {
      throw ShapeError("kernel extent " + std::to_string(k) + " exceeds padded input extent " + std::to_string(in));
    }
    g.out = (in - k) / stride + 1;
    g.pad_before = 0;
  } else {
    g.out = (in + stride - 1) / stride;
    const std::size_t needed = (g.out - 1) * stride + k;
    const std::size_t pad_total = needed > in ? needed - in : 0;
    if (k > in + pad_total) {
      throw ShapeError("kernel extent " + std::to_string(k) + " exceeds padded input extent");
    }
    g.pad_before = pad_total / 2;
  }
  return g;
}

// NHWC cross-correlation. kernel is (kh, kw, c_in, c_out).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 1, Padding padding = Padding::Same) {
  if (stride <= 0) throw ShapeError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects NHWC input and (kh,kw,cin,cout) kernel, got " + to_string(x.shape()) + " and " +
                     to_string(kernel.shape()));
  }
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), CO = kernel.dim(3);
  if (kernel.dim(2) != C) {
    throw ShapeError("conv2d: input has " + std::to_string(C) + " channels but kernel expects " +
                     std::to_string(kernel.dim(2)));
  }
  const auto s = static_cast<std::size_t>(stride);
  const auto gy = conv_geometry(H, KH, s, padding);
  const auto gx = conv_geometry(W, KW, s, padding);
  const std::size_t OH = gy.out, OW = gx.out;
  const auto pt = static_cast<std::ptrdiff_t>(gy.pad_before);
  const auto pl = static_cast<std::ptrdiff_t>(gx.pad_before);

  std::vector<T> out(N * OH * OW * CO, T(0));
  const T* px = x.data().data();
  const T* pk = kernel.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T* o = out.data() + ((n * OH + oy) * OW + ox) * CO;
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - pt;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - pl;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const T* in = px + ((n * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
            const T* kk = pk + (ky * KW + kx) * C * CO;
            for (std::size_t ci = 0; ci < C; ++ci) {
              const T v = in[ci];
              const T* kr = kk + ci * CO;
              for (std::size_t co = 0; co < CO; ++co) o[co] += v * kr[co];
            }
          }
        }
      }
    }
  }

  auto nx = x.node();
  auto nk = kernel.node();
  return detail::make_result<T>(
      {N, OH, OW, CO}, std::move(out), {&x, &kernel},
      [nx, nk, N, H, W, C, KH, KW, CO, OH, OW, s, pt, pl](const detail::Node<T>& self) {
        const T* g = self.grad.data();
        if (nx->requires_grad) {
          nx->ensure_grad();
          // Kernel transposed to (kh, kw, cout, cin) so the inner loop is contiguous.
          std::vector<T> kt(KH * KW * CO * C);
          const T* pk = nk->data.data();
          for (std::size_t kk = 0; kk < KH * KW; ++kk)
            for (std::size_t ci = 0; ci < C; ++ci)
              for (std::size_t co = 0; co < CO; ++co) kt[(kk * CO + co) * C + ci] = pk[(kk * C + ci) * CO + co];
          T* gxp = nx->grad.data();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const T* go = g + ((n * OH + oy) * OW + ox) * CO;
                for (std::size_t ky = 0; ky < KH; ++ky) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - pt;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - pl;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    T* gi = gxp + ((n * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
                    const T* kk = kt.data() + (ky * KW + kx) * CO * C;
                    for (std::size_t co = 0; co < CO; ++co) {
                      const T v = go[co];
                      const T* kr = kk + co * C;
                      for (std::size_t ci = 0; ci < C; ++ci) gi[ci] += v * kr[ci];
                    }
                  }
                }
              }
            }
          }
        }
        if (nk->requires_grad) {
          nk->ensure_grad();
          T* gk = nk->grad.data();
          const T* px = nx->data.data();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const T* go = g + ((n * OH + oy) * OW + ox) * CO;
                for (std::size_t ky = 0; ky < KH; ++ky) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - pt;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - pl;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const T* in = px + ((n * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
                    T* gkk = gk + (ky * KW + kx) * C * CO;
                    for (std::size_t ci = 0; ci < C; ++ci) {
                      const T v = in[ci];
                      T* gr = gkk + ci * CO;
                      for (std::size_t co = 0; co < CO; ++co) gr[co] += v * go[co];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// Non-overlapping average pooling (window == stride), trailing rows/cols dropped.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t pool = 2) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects NHWC input, got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (pool == 0 || H < pool || W < pool) {
    throw ShapeError("avg_pool2d: window " + std::to_string(pool) + " does not fit " + to_string(x.shape()));
  }
  const std::size_t OH = H / pool, OW = W / pool;
  const T inv = T(1) / static_cast<T>(pool * pool);
  std::vector<T> out(N * OH * OW * C, T(0));
  const T* px = x.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T* o = out.data() + ((n * OH + oy) * OW + ox) * C;
        for (std::size_t dy = 0; dy < pool; ++dy)
          for (std::size_t dx = 0; dx < pool; ++dx) {
            const T* in = px + ((n * H + oy * pool + dy) * W + ox * pool + dx) * C;
            for (std::size_t c = 0; c < C; ++c) o[c] += in[c] * inv;
          }
      }
  auto nx = x.node();
  return detail::make_result<T>({N, OH, OW, C}, std::move(out), {&x},
                                [nx, N, H, W, C, OH, OW, pool, inv](const detail::Node<T>& self) {
                                  nx->ensure_grad();
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t oy = 0; oy < OH; ++oy)
                                      for (std::size_t ox = 0; ox < OW; ++ox) {
                                        const T* go = self.grad.data() + ((n * OH + oy) * OW + ox) * C;
                                        for (std::size_t dy = 0; dy < pool; ++dy)
                                          for (std::size_t dx = 0; dx < pool; ++dx) {
                                            T* gi = nx->grad.data() + ((n * H + oy * pool + dy) * W + ox * pool + dx) * C;
                                            for (std::size_t c = 0; c < C; ++c) gi[c] += go[c] * inv;
                                          }
                                      }
                                });
}

// (N,H,W,C) -> (N,C)
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects NHWC input, got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(3);
  return reshape(scale(reduce_sum(x, {1, 2}), T(1) / static_cast<T>(x.dim(1) * x.dim(2))), {N, C});
}

// Row-wise softmax over the last axis of a 2-D tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects (N,K), got " + to_string(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> out(N * K);
  const T* z = logits.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z + n * K;
    const T mx = *std::max_element(row, row + K);
    T total = 0;
    for (std::size_t k = 0; k < K; ++k) total += (out[n * K + k] = std::exp(row[k] - mx));
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= total;
  }
  auto nz = logits.node();
  return detail::make_result<T>({N, K}, std::move(out), {&logits}, [nz, N, K](const detail::Node<T>& self) {
    nz->ensure_grad();
    for (std::size_t n = 0; n < N; ++n) {
      const T* y = self.data.data() + n * K;
      const T* g = self.grad.data() + n * K;
      T dot = 0;
      for (std::size_t k = 0; k < K; ++k) dot += g[k] * y[k];
      for (std::size_t k = 0; k < K; ++k) nz->grad[n * K + k] += y[k] * (g[k] - dot);
    }
  });
}

// Mean over the batch of -sum_k t_k log softmax(z)_k. Targets are constants.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs targets " +
                     to_string(targets.shape()));
  }
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> probs(N * K);
  const T* z = logits.data().data();
  const T* t = targets.data().data();
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z + n * K;
    const T mx = *std::max_element(row, row + K);
    T total = 0;
    for (std::size_t k = 0; k < K; ++k) total += std::exp(row[k] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t k = 0; k < K; ++k) {
      probs[n * K + k] = std::exp(row[k] - lse);
      loss -= t[n * K + k] * (row[k] - lse);
    }
  }
  loss /= static_cast<T>(N);
  auto nz = logits.node();
  auto nt = targets.node();
  return detail::make_result<T>({1}, {loss}, {&logits},
                                [nz, nt, probs = std::move(probs), N](const detail::Node<T>& self) {
                                  nz->ensure_grad();
                                  const T g = self.grad[0] / static_cast<T>(N);
                                  for (std::size_t i = 0; i < probs.size(); ++i) {
                                    nz->grad[i] += g * (probs[i] - nt->data[i]);
                                  }
                                });
}

// Mean over all elements of binary cross-entropy on logits.
template <class T>
Tensor<T> sigmoid_bce(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("sigmoid_bce: logits " + to_string(logits.shape()) + " vs targets " + to_string(targets.shape()));
  }
  const std::size_t M = logits.size();
  const T* z = logits.data().data();
  const T* t = targets.data().data();
  T loss = 0;
  for (std::size_t i = 0; i < M; ++i) {
    loss += std::max(z[i], T(0)) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  loss /= static_cast<T>(M);
  auto nz = logits.node();
  auto nt = targets.node();
  return detail::make_result<T>({1}, {loss}, {&logits}, [nz, nt, M](const detail::Node<T>& self) {
    nz->ensure_grad();
    const T g = self.grad[0] / static_cast<T>(M);
    for (std::size_t i = 0; i < M; ++i) {
      const T zi = nz->data[i];
      const T s = zi >= T(0) ? T(1) / (T(1) + std::exp(-zi)) : std::exp(zi) / (T(1) + std::exp(zi));
      nz->grad[i] += g * (s - nt->data[i]);
    }
  });
}

// Inverted dropout: survivors are scaled by 1/(1-p).
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout probability must be in [0,1), got " + std::to_string(p));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  return x * Tensor<T>(x.shape(), std::move(mask));
}

}  // namespace bnft
