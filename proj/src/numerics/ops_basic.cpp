#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "evis/ops.hpp"

namespace evis {

namespace {

using detail::Node;

// Strides of `shape` right-aligned to `rank`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (shape[i] != 1) strides[offset + i] = stride;
    stride *= shape[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Calls fn(out_index, a_index, b_index) over the broadcast iteration space.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  if (n == 0) return;
  const std::size_t rank = out.size();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
}

// Binary op with local partials: f(a,b), df/da, df/db.
template <class F, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, Da da, Db db) {
  const Shape& shape_a = a.shape();
  const Shape& shape_b = b.shape();
  auto av = a.values();
  auto bv = b.values();
  if (shape_a == shape_b) {
    const std::size_t n = av.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    return Tensor::make_result(shape_a, std::move(out), {a, b}, name, [da, db](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const auto& g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (na.requires_grad) na.grad[i] += g[i] * da(na.value[i], nb.value[i]);
        if (nb.requires_grad) nb.grad[i] += g[i] * db(na.value[i], nb.value[i]);
      }
    });
  }
  Shape out_shape = broadcast_shape(shape_a, shape_b);
  auto sa = broadcast_strides(shape_a, out_shape);
  auto sb = broadcast_strides(shape_b, out_shape);
  std::vector<double> out(shape_numel(out_shape));
  for_each_broadcast(out_shape, sa, sb,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  return Tensor::make_result(out_shape, std::move(out), {a, b}, name,
                             [da, db, out_shape, sa, sb](Node& self) {
                               Node& na = *self.inputs[0];
                               Node& nb = *self.inputs[1];
                               const auto& g = self.grad;
                               for_each_broadcast(out_shape, sa, sb,
                                                  [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                                    const double x = na.value[ia];
                                                    const double y = nb.value[ib];
                                                    if (na.requires_grad) na.grad[ia] += g[i] * da(x, y);
                                                    if (nb.requires_grad) nb.grad[ib] += g[i] * db(x, y);
                                                  });
                             });
}

// Unary op; the derivative sees both input x and output y.
template <class F, class D>
Tensor unary(const Tensor& x, const char* name, F f, D d) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, name, [d](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      in.grad[i] += self.grad[i] * d(in.value[i], self.value[i]);
    }
  });
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(
      x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double total = 0.0;
  for (double v : xv) total += v;
  return Tensor::make_result({}, {total}, {x}, "sum", [](Node& self) {
    Node& in = *self.inputs[0];
    const double g = self.grad[0];
    for (double& gi : in.grad) gi += g;
  });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t k = 0; k < s.inner; ++k) dst[k] += src[k];
    }
  }
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return Tensor::make_result(shape, std::move(out), {x}, "sum_axis", [s](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * s.inner;
      for (std::size_t j = 0; j < s.n; ++j) {
        double* dst = in.grad.data() + (o * s.n + j) * s.inner;
        for (std::size_t k = 0; k < s.inner; ++k) dst[k] += g[k];
      }
    }
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(n));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  const std::size_t n = x.dim(axis);
  if (n == 0) throw std::invalid_argument("mean: empty axis");
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xv = x.values();
  return Tensor::make_result(shape, std::vector<double>(xv.begin(), xv.end()), {x}, "reshape",
                             [](Node& self) {
                               Node& in = *self.inputs[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
                             });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) throw std::invalid_argument("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw std::invalid_argument("permute: invalid axes");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> gather_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    gather_strides[i] = in_strides[axes[i]];
  }
  // Precomputed source offset for every output element.
  const std::size_t n = shape_numel(out_shape);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(out_shape, gather_strides, zero,
                     [&](std::size_t i, std::size_t ia, std::size_t) { src[i] = ia; });
  auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return Tensor::make_result(out_shape, std::move(out), {x}, "permute",
                             [src = std::move(src)](Node& self) {
                               Node& in = *self.inputs[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[src[i]] += self.grad[i];
                             });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start + length > s.n) throw std::out_of_range("slice: range exceeds axis extent");
  auto xv = x.values();
  std::vector<double> out(s.outer * length * s.inner);
  const std::size_t block = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + (o * s.n + start) * s.inner, block, out.data() + o * block);
  }
  Shape shape = x.shape();
  shape[axis] = length;
  return Tensor::make_result(shape, std::move(out), {x}, "slice", [s, start, block](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = in.grad.data() + (o * s.n + start) * s.inner;
      const double* g = self.grad.data() + o * block;
      for (std::size_t k = 0; k < block; ++k) dst[k] += g[k];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw std::out_of_range("concat: axis out of range");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (i != axis && ps[i] != shape[i]) throw std::invalid_argument("concat: shape mismatch");
    }
    extents.push_back(ps[axis]);
    total += ps[axis];
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pv = parts[p].values();
    const std::size_t block = extents[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * block, block, out.data() + (o * s.n + offset) * s.inner);
    }
    offset += extents[p];
  }
  return Tensor::make_result(shape, std::move(out), parts, "concat", [s, extents](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      Node& in = *self.inputs[p];
      const std::size_t block = extents[p] * s.inner;
      if (in.requires_grad) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* g = self.grad.data() + (o * s.n + offset) * s.inner;
          double* dst = in.grad.data() + o * block;
          for (std::size_t k = 0; k < block; ++k) dst[k] += g[k];
        }
      }
      offset += extents[p];
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (axis > s.size()) throw std::out_of_range("stack: axis out of range");
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, axis);
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  const AxisSplit s = split_axis(x.shape(), axis);
  for (std::size_t i : indices) {
    if (i >= s.n) throw std::out_of_range("index_select: index out of range");
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto xv = x.values();
  const std::size_t m = idx.size();
  std::vector<double> out(s.outer * m * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(xv.data() + (o * s.n + idx[j]) * s.inner, s.inner,
                  out.data() + (o * m + j) * s.inner);
    }
  }
  Shape shape = x.shape();
  shape[axis] = m;
  return Tensor::make_result(shape, std::move(out), {x}, "index_select",
                             [s, idx = std::move(idx)](Node& self) {
                               Node& in = *self.inputs[0];
                               const std::size_t m = idx.size();
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const double* g = self.grad.data() + (o * m + j) * s.inner;
                                   double* dst = in.grad.data() + (o * s.n + idx[j]) * s.inner;
                                   for (std::size_t k = 0; k < s.inner; ++k) dst[k] += g[k];
                                 }
                               }
                             });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw std::invalid_argument("expand: cannot broadcast " + shape_str(x.shape()) + " to " +
                                shape_str(shape));
  }
  auto sx = broadcast_strides(x.shape(), shape);
  std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> out(shape_numel(shape));
  auto xv = x.values();
  for_each_broadcast(shape, sx, zero, [&](std::size_t i, std::size_t ix, std::size_t) { out[i] = xv[ix]; });
  return Tensor::make_result(shape, std::move(out), {x}, "expand", [shape, sx, zero](Node& self) {
    Node& in = *self.inputs[0];
    for_each_broadcast(shape, sx, zero,
                       [&](std::size_t i, std::size_t ix, std::size_t) { in.grad[ix] += self.grad[i]; });
  });
}

}  // namespace evis
