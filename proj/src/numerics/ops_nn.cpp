#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "evis/ops.hpp"

namespace evis {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Row-by-row accumulation. Eigen's vectorised colwise().sum() peels by the
// runtime address of the destination, which makes results differ in the last
// bit between runs.
void add_column_sums(const double* x, std::size_t rows, std::size_t cols, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
  }
}
using Eigen::Index;

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw std::out_of_range("axis out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Index ix(std::size_t v) { return static_cast<Index>(v); }

}  // namespace

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() == 3 && sb.size() == 3) {
    const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) {
      throw std::invalid_argument("matmul: batched shapes " + shape_str(sa) + " x " + shape_str(sb));
    }
    std::vector<double> out(batch * m * n);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, ix(m), ix(n)).noalias() =
          ConstMap(av.data() + i * m * k, ix(m), ix(k)) * ConstMap(bv.data() + i * k * n, ix(k), ix(n));
    }
    return Tensor::make_result({batch, m, n}, std::move(out), {a, b}, "bmm", [batch, m, k, n](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMap g(self.grad.data() + i * m * n, ix(m), ix(n));
        if (na.requires_grad) {
          MutMap(na.grad.data() + i * m * k, ix(m), ix(k)).noalias() +=
              g * ConstMap(nb.value.data() + i * k * n, ix(k), ix(n)).transpose();
        }
        if (nb.requires_grad) {
          MutMap(nb.grad.data() + i * k * n, ix(k), ix(n)).noalias() +=
              ConstMap(na.value.data() + i * m * k, ix(m), ix(k)).transpose() * g;
        }
      }
    });
  }
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    throw std::invalid_argument("matmul: shapes " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t k = sb[0], n = sb[1];
  const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
  std::vector<double> out(rows * n);
  MutMap(out.data(), ix(rows), ix(n)).noalias() =
      ConstMap(a.values().data(), ix(rows), ix(k)) * ConstMap(b.values().data(), ix(k), ix(n));
  Shape shape = sa;
  shape.back() = n;
  return Tensor::make_result(shape, std::move(out), {a, b}, "matmul", [rows, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstMap g(self.grad.data(), ix(rows), ix(n));
    if (na.requires_grad) {
      MutMap(na.grad.data(), ix(rows), ix(k)).noalias() += g * ConstMap(nb.value.data(), ix(k), ix(n)).transpose();
    }
    if (nb.requires_grad) {
      MutMap(nb.grad.data(), ix(k), ix(n)).noalias() += ConstMap(na.value.data(), ix(rows), ix(k)).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0]) {
    throw std::invalid_argument("linear: shapes " + shape_str(sx) + " x " + shape_str(sw));
  }
  const std::size_t in = sw[0], out_dim = sw[1];
  if (bias.defined() && bias.numel() != out_dim) throw std::invalid_argument("linear: bias size mismatch");
  const std::size_t rows = x.numel() / std::max<std::size_t>(in, 1);
  std::vector<double> out(rows * out_dim);
  MutMap y(out.data(), ix(rows), ix(out_dim));
  y.noalias() = ConstMap(x.values().data(), ix(rows), ix(in)) * ConstMap(w.values().data(), ix(in), ix(out_dim));
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.values().data(), ix(out_dim));
    y.rowwise() += bv;
  }
  Shape shape = sx;
  shape.back() = out_dim;
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(shape, std::move(out), std::move(inputs), "linear",
                             [rows, in, out_dim](Node& self) {
                               Node& nx = *self.inputs[0];
                               Node& nw = *self.inputs[1];
                               ConstMap g(self.grad.data(), ix(rows), ix(out_dim));
                               if (nx.requires_grad) {
                                 MutMap(nx.grad.data(), ix(rows), ix(in)).noalias() +=
                                     g * ConstMap(nw.value.data(), ix(in), ix(out_dim)).transpose();
                               }
                               if (nw.requires_grad) {
                                 MutMap(nw.grad.data(), ix(in), ix(out_dim)).noalias() +=
                                     ConstMap(nx.value.data(), ix(rows), ix(in)).transpose() * g;
                               }
                               if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                                 add_column_sums(self.grad.data(), rows, out_dim, self.inputs[2]->grad.data());
                               }
                             });
}

// ---- normalisation / probabilities -----------------------------------------

namespace {

Tensor softmax_impl(const Tensor& x, std::size_t axis, const std::uint8_t* valid, const char* name) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.n == 0) throw std::invalid_argument("degenerate softmax axis");
  auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.inner; ++k) {
      const std::size_t base = o * s.n * s.inner + k;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t i = base + j * s.inner;
        if (!valid || valid[i]) hi = std::max(hi, xv[i]);
      }
      if (hi == -std::numeric_limits<double>::infinity()) {
        throw std::invalid_argument("masked_softmax: slice without valid entries");
      }
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t i = base + j * s.inner;
        if (!valid || valid[i]) {
          out[i] = std::exp(xv[i] - hi);
          z += out[i];
        }
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, name, [s](Node& self) {
    Node& in = *self.inputs[0];
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t k = 0; k < s.inner; ++k) {
        const std::size_t base = o * s.n * s.inner + k;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          in.grad[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) { return softmax_impl(x, axis, nullptr, "softmax"); }

Tensor masked_softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> valid) {
  if (valid.size() != x.numel()) throw std::invalid_argument("masked_softmax: mask size mismatch");
  return softmax_impl(x, axis, valid.data(), "masked_softmax");
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.n == 0) throw std::invalid_argument("degenerate softmax axis");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.inner; ++k) {
      const std::size_t base = o * s.n * s.inner + k;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) hi = std::max(hi, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[base + j * s.inner] - hi);
      const double lse = hi + std::log(z);
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = xv[base + j * s.inner] - lse;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, "log_softmax", [s](Node& self) {
    Node& in = *self.inputs[0];
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t k = 0; k < s.inner; ++k) {
        const std::size_t base = o * s.n * s.inner + k;
        double gsum = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          in.grad[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Shape& sx = x.shape();
  if (sx.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t c = sx.back();
  if (gamma.numel() != c || beta.numel() != c) throw std::invalid_argument("layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / std::max<std::size_t>(c, 1);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t k = 0; k < c; ++k) mu += src[k];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t k = 0; k < c; ++k) var += (src[k] - mu) * (src[k] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t k = 0; k < c; ++k) {
      const double h = (src[k] - mu) * is;
      xhat[r * c + k] = h;
      out[r * c + k] = h * gv[k] + bv[k];
    }
  }
  return Tensor::make_result(
      sx, std::move(out), {x, gamma, beta}, "layer_norm",
      [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        const auto& g = self.grad;
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          if (ng.requires_grad || nb.requires_grad) {
            for (std::size_t k = 0; k < c; ++k) {
              if (ng.requires_grad) ng.grad[k] += gr[k] * hr[k];
              if (nb.requires_grad) nb.grad[k] += gr[k];
            }
          }
          if (nx.requires_grad) {
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
              const double dh = gr[k] * ng.value[k];
              sum_dh += dh;
              sum_dh_h += dh * hr[k];
            }
            for (std::size_t k = 0; k < c; ++k) {
              const double dh = gr[k] * ng.value[k];
              nx.grad[r * c + k] += inv_std[r] * (dh - inv_c * sum_dh - hr[k] * inv_c * sum_dh_h);
            }
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw std::invalid_argument("cosine_similarity: shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.numel() / std::max<std::size_t>(c, 1);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(rows, 0.0);
  std::vector<double> na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double x = av[r * c + k], y = bv[r * c + k];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = (na[r] > 0.0 && nb[r] > 0.0) ? dot / (na[r] * nb[r]) : 0.0;
  }
  Shape shape = a.shape();
  shape.pop_back();
  return Tensor::make_result(shape, std::move(out), {a, b}, "cosine_similarity",
                             [rows, c, na = std::move(na), nb = std::move(nb)](Node& self) {
                               Node& xa = *self.inputs[0];
                               Node& xb = *self.inputs[1];
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (!(na[r] > 0.0 && nb[r] > 0.0)) continue;
                                 const double g = self.grad[r];
                                 const double cs = self.value[r];
                                 const double inv = 1.0 / (na[r] * nb[r]);
                                 for (std::size_t k = 0; k < c; ++k) {
                                   const double x = xa.value[r * c + k], y = xb.value[r * c + k];
                                   if (xa.requires_grad) xa.grad[r * c + k] += g * (y * inv - cs * x / (na[r] * na[r]));
                                   if (xb.requires_grad) xb.grad[r * c + k] += g * (x * inv - cs * y / (nb[r] * nb[r]));
                                 }
                               }
                             });
}

// ---- losses ----------------------------------------------------------------

Tensor pick(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() == 0) throw std::invalid_argument("pick: scalar input");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(k, 1);
  if (indices.size() != rows) throw std::invalid_argument("pick: index count mismatch");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto xv = x.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= k) throw std::out_of_range("pick: index out of range");
    out[r] = xv[r * k + idx[r]];
  }
  Shape shape = x.shape();
  shape.pop_back();
  return Tensor::make_result(shape, std::move(out), {x}, "pick", [k, idx = std::move(idx)](Node& self) {
    Node& in = *self.inputs[0];
    for (std::size_t r = 0; r < idx.size(); ++r) in.grad[r * k + idx[r]] += self.grad[r];
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (targets.size() != logits.numel()) throw std::invalid_argument("bce_with_logits: target size mismatch");
  std::vector<double> t(targets.begin(), targets.end());
  auto xv = logits.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    out[i] = std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return Tensor::make_result(logits.shape(), std::move(out), {logits}, "bce_with_logits",
                             [t = std::move(t)](Node& self) {
                               Node& in = *self.inputs[0];
                               for (std::size_t i = 0; i < t.size(); ++i) {
                                 const double x = in.value[i];
                                 const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                           : std::exp(x) / (1.0 + std::exp(x));
                                 in.grad[i] += self.grad[i] * (p - t[i]);
                               }
                             });
}

// ---- attention -------------------------------------------------------------

Tensor multi_head_attention(const Tensor& x_qk, const Tensor& x_v, const AttentionParams& p,
                            std::size_t heads) {
  if (x_qk.shape() != x_v.shape()) throw std::invalid_argument("attention: query/value input shapes differ");
  if (x_qk.rank() == 2) {
    const Shape s = x_qk.shape();
    Tensor out = multi_head_attention(reshape(x_qk, {1, s[0], s[1]}), reshape(x_v, {1, s[0], s[1]}), p, heads);
    return reshape(out, s);
  }
  if (x_qk.rank() != 3) throw std::invalid_argument("attention: expected [G, L, C] input");
  const std::size_t groups = x_qk.dim(0), len = x_qk.dim(1), c = x_qk.dim(2);
  if (heads == 0 || c % heads != 0) {
    throw std::invalid_argument("attention: channels " + std::to_string(c) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (len == 0) throw std::invalid_argument("attention: empty token axis");
  const std::size_t d = c / heads;
  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {groups, len, heads, d}), {0, 2, 1, 3}), {groups * heads, len, d});
  };
  Tensor q = split_heads(linear(x_qk, p.wq, p.bq));
  Tensor k = split_heads(linear(x_qk, p.wk, p.bk));
  Tensor v = split_heads(linear(x_v, p.wv, p.bv));
  Tensor kt = permute(k, {0, 2, 1});
  Tensor scores = mul_scalar(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor attn = softmax(scores, 2);
  Tensor ctx = matmul(attn, v);  // [G*H, L, d]
  Tensor merged = reshape(permute(reshape(ctx, {groups, heads, len, d}), {0, 2, 1, 3}), {groups, len, c});
  return linear(merged, p.wo, p.bo);
}

Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& p, std::size_t heads) {
  return multi_head_attention(x, x, p, heads);
}

}  // namespace evis
