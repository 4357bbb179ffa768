#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "evis/tensor.hpp"

// Differentiable operations on evis::Tensor. Binary elementwise ops follow
// numpy broadcasting rules. Axis arguments are non-negative.
namespace evis {

// ---- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---- shape -----------------------------------------------------------------
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);
Tensor expand(const Tensor& x, const Shape& shape);

// ---- linear algebra --------------------------------------------------------
/// [..., m, k] x [k, n] -> [..., m, n], or batched [B, m, k] x [B, k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * w[in, out] + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- normalisation / probabilities -----------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Softmax over `axis` restricted to entries with valid != 0; `valid` holds
/// one flag per element of x. Masked entries produce exactly 0. Every slice
/// needs at least one valid entry.
Tensor masked_softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> valid);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Cosine similarity along the last axis. A zero-norm operand gives 0.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// ---- losses ----------------------------------------------------------------
/// x[..., K], indices over the leading entries -> [...]
Tensor pick(const Tensor& x, std::span<const std::size_t> indices);
/// Elementwise binary cross-entropy on logits against constant targets.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

// ---- attention -------------------------------------------------------------
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [C, C], b*: [C]
};

/// Scaled dot-product multi-head attention over groups. Queries and keys are
/// projected from `x_qk`, values from `x_v`; both [G, L, C] (or [L, C]).
/// No residual and no normalisation.
Tensor multi_head_attention(const Tensor& x_qk, const Tensor& x_v, const AttentionParams& p,
                            std::size_t heads);
Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& p, std::size_t heads);

// ---- vision ----------------------------------------------------------------
/// Batched same-padded cross-correlation. input [B, H, W, Cin], filter
/// [k, k, Cin, Cout], optional bias [Cout]; output [B, ceil(H/s), ceil(W/s), Cout].
Tensor conv2d(const Tensor& input, const Tensor& filter, const Tensor& bias,
              std::size_t stride = 1);
/// Single map convenience form: filter [k, k, Cin, Cout], map [H, W, Cin].
Tensor conv2d(const Tensor& filter, const Tensor& map);

/// Bilinear RoI align with one sample per output cell centre.
/// feature [F, H, W, C]; boxes [B, 4] as (x1, y1, x2, y2) in frame pixels;
/// frame_of_box[b] selects the feature frame. Feature coordinates are frame
/// coordinates times `spatial_scale`. Boxes are clamped to the frame
/// (feature extent / spatial_scale) before sampling.
Tensor roi_align(const Tensor& feature, const Tensor& boxes,
                 std::span<const std::size_t> frame_of_box, std::size_t out_h, std::size_t out_w,
                 double spatial_scale = 1.0);
/// Single-box form: feature [H, W, C], box [4] -> [out_h, out_w, C].
Tensor roi_align(const Tensor& feature, const Tensor& box, std::size_t out_h, std::size_t out_w,
                 double spatial_scale = 1.0);

/// Paste per-box mask logits [B, h, w] into frames [B, H, W]. A frame pixel
/// whose centre lies inside its box samples the logits bilinearly; every
/// other pixel gets `outside_logit`.
Tensor paste_masks(const Tensor& logits, const Tensor& boxes, std::size_t frame_h,
                   std::size_t frame_w, double outside_logit);

}  // namespace evis
