#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "evis/ops.hpp"

namespace evis {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Eigen::Index;

Index ix(std::size_t v) { return static_cast<Index>(v); }

struct ConvGeometry {
  std::size_t batch, h, w, cin, k, cout, stride, pad, oh, ow;
  std::size_t patch() const { return k * k * cin; }
  std::size_t rows() const { return batch * oh * ow; }
};

// Scatters between [B, H, W, Cin] and the [B*oh*ow, k*k*Cin] patch matrix.
template <bool kToColumns>
void im2col(const ConvGeometry& g, const double* image, double* col) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double* row = col + ((b * g.oh + oy) * g.ow + ox) * patch;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const std::ptrdiff_t jx = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            double* dst = row + (ky * g.k + kx) * g.cin;
            if (iy < 0 || jx < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || jx >= static_cast<std::ptrdiff_t>(g.w)) {
              if constexpr (kToColumns) std::fill_n(dst, g.cin, 0.0);
              continue;
            }
            const std::size_t src = ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(jx)) * g.cin;
            if constexpr (kToColumns) {
              std::copy_n(image + src, g.cin, dst);
            } else {
              double* img = const_cast<double*>(image) + src;
              for (std::size_t c = 0; c < g.cin; ++c) img[c] += dst[c];
            }
          }
        }
      }
    }
  }
}

struct Bilinear {
  std::size_t x0, x1, y0, y1;
  double lx, ly;
  bool clamped_x, clamped_y;  // derivative wrt the coordinate vanishes
};

Bilinear bilinear_at(double fx, double fy, std::size_t w, std::size_t h) {
  Bilinear s{};
  const double max_x = static_cast<double>(w - 1);
  const double max_y = static_cast<double>(h - 1);
  s.clamped_x = fx < 0.0 || fx > max_x;
  s.clamped_y = fy < 0.0 || fy > max_y;
  fx = std::clamp(fx, 0.0, max_x);
  fy = std::clamp(fy, 0.0, max_y);
  s.x0 = static_cast<std::size_t>(std::floor(fx));
  s.y0 = static_cast<std::size_t>(std::floor(fy));
  s.x1 = std::min(s.x0 + 1, w - 1);
  s.y1 = std::min(s.y0 + 1, h - 1);
  s.lx = fx - static_cast<double>(s.x0);
  s.ly = fy - static_cast<double>(s.y0);
  return s;
}

}  // namespace

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& filter, const Tensor& bias, std::size_t stride) {
  const Shape& si = input.shape();
  const Shape& sf = filter.shape();
  if (si.size() != 4 || sf.size() != 4) throw std::invalid_argument("conv2d: expected [B,H,W,Cin] input and [k,k,Cin,Cout] filter");
  if (sf[0] != sf[1] || sf[0] % 2 == 0) throw std::invalid_argument("conv2d: filter must be square with odd size");
  if (sf[2] != si[3]) {
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(si[3]) + ", filter expects " +
                                std::to_string(sf[2]));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: zero stride");
  ConvGeometry g{si[0], si[1], si[2], si[3], sf[0], sf[3], stride, sf[0] / 2, 0, 0};
  g.oh = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / stride + 1;
  if (bias.defined() && bias.numel() != g.cout) throw std::invalid_argument("conv2d: bias size mismatch");

  const bool pointwise = g.k == 1 && stride == 1;
  std::vector<double> col;
  const double* col_ptr = input.values().data();
  if (!pointwise) {
    col.resize(g.rows() * g.patch());
    im2col<true>(g, input.values().data(), col.data());
    col_ptr = col.data();
  }
  std::vector<double> out(g.rows() * g.cout);
  MutMap y(out.data(), ix(g.rows()), ix(g.cout));
  y.noalias() = ConstMap(col_ptr, ix(g.rows()), ix(g.patch())) * ConstMap(filter.values().data(), ix(g.patch()), ix(g.cout));
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), ix(g.cout));

  std::vector<Tensor> inputs{input, filter};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      {g.batch, g.oh, g.ow, g.cout}, std::move(out), std::move(inputs), "conv2d",
      [g, pointwise, col = std::move(col)](Node& self) {
        Node& ni = *self.inputs[0];
        Node& nf = *self.inputs[1];
        ConstMap dy(self.grad.data(), ix(g.rows()), ix(g.cout));
        const double* col_ptr = pointwise ? ni.value.data() : col.data();
        if (nf.requires_grad) {
          MutMap(nf.grad.data(), ix(g.patch()), ix(g.cout)).noalias() +=
              ConstMap(col_ptr, ix(g.rows()), ix(g.patch())).transpose() * dy;
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          // Plain loop: Eigen's colwise().sum() is alignment dependent.
          double* gb = self.inputs[2]->grad.data();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cout; ++c) gb[c] += self.grad[r * g.cout + c];
          }
        }
        if (ni.requires_grad) {
          if (pointwise) {
            MutMap(ni.grad.data(), ix(g.rows()), ix(g.patch())).noalias() +=
                dy * ConstMap(nf.value.data(), ix(g.patch()), ix(g.cout)).transpose();
          } else {
            std::vector<double> dcol(g.rows() * g.patch());
            MutMap(dcol.data(), ix(g.rows()), ix(g.patch())).noalias() =
                dy * ConstMap(nf.value.data(), ix(g.patch()), ix(g.cout)).transpose();
            im2col<false>(g, ni.grad.data(), dcol.data());
          }
        }
      });
}

Tensor conv2d(const Tensor& filter, const Tensor& map) {
  if (map.rank() != 3) throw std::invalid_argument("conv2d: expected [H,W,Cin] map");
  const Shape s = map.shape();
  Tensor out = conv2d(reshape(map, {1, s[0], s[1], s[2]}), filter, Tensor{}, 1);
  return reshape(out, {s[0], s[1], out.dim(3)});
}

// ---- roi_align -------------------------------------------------------------

Tensor roi_align(const Tensor& feature, const Tensor& boxes, std::span<const std::size_t> frame_of_box,
                 std::size_t out_h, std::size_t out_w, double spatial_scale) {
  const Shape& sf = feature.shape();
  if (sf.size() != 4) throw std::invalid_argument("roi_align: expected [F,H,W,C] feature");
  if (boxes.rank() != 2 || boxes.dim(1) != 4) throw std::invalid_argument("roi_align: expected [B,4] boxes");
  const std::size_t nb = boxes.dim(0);
  if (frame_of_box.size() != nb) throw std::invalid_argument("roi_align: frame index count mismatch");
  if (out_h == 0 || out_w == 0 || spatial_scale <= 0.0) throw std::invalid_argument("roi_align: bad output size");
  const std::size_t frames = sf[0], h = sf[1], w = sf[2], c = sf[3];
  const double frame_w = static_cast<double>(w) / spatial_scale;
  const double frame_h = static_cast<double>(h) / spatial_scale;

  struct BoxGeom {
    double x1, y1, x2, y2;
    bool in_x1, in_y1, in_x2, in_y2;  // coordinate was not clamped
  };
  std::vector<BoxGeom> geom(nb);
  auto bv = boxes.values();
  for (std::size_t b = 0; b < nb; ++b) {
    if (frame_of_box[b] >= frames) throw std::out_of_range("roi_align: frame index out of range");
    const double* r = bv.data() + b * 4;
    BoxGeom& gb = geom[b];
    gb.x1 = std::clamp(r[0], 0.0, frame_w);
    gb.y1 = std::clamp(r[1], 0.0, frame_h);
    gb.x2 = std::clamp(r[2], 0.0, frame_w);
    gb.y2 = std::clamp(r[3], 0.0, frame_h);
    gb.in_x1 = r[0] >= 0.0 && r[0] <= frame_w;
    gb.in_y1 = r[1] >= 0.0 && r[1] <= frame_h;
    gb.in_x2 = r[2] >= 0.0 && r[2] <= frame_w;
    gb.in_y2 = r[3] >= 0.0 && r[3] <= frame_h;
    if (!(gb.x2 > gb.x1) || !(gb.y2 > gb.y1)) throw std::invalid_argument("degenerate RoI");
  }

  auto fv = feature.values();
  std::vector<double> out(nb * out_h * out_w * c);
  for (std::size_t b = 0; b < nb; ++b) {
    const BoxGeom& gb = geom[b];
    const double* fmap = fv.data() + frame_of_box[b] * h * w * c;
    const double bw = (gb.x2 - gb.x1) / static_cast<double>(out_w);
    const double bh = (gb.y2 - gb.y1) / static_cast<double>(out_h);
    for (std::size_t i = 0; i < out_h; ++i) {
      const double fy = (gb.y1 + (static_cast<double>(i) + 0.5) * bh) * spatial_scale - 0.5;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double fx = (gb.x1 + (static_cast<double>(j) + 0.5) * bw) * spatial_scale - 0.5;
        const Bilinear s = bilinear_at(fx, fy, w, h);
        const double* p00 = fmap + (s.y0 * w + s.x0) * c;
        const double* p01 = fmap + (s.y0 * w + s.x1) * c;
        const double* p10 = fmap + (s.y1 * w + s.x0) * c;
        const double* p11 = fmap + (s.y1 * w + s.x1) * c;
        double* dst = out.data() + ((b * out_h + i) * out_w + j) * c;
        // Lerp form keeps constant maps exactly constant.
        for (std::size_t k = 0; k < c; ++k) {
          const double top = p00[k] + s.lx * (p01[k] - p00[k]);
          const double bottom = p10[k] + s.lx * (p11[k] - p10[k]);
          dst[k] = top + s.ly * (bottom - top);
        }
      }
    }
  }
  std::vector<std::size_t> frame_idx(frame_of_box.begin(), frame_of_box.end());
  return Tensor::make_result(
      {nb, out_h, out_w, c}, std::move(out), {feature, boxes}, "roi_align",
      [=, geom = std::move(geom), frame_idx = std::move(frame_idx)](Node& self) {
        Node& nfeat = *self.inputs[0];
        Node& nbox = *self.inputs[1];
        for (std::size_t b = 0; b < nb; ++b) {
          const BoxGeom& gb = geom[b];
          const std::size_t frame_off = frame_idx[b] * h * w * c;
          const double* fmap = nfeat.value.data() + frame_off;
          const double bw = (gb.x2 - gb.x1) / static_cast<double>(out_w);
          const double bh = (gb.y2 - gb.y1) / static_cast<double>(out_h);
          double d_x1 = 0, d_x2 = 0, d_y1 = 0, d_y2 = 0;
          for (std::size_t i = 0; i < out_h; ++i) {
            const double ty = (static_cast<double>(i) + 0.5) / static_cast<double>(out_h);
            const double fy = (gb.y1 + (static_cast<double>(i) + 0.5) * bh) * spatial_scale - 0.5;
            for (std::size_t j = 0; j < out_w; ++j) {
              const double tx = (static_cast<double>(j) + 0.5) / static_cast<double>(out_w);
              const double fx = (gb.x1 + (static_cast<double>(j) + 0.5) * bw) * spatial_scale - 0.5;
              const Bilinear s = bilinear_at(fx, fy, w, h);
              const double* g = self.grad.data() + ((b * out_h + i) * out_w + j) * c;
              const std::size_t o00 = (s.y0 * w + s.x0) * c, o01 = (s.y0 * w + s.x1) * c;
              const std::size_t o10 = (s.y1 * w + s.x0) * c, o11 = (s.y1 * w + s.x1) * c;
              if (nfeat.requires_grad) {
                const double w00 = (1 - s.ly) * (1 - s.lx), w01 = (1 - s.ly) * s.lx;
                const double w10 = s.ly * (1 - s.lx), w11 = s.ly * s.lx;
                double* gf = nfeat.grad.data() + frame_off;
                for (std::size_t k = 0; k < c; ++k) {
                  gf[o00 + k] += w00 * g[k];
                  gf[o01 + k] += w01 * g[k];
                  gf[o10 + k] += w10 * g[k];
                  gf[o11 + k] += w11 * g[k];
                }
              }
              if (nbox.requires_grad) {
                double dfx = 0.0, dfy = 0.0;
                for (std::size_t k = 0; k < c; ++k) {
                  const double v00 = fmap[o00 + k], v01 = fmap[o01 + k], v10 = fmap[o10 + k], v11 = fmap[o11 + k];
                  dfx += g[k] * ((1 - s.ly) * (v01 - v00) + s.ly * (v11 - v10));
                  dfy += g[k] * ((1 - s.lx) * (v10 - v00) + s.lx * (v11 - v01));
                }
                if (s.clamped_x || s.x1 == s.x0) dfx = 0.0;
                if (s.clamped_y || s.y1 == s.y0) dfy = 0.0;
                d_x1 += dfx * spatial_scale * (1.0 - tx);
                d_x2 += dfx * spatial_scale * tx;
                d_y1 += dfy * spatial_scale * (1.0 - ty);
                d_y2 += dfy * spatial_scale * ty;
              }
            }
          }
          if (nbox.requires_grad) {
            double* gb_out = nbox.grad.data() + b * 4;
            if (gb.in_x1) gb_out[0] += d_x1;
            if (gb.in_y1) gb_out[1] += d_y1;
            if (gb.in_x2) gb_out[2] += d_x2;
            if (gb.in_y2) gb_out[3] += d_y2;
          }
        }
      });
}

Tensor roi_align(const Tensor& feature, const Tensor& box, std::size_t out_h, std::size_t out_w,
                 double spatial_scale) {
  if (feature.rank() != 3) throw std::invalid_argument("roi_align: expected [H,W,C] feature");
  if (box.numel() != 4) throw std::invalid_argument("roi_align: expected 4 box coordinates");
  const Shape s = feature.shape();
  const std::size_t frame = 0;
  Tensor out = roi_align(reshape(feature, {1, s[0], s[1], s[2]}), reshape(box, {1, 4}),
                         std::span<const std::size_t>(&frame, 1), out_h, out_w, spatial_scale);
  return reshape(out, {out_h, out_w, s[2]});
}

// ---- paste_masks -----------------------------------------------------------

Tensor paste_masks(const Tensor& logits, const Tensor& boxes, std::size_t frame_h, std::size_t frame_w,
                   double outside_logit) {
  if (logits.rank() != 3) throw std::invalid_argument("paste_masks: expected [B,h,w] logits");
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || boxes.dim(0) != logits.dim(0)) {
    throw std::invalid_argument("paste_masks: expected [B,4] boxes matching logits");
  }
  const std::size_t nb = logits.dim(0), mh = logits.dim(1), mw = logits.dim(2);
  auto lv = logits.values();
  auto bv = boxes.values();
  std::vector<double> out(nb * frame_h * frame_w, outside_logit);

  // Visits every frame pixel whose centre falls inside box b.
  auto for_inside = [=](const double* box, auto&& fn) {
    const double x1 = box[0], y1 = box[1], x2 = box[2], y2 = box[3];
    if (!(x2 > x1) || !(y2 > y1)) return;
    const auto lo = [](double v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp(std::ceil(v - 0.5), 0.0, static_cast<double>(n)));
    };
    const std::size_t px0 = lo(x1, frame_w), px1 = lo(x2, frame_w);
    const std::size_t py0 = lo(y1, frame_h), py1 = lo(y2, frame_h);
    for (std::size_t py = py0; py < py1; ++py) {
      const double cy = static_cast<double>(py) + 0.5;
      if (cy < y1 || cy >= y2) continue;
      for (std::size_t px = px0; px < px1; ++px) {
        const double cx = static_cast<double>(px) + 0.5;
        if (cx < x1 || cx >= x2) continue;
        fn(py, px, cx, cy);
      }
    }
  };

  for (std::size_t b = 0; b < nb; ++b) {
    const double* box = bv.data() + b * 4;
    const double* m = lv.data() + b * mh * mw;
    const double bw = box[2] - box[0], bh = box[3] - box[1];
    for_inside(box, [&](std::size_t py, std::size_t px, double cx, double cy) {
      const double u = (cx - box[0]) / bw * static_cast<double>(mw) - 0.5;
      const double v = (cy - box[1]) / bh * static_cast<double>(mh) - 0.5;
      const Bilinear s = bilinear_at(u, v, mw, mh);
      const double top = m[s.y0 * mw + s.x0] + s.lx * (m[s.y0 * mw + s.x1] - m[s.y0 * mw + s.x0]);
      const double bottom = m[s.y1 * mw + s.x0] + s.lx * (m[s.y1 * mw + s.x1] - m[s.y1 * mw + s.x0]);
      out[(b * frame_h + py) * frame_w + px] = top + s.ly * (bottom - top);
    });
  }
  return Tensor::make_result(
      {nb, frame_h, frame_w}, std::move(out), {logits, boxes}, "paste_masks",
      [=](Node& self) {
        Node& nl = *self.inputs[0];
        Node& nbx = *self.inputs[1];
        for (std::size_t b = 0; b < nb; ++b) {
          const double* box = nbx.value.data() + b * 4;
          const double* m = nl.value.data() + b * mh * mw;
          const double bw = box[2] - box[0], bh = box[3] - box[1];
          double d_box[4] = {0, 0, 0, 0};
          for_inside(box, [&](std::size_t py, std::size_t px, double cx, double cy) {
            const double g = self.grad[(b * frame_h + py) * frame_w + px];
            if (g == 0.0) return;
            const double u = (cx - box[0]) / bw * static_cast<double>(mw) - 0.5;
            const double v = (cy - box[1]) / bh * static_cast<double>(mh) - 0.5;
            const Bilinear s = bilinear_at(u, v, mw, mh);
            if (nl.requires_grad) {
              double* gm = nl.grad.data() + b * mh * mw;
              gm[s.y0 * mw + s.x0] += g * (1 - s.ly) * (1 - s.lx);
              gm[s.y0 * mw + s.x1] += g * (1 - s.ly) * s.lx;
              gm[s.y1 * mw + s.x0] += g * s.ly * (1 - s.lx);
              gm[s.y1 * mw + s.x1] += g * s.ly * s.lx;
            }
            if (nbx.requires_grad) {
              const double m00 = m[s.y0 * mw + s.x0], m01 = m[s.y0 * mw + s.x1];
              const double m10 = m[s.y1 * mw + s.x0], m11 = m[s.y1 * mw + s.x1];
              double du = (1 - s.ly) * (m01 - m00) + s.ly * (m11 - m10);
              double dv = (1 - s.lx) * (m10 - m00) + s.lx * (m11 - m01);
              if (s.clamped_x || s.x0 == s.x1) du = 0.0;
              if (s.clamped_y || s.y0 == s.y1) dv = 0.0;
              const double sw = static_cast<double>(mw) / (bw * bw);
              const double sh = static_cast<double>(mh) / (bh * bh);
              d_box[0] += g * du * sw * (cx - box[2]);
              d_box[2] += g * du * sw * -(cx - box[0]);
              d_box[1] += g * dv * sh * (cy - box[3]);
              d_box[3] += g * dv * sh * -(cy - box[1]);
            }
          });
          if (nbx.requires_grad) {
            for (int k = 0; k < 4; ++k) nbx.grad[b * 4 + static_cast<std::size_t>(k)] += d_box[k];
          }
        }
      });
}

}  // namespace evis
