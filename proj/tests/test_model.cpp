#include <doctest.h>

#include <cmath>

#include "evis/model.hpp"
#include "support.hpp"

using namespace evis;
using namespace evis::model;
using evis::testing::random_tensor;
using evis::testing::Rng;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.channels = 16;
  c.queries = 4;
  c.iterations = 2;
  c.heads = 2;
  c.roi_size = 5;
  c.mask_size = 8;
  c.frame_h = c.frame_w = 32;
  c.backbone_width1 = 8;
  c.backbone_width2 = 8;
  c.init_seed = 3;
  return c;
}

Tensor random_frames(std::size_t t, std::size_t h, std::size_t w, Rng& rng) {
  return random_tensor({t, h, w, 3}, rng, 0.0, 1.0);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Values of x[n, t, ...] as a flat vector.
std::vector<double> entry(const Tensor& x, std::size_t n, std::size_t t) {
  const std::size_t inner = x.numel() / (x.shape()[0] * x.shape()[1]);
  const auto v = x.values();
  const auto start = v.begin() + static_cast<long>((n * x.shape()[1] + t) * inner);
  return {start, start + static_cast<long>(inner)};
}

void set_identity(Tensor& w) {
  auto v = w.mutable_values();
  const std::size_t c = w.shape()[0];
  std::fill(v.begin(), v.end(), 0.0);
  for (std::size_t i = 0; i < c; ++i) v[i * c + i] = 1.0;
}

}  // namespace

TEST_SUITE("architecture") {
  TEST_CASE("config validation") {
    ModelConfig c = small_config();
    c.frame_h = 30;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }

  TEST_CASE("backbone shape, weight sharing and bias propagation") {
    ModelConfig c;
    c.channels = 64;
    c.init_seed = 1;
    const Model m(c);
    Rng rng(1);
    const Tensor one = random_frames(1, 64, 64, rng);
    std::vector<double> repeated;
    for (int t = 0; t < 8; ++t) repeated.insert(repeated.end(), one.values().begin(), one.values().end());
    const Tensor f = extract_base_feature(m, Tensor({8, 64, 64, 3}, repeated));
    CHECK(f.shape() == Shape{8, 16, 16, 64});
    const Tensor per_frame = reshape(f, {1, 8, 16, 16, 64});
    for (std::size_t t = 1; t < 8; ++t) CHECK(max_abs_diff(entry(per_frame, 0, 0), entry(per_frame, 0, t)) == 0.0);

    CHECK_THROWS_AS(extract_base_feature(m, Tensor::zeros({1, 62, 64, 3})), std::invalid_argument);
  }

  TEST_CASE("zero frames give per-channel constant maps away from the padded border") {
    ModelConfig c = small_config();
    Model m(c);
    Rng rng(5);
    for (Tensor& b : m.backbone_b) {
      auto v = b.mutable_values();
      for (double& x : v) x = rng.uniform(-1, 1);
    }
    const Tensor f = extract_base_feature(m, Tensor::zeros({2, 32, 32, 3}));
    // Receptive field of the stride-4 feature reaches the zero padding only
    // within 3 feature cells of the border.
    const std::size_t h = 8, w = 8, ch = c.channels;
    const auto v = f.values();
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t k = 0; k < ch; ++k) {
        const double ref = v[((t * h + 3) * w + 3) * ch + k];
        for (std::size_t y = 3; y < h - 2; ++y) {
          for (std::size_t x = 3; x < w - 2; ++x) CHECK(v[((t * h + y) * w + x) * ch + k] == doctest::Approx(ref).epsilon(1e-12));
        }
      }
    }
    // Freshly initialised biases are zero, so the whole map is constant.
    const Tensor g = extract_base_feature(Model(c), Tensor::zeros({1, 32, 32, 3}));
    for (double x : g.values()) CHECK(x == 0.0);
  }

  TEST_CASE("initial tracklet state repeats q* and b* over the clip") {
    const Model m(small_config());
    const auto s = init_tracklet_state(m, 4);
    CHECK(s.queries.shape() == Shape{4, 4, 16});
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t t = 1; t < 4; ++t) {
        CHECK(entry(s.queries, n, t) == entry(s.queries, n, 0));
        CHECK(entry(s.proposals, n, t) == entry(s.proposals, n, 0));
      }
    }
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) CHECK(entry(s.queries, i, 0) != entry(s.queries, j, 0));
    }
    const auto s2 = init_tracklet_state(m, 4);
    CHECK(max_abs_diff(s.proposals.values(), s2.proposals.values()) == 0.0);
  }

  TEST_CASE("temporal attention stage never mixes queries") {
    const ModelConfig c = small_config();
    const Model m(c);
    Rng rng(7);
    const Tensor q = random_tensor({4, 3, 16}, rng);
    const Tensor base = ftsa_temporal(m.stages[0], c, q);
    std::vector<double> v(q.values().begin(), q.values().end());
    for (std::size_t i = 2 * 3 * 16; i < 3 * 3 * 16; ++i) v[i] += rng.uniform(-1, 1);
    const Tensor moved = ftsa_temporal(m.stages[0], c, Tensor(q.shape(), v));
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t t = 0; t < 3; ++t) {
        const double d = max_abs_diff(entry(base, n, t), entry(moved, n, t));
        if (n == 2) CHECK(d > 1e-6);
        else CHECK(d == 0.0);
      }
    }
  }

  TEST_CASE("spatial attention stage never mixes frames") {
    const ModelConfig c = small_config();
    const Model m(c);
    Rng rng(8);
    const Tensor q = random_tensor({4, 3, 16}, rng);
    const Tensor base = ftsa_spatial(m.stages[0], c, q);
    std::vector<double> v(q.values().begin(), q.values().end());
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t k = 0; k < 16; ++k) v[(n * 3 + 1) * 16 + k] += rng.uniform(-1, 1);
    }
    const Tensor moved = ftsa_spatial(m.stages[0], c, Tensor(q.shape(), v));
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t t = 0; t < 3; ++t) {
        const double d = max_abs_diff(entry(base, n, t), entry(moved, n, t));
        if (t == 1) CHECK(d > 1e-6);
        else CHECK(d == 0.0);
      }
    }
  }

  TEST_CASE("single query, single frame, identity projections: layernorm of twice the input") {
    ModelConfig c = small_config();
    c.queries = 1;
    Model m(c);
    StageParams p = m.stages[0];
    for (Tensor* w : {&p.temporal.wq, &p.temporal.wk, &p.temporal.wv, &p.temporal.wo}) set_identity(*w);
    Rng rng(9);
    const Tensor q = random_tensor({1, 1, 16}, rng);
    const Tensor out = ftsa_temporal(p, c, q);
    // Hand formula: x = 2q, (x - mean) / sqrt(var + 1e-5).
    std::vector<double> x(16);
    double mean = 0.0;
    for (std::size_t i = 0; i < 16; ++i) mean += (x[i] = 2.0 * q.values()[i]) / 16.0;
    double var = 0.0;
    for (double xi : x) var += (xi - mean) * (xi - mean) / 16.0;
    for (std::size_t i = 0; i < 16; ++i) CHECK(out.values()[i] == doctest::Approx((x[i] - mean) / std::sqrt(var + 1e-5)).epsilon(1e-12));
  }

  TEST_CASE("adaptive weights sum to one per pixel and ignore response scale") {
    Rng rng(11);
    const std::size_t b = 6, pix = 9, ch = 5;
    std::vector<Tensor> r{random_tensor({b, pix, ch}, rng), random_tensor({b, pix, ch}, rng), random_tensor({b, pix, ch}, rng)};
    std::vector<std::uint8_t> valid(b * 3, 1);
    valid[0] = 0;
    valid[3 * 5 + 2] = 0;
    const Tensor w = adaptive_weights(r, r[1], valid);
    REQUIRE(w.shape() == Shape{b, pix, 3});
    for (std::size_t i = 0; i < b * pix; ++i) {
      const double s = w.values()[3 * i] + w.values()[3 * i + 1] + w.values()[3 * i + 2];
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    for (std::size_t p = 0; p < pix; ++p) CHECK(w.values()[3 * p] == 0.0);

    const Tensor scaled = adaptive_weights({mul_scalar(r[0], 3.5), r[1], r[2]}, r[1], valid);
    CHECK(max_abs_diff(w.values(), scaled.values()) <= 1e-12);

    const Tensor same = adaptive_weights({r[1], r[1], r[1]}, r[1], std::vector<std::uint8_t>(b * 3, 1));
    for (double x : same.values()) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  TEST_CASE("temporal dynamic conv against a direct recomputation on a 2x2 RoI") {
    ModelConfig c = small_config();
    c.roi_size = 2;
    c.channels = 4;
    c.queries = 2;
    const Model m(c);
    Rng rng(13);
    const std::size_t n = 2, t_len = 3, ch = 4, h = 8, w = 8;
    StageParams p = m.stages[0];
    p.filter_b = random_tensor({ch * ch + ch}, rng, -0.3, 0.3);
    const Tensor q = random_tensor({n, t_len, ch}, rng);
    const Tensor feature = random_tensor({t_len, h, w, ch}, rng);
    std::vector<double> bx;
    for (std::size_t i = 0; i < n * t_len; ++i) {
      const double x1 = rng.uniform(0, 20), y1 = rng.uniform(0, 20);
      bx.insert(bx.end(), {x1, y1, x1 + rng.uniform(6, 12), y1 + rng.uniform(6, 12)});
    }
    const Tensor boxes({n, t_len, 4}, bx);
    const TdcOutput out = temporal_dynamic_conv(p, c, q, boxes, feature);
    REQUIRE(out.features.shape() == Shape{n, t_len, 2, 2, ch});

    const auto fw = p.filter_w.values(), fb = p.filter_b.values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < t_len; ++t) {
        // Filter for (i, t) from its own query embedding only.
        std::vector<double> gen(ch * ch + ch);
        for (std::size_t o = 0; o < gen.size(); ++o) {
          double s = fb[o];
          for (std::size_t k = 0; k < ch; ++k) s += q.values()[(i * t_len + t) * ch + k] * fw[k * gen.size() + o];
          gen[o] = s;
        }
        std::vector<std::vector<double>> resp;
        for (int d = -1; d <= 1; ++d) {
          const long tn = static_cast<long>(t) + d;
          if (tn < 0 || tn >= static_cast<long>(t_len)) continue;
          const auto tt = static_cast<std::size_t>(tn);
          const auto box_at = bx.begin() + static_cast<long>(4 * (i * t_len + tt));
          const Tensor roi = roi_align(reshape(slice(feature, 0, tt, 1), {h, w, ch}),
                                       Tensor({4}, std::vector<double>(box_at, box_at + 4)), 2, 2, 0.25);
          std::vector<double> r(4 * ch);
          for (std::size_t px = 0; px < 4; ++px) {
            for (std::size_t o = 0; o < ch; ++o) {
              double s = gen[ch * ch + o];
              for (std::size_t k = 0; k < ch; ++k) s += roi.values()[px * ch + k] * gen[k * ch + o];
              r[px * ch + o] = s;
            }
          }
          resp.push_back(r);
        }
        const std::size_t centre = t == 0 ? 0 : 1;
        for (std::size_t px = 0; px < 4; ++px) {
          std::vector<double> score;
          for (const auto& r : resp) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < ch; ++k) {
              dot += r[px * ch + k] * resp[centre][px * ch + k];
              na += r[px * ch + k] * r[px * ch + k];
              nb += resp[centre][px * ch + k] * resp[centre][px * ch + k];
            }
            score.push_back(dot / std::sqrt(na * nb));
          }
          double z = 0;
          for (double s : score) z += std::exp(s);
          for (std::size_t k = 0; k < ch; ++k) {
            double o = 0;
            for (std::size_t j = 0; j < resp.size(); ++j) o += std::exp(score[j]) / z * resp[j][px * ch + k];
            CHECK(std::abs(out.features.values()[((i * t_len + t) * 4 + px) * ch + k] - o) <= 1e-12);
          }
        }
      }
    }
  }

  TEST_CASE("temporal dynamic conv: identical neighbours, boundaries and zero filters") {
    ModelConfig c = small_config();
    Model m(c);
    Rng rng(17);
    const std::size_t t_len = 3, ch = c.channels;
    const Tensor frame = random_tensor({1, 8, 8, ch}, rng);
    const Tensor feature = expand(frame, {t_len, 8, 8, ch});
    const Tensor q = expand(random_tensor({4, 1, ch}, rng), {4, t_len, ch});
    const Tensor boxes = expand(Tensor({1, 1, 4}, {4, 6, 25, 22}), {4, t_len, 4});
    const TdcOutput out = temporal_dynamic_conv(m.stages[0], c, q, boxes, feature);
    const std::size_t pix = c.roi_size * c.roi_size;
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t px = 0; px < pix; ++px) {
        const auto w = out.weights.values().subspan(((i * t_len + 1) * pix + px) * 3, 3);
        for (double x : w) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        const auto w0 = out.weights.values().subspan(((i * t_len + 0) * pix + px) * 3, 3);
        CHECK(w0[0] == 0.0);
        CHECK(w0[1] + w0[2] == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
    // Same as the still-image response with only the own frame.
    ModelConfig still = c;
    still.dynamic_conv = DynamicConv::StillImage;
    const TdcOutput single = temporal_dynamic_conv(m.stages[0], still, q, boxes, feature);
    CHECK(max_abs_diff(out.features.values(), single.features.values()) <= 1e-12);

    const TdcOutput zero = temporal_dynamic_conv(m.stages[0], c, Tensor::zeros({4, t_len, ch}), boxes, feature);
    for (double x : zero.features.values()) CHECK(x == 0.0);
  }

  TEST_CASE("box deltas: zero is identity, results stay valid") {
    Rng rng(19);
    const Tensor boxes({3, 4}, {2, 3, 20, 30, 10, 10, 11, 12, 0, 0, 64, 64});
    const Tensor same = apply_box_deltas(boxes, Tensor::zeros({3, 4}), 64, 64);
    CHECK(max_abs_diff(same.values(), boxes.values()) <= 1e-12);
    const Tensor wild = apply_box_deltas(boxes, random_tensor({3, 4}, rng, -50, 50), 64, 64);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto b = wild.values().subspan(4 * i, 4);
      CHECK(b[2] - b[0] >= 1.0 - 1e-12);
      CHECK(b[3] - b[1] >= 1.0 - 1e-12);
      CHECK(std::min(b[2], 64.0) - std::max(b[0], 0.0) > 0.0);
      CHECK(std::min(b[3], 64.0) - std::max(b[1], 0.0) > 0.0);
    }
  }

  TEST_CASE("head output shapes") {
    ModelConfig c = small_config();
    c.num_classes = 3;
    c.mask_size = 14;
    const Model m(c);
    Rng rng(23);
    const std::size_t t_len = 8;
    const auto init = init_tracklet_state(m, t_len);
    const Tensor o = random_tensor({4, t_len, c.roi_size, c.roi_size, c.channels}, rng);
    const HeadOutput h = heads(m.stages[0], c, o, init.queries, init.proposals);
    CHECK(h.class_logits.shape() == Shape{4, t_len, 4});
    CHECK(h.boxes.shape() == Shape{4, t_len, 4});
    CHECK(h.mask_logits.shape() == Shape{4, t_len, 14, 14});
    CHECK(h.frame_masks.shape() == Shape{4, t_len, 32, 32});
    CHECK(h.queries.shape() == Shape{4, t_len, c.channels});
    const Tensor prob = sigmoid(h.frame_masks);
    for (double x : prob.values()) CHECK((x > 0.0 && x < 1.0));
  }

  TEST_CASE("forward_clip returns M prediction sets and final queries") {
    const ModelConfig c = small_config();
    const Model m(c);
    Rng rng(29);
    const auto preds = forward_clip(m, random_frames(3, 32, 32, rng), init_tracklet_state(m, 3));
    CHECK(preds.iterations.size() == c.iterations);
    CHECK(preds.final().queries.shape() == Shape{4, 3, 16});
    CHECK(preds.clip_len() == 3);
    CHECK_THROWS_AS(forward_clip(m, random_frames(2, 32, 32, rng), init_tracklet_state(m, 3)), std::invalid_argument);
  }

  TEST_CASE("forward_clip is equivariant to permuting query slots") {
    for (AttentionScheme scheme : {AttentionScheme::Factorised, AttentionScheme::Joint}) {
      ModelConfig c = small_config();
      c.attention = scheme;
      const Model m(c);
      Rng rng(31);
      const std::size_t t_len = 3;
      const Tensor frames = random_frames(t_len, 32, 32, rng);
      const auto init = init_tracklet_state(m, t_len);
      const std::vector<std::size_t> perm{2, 0, 3, 1};
      const TrackletState permuted{index_select(init.queries, 0, perm), index_select(init.proposals, 0, perm)};
      const auto a = forward_clip(m, frames, init);
      const auto b = forward_clip(m, frames, permuted);
      for (std::size_t it = 0; it < c.iterations; ++it) {
        const HeadOutput& x = a.iterations[it];
        const HeadOutput& y = b.iterations[it];
        CHECK(max_abs_diff(index_select(x.class_logits, 0, perm).values(), y.class_logits.values()) <= 1e-9);
        CHECK(max_abs_diff(index_select(x.boxes, 0, perm).values(), y.boxes.values()) <= 1e-9);
        CHECK(max_abs_diff(index_select(x.frame_masks, 0, perm).values(), y.frame_masks.values()) <= 1e-9);
        CHECK(max_abs_diff(index_select(x.queries, 0, perm).values(), y.queries.values()) <= 1e-9);
      }
    }
  }

  TEST_CASE("checkpoint round trip restores every parameter") {
    const ModelConfig c = small_config();
    Model m(c);
    auto v = m.stages[1].class_b.mutable_values();
    v[0] = 0.25;
    const auto path = std::filesystem::temp_directory_path() / "evis_model_ck.bin";
    m.save(path);
    const Model back = Model::load(path);
    CHECK(to_json(back.config()) == to_json(c));
    const auto pa = m.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(max_abs_diff(pa[i].second.values(), pb[i].second.values()) == 0.0);
    CHECK(m.parameter_count() > 0);
  }
}
