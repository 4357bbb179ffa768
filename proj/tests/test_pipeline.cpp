#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "evis/pipeline.hpp"
#include "evis/train.hpp"

using namespace evis;
using namespace evis::pipeline;

namespace {

model::ModelConfig tiny_config(std::size_t frame) {
  model::ModelConfig c;
  c.channels = 8;
  c.queries = 3;
  c.iterations = 2;
  c.heads = 2;
  c.roi_size = 3;
  c.mask_size = 4;
  c.frame_h = c.frame_w = frame;
  c.backbone_width1 = 4;
  c.backbone_width2 = 4;
  return c;
}

synth::SceneConfig tiny_scene() {
  synth::SceneConfig s;
  s.num_videos = 2;
  s.frames_per_video = 8;
  s.frame_h = s.frame_w = 32;
  s.min_objects = 1;
  s.max_objects = 2;
  s.min_radius = 4;
  s.max_radius = 6;
  s.seed = 5;
  return s;
}

/// Biases the no-object logit of every stage so that all slots are (or are not) empty.
void force_no_object(model::Model& m, double bias) {
  const std::size_t k = m.config().num_classes;
  for (auto& st : m.stages) st.class_b.mutable_values()[k] = bias;
}

Mask box_mask(std::size_t h, std::size_t w, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
  Mask m(h * w, 0);
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) m[y * w + x] = 1;
  }
  return m;
}

PredictedTracklet prediction(int identity, int label, double score, std::vector<Mask> masks) {
  PredictedTracklet p;
  p.identity = identity;
  p.label = label;
  p.score = score;
  p.last_frame = masks.size();
  p.masks = std::move(masks);
  p.boxes.assign(p.masks.size(), Box{0, 0, 0, 0});
  p.frame_labels.assign(p.masks.size(), label);
  return p;
}

GroundTruthTube tube(int id, int label, std::vector<Mask> masks) { return {id, label, std::move(masks)}; }

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("split_clips covers the video with a short last clip") {
    using P = std::pair<std::size_t, std::size_t>;
    CHECK(split_clips(16, 8) == std::vector<P>{{0, 8}, {8, 8}});
    CHECK(split_clips(17, 8) == std::vector<P>{{0, 8}, {8, 8}, {16, 1}});
    CHECK(split_clips(5, 8) == std::vector<P>{{0, 5}});
    CHECK(split_clips(0, 8).empty());
    CHECK_THROWS_AS(split_clips(4, 0), std::invalid_argument);
  }

  TEST_CASE("video_iou: hand values and edge cases") {
    const Mask a = box_mask(4, 4, 0, 0, 2, 2);  // 4 pixels
    const Mask b = box_mask(4, 4, 1, 0, 3, 2);  // 4 pixels, 2 shared
    const Mask z(16, 0);
    CHECK(video_iou({a}, {a}) == 1.0);
    CHECK(video_iou({a}, {b}) == doctest::Approx(2.0 / 6.0));
    // Sums run over the whole tube, not per frame.
    CHECK(video_iou({a, a}, {a, z}) == 0.5);
    CHECK(video_iou({a, b}, {a, a}) == doctest::Approx(6.0 / 10.0));
    CHECK(video_iou({z, z}, {z, z}) == 0.0);
    CHECK(video_iou({}, {}) == 0.0);
    CHECK_THROWS_AS(video_iou({a}, {a, a}), std::invalid_argument);
    CHECK_THROWS_AS(video_iou({a}, {Mask(9, 0)}), std::invalid_argument);
  }

  TEST_CASE("video_iou: symmetric and within [0, 1]") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Mask> p(3, Mask(25)), g(3, Mask(25));
      for (auto* tube : {&p, &g}) {
        for (Mask& m : *tube) {
          for (auto& v : m) v = static_cast<std::uint8_t>(rng() % 2);
        }
      }
      const double o = video_iou(p, g);
      CHECK(o >= 0.0);
      CHECK(o <= 1.0);
      CHECK(o == video_iou(g, p));
    }
  }

  TEST_CASE("evaluate: a perfect prediction scores 1 everywhere") {
    const Mask m = box_mask(8, 8, 1, 1, 5, 5);
    EvalVideo v{{prediction(0, 1, 0.9, {m, m})}, {tube(1, 1, {m, m})}};
    const Metrics r = evaluate({v}, 3);
    CHECK(r.ap == 1.0);
    CHECK(r.ap50 == 1.0);
    CHECK(r.ap75 == 1.0);
    CHECK(r.ar1 == 1.0);
    CHECK(r.ar10 == 1.0);
  }

  TEST_CASE("evaluate: one prediction at tube IoU 0.6 gives AP 3/10") {
    // 10 x 1 ground-truth strip; the prediction covers 6 of its pixels.
    const Mask g = box_mask(1, 10, 0, 0, 10, 1);
    const Mask p = box_mask(1, 10, 0, 0, 6, 1);
    REQUIRE(video_iou({p}, {g}) == 0.6);
    const Metrics r = evaluate({EvalVideo{{prediction(0, 0, 0.7, {p})}, {tube(1, 0, {g})}}}, 3);
    // Matched at thresholds 0.50, 0.55 and 0.60 only.
    CHECK(r.ap == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(r.ap50 == 1.0);
    CHECK(r.ap75 == 0.0);
    CHECK(r.ar1 == doctest::Approx(0.3).epsilon(1e-12));
  }

  TEST_CASE("evaluate: a duplicate prediction is a false positive") {
    const Mask a = box_mask(8, 8, 0, 0, 3, 3);
    const Mask b = box_mask(8, 8, 5, 5, 8, 8);
    // Ranked: A (TP), duplicate of A (FP), B (TP).
    EvalVideo v{{prediction(0, 0, 0.9, {a}), prediction(1, 0, 0.8, {a}), prediction(2, 0, 0.7, {b})},
                {tube(1, 0, {a}), tube(2, 0, {b})}};
    const Metrics r = evaluate({v}, 3);
    // Interpolated precision is 1 for recall <= 0.5 and 2/3 above.
    const double expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    CHECK(r.ap == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.ar10 == 1.0);
    CHECK(r.ar1 == 0.5);

    // Without the duplicate the same detections are perfect.
    v.predictions.erase(v.predictions.begin() + 1);
    CHECK(evaluate({v}, 3).ap == 1.0);
  }

  TEST_CASE("evaluate: class and video must agree for a match") {
    const Mask a = box_mask(8, 8, 0, 0, 4, 4);
    // Right mask, wrong class.
    CHECK(evaluate({EvalVideo{{prediction(0, 2, 0.9, {a})}, {tube(1, 0, {a})}}}, 3).ap == 0.0);
    // A prediction in one video cannot match ground truth in another.
    const std::vector<EvalVideo> vids{EvalVideo{{prediction(0, 0, 0.9, {a})}, {}},
                                      EvalVideo{{}, {tube(1, 0, {a})}}};
    CHECK(evaluate(vids, 3).ap == 0.0);
    // Classes without ground truth are left out of the average.
    const EvalVideo two{{prediction(0, 0, 0.9, {a}), prediction(1, 1, 0.95, {a})}, {tube(1, 0, {a})}};
    CHECK(evaluate({two}, 3).ap == 1.0);
    CHECK(evaluate({}, 3).ap == 0.0);
  }

  TEST_CASE("evaluate: invariant to prediction order and within bounds") {
    std::mt19937_64 rng(17);
    auto random_mask = [&] {
      const std::size_t x = rng() % 6, y = rng() % 6;
      return box_mask(10, 10, x, y, x + 2 + rng() % 3, y + 2 + rng() % 3);
    };
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<EvalVideo> vids(3);
      int id = 0;
      for (auto& v : vids) {
        for (int g = 0; g < 3; ++g) v.ground_truth.push_back(tube(g, static_cast<int>(rng() % 2), {random_mask(), random_mask()}));
        for (int p = 0; p < 5; ++p) {
          // Coarse scores so ties occur.
          v.predictions.push_back(prediction(id++, static_cast<int>(rng() % 2), static_cast<double>(rng() % 4) / 4.0,
                                             {random_mask(), random_mask()}));
        }
      }
      const Metrics base = evaluate(vids, 2);
      for (double x : {base.ap, base.ap50, base.ap75, base.ar1, base.ar10}) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
      }
      CHECK(base.ar10 >= base.ar1);
      CHECK(base.ap50 >= base.ap75);
      for (auto& v : vids) std::shuffle(v.predictions.begin(), v.predictions.end(), rng);
      const Metrics shuffled = evaluate(vids, 2);
      CHECK(shuffled.ap == base.ap);
      CHECK(shuffled.ar1 == base.ar1);
      CHECK(shuffled.ar10 == base.ar10);
    }
  }

  TEST_CASE("ground_truth_tubes keeps visible tracklets with their class") {
    synth::Tracklet seen, unseen;
    seen.instance_id = 4;
    seen.class_per_frame = {synth::kNoObject, 2, 2};
    seen.mask_per_frame.assign(3, Mask(4, 0));
    seen.mask_per_frame[1][0] = 1;
    unseen.class_per_frame.assign(3, synth::kNoObject);
    unseen.mask_per_frame.assign(3, Mask(4, 0));
    const auto tubes = ground_truth_tubes({unseen, seen});
    REQUIRE(tubes.size() == 1);
    CHECK(tubes[0].instance_id == 4);
    CHECK(tubes[0].label == 2);
    CHECK(tubes[0].masks == seen.mask_per_frame);
  }

  TEST_CASE("identity_continuity: hand examples") {
    const Mask m = box_mask(4, 4, 0, 0, 2, 2), z(16, 0);
    synth::Tracklet gt;
    gt.class_per_frame = {0, 0, 0, 0};
    gt.mask_per_frame = {m, m, m, m};
    VideoPredictions same;
    same.height = same.width = 4;
    same.frames = 4;
    same.tracklets = {prediction(7, 0, 1.0, {m, m, m, m})};
    Continuity c = identity_continuity(same, {gt}, 2);
    CHECK(c.pairs == 1);
    CHECK(c.same == 1);
    CHECK(c.fraction() == 1.0);

    VideoPredictions switched = same;
    switched.tracklets = {prediction(0, 0, 1.0, {m, m, z, z}), prediction(1, 0, 1.0, {z, z, m, m})};
    c = identity_continuity(switched, {gt}, 2);
    CHECK(c.pairs == 1);
    CHECK(c.same == 0);

    // The dominant identity wins even if another one touches the object.
    const Mask corner = box_mask(4, 4, 0, 0, 1, 1);
    VideoPredictions mostly = same;
    mostly.tracklets = {prediction(0, 0, 1.0, {m, m, m, m}), prediction(1, 0, 1.0, {z, z, corner, corner})};
    CHECK(identity_continuity(mostly, {gt}, 2).same == 1);

    // Three clips give two boundaries; no prediction at all is a break.
    synth::Tracklet gt6 = gt;
    gt6.class_per_frame = {0, 0, 0, 0, 0, 0};
    gt6.mask_per_frame = {m, m, m, m, m, m};
    VideoPredictions none;
    none.frames = 6;
    c = identity_continuity(none, {gt6}, 2);
    CHECK(c.pairs == 2);
    CHECK(c.same == 0);

    // A tracklet seen on one side of the boundary only is not counted.
    synth::Tracklet early = gt;
    early.class_per_frame = {0, 0, synth::kNoObject, synth::kNoObject};
    early.mask_per_frame = {m, m, z, z};
    c = identity_continuity(same, {early}, 2);
    CHECK(c.pairs == 0);
    CHECK(c.fraction() == 0.0);
    CHECK_THROWS_AS(identity_continuity(same, {gt6}, 2), std::invalid_argument);
  }

  TEST_CASE("infer_video: first clip from q*, later clips from the time-mean handoff") {
    const synth::Dataset data = synth::generate_dataset(tiny_scene());
    const synth::Video& video = data.videos[0];
    const model::Model net(tiny_config(32));
    InferenceTrace trace;
    const VideoPredictions out = infer_video(net, video, 3, 2, &trace);

    // 8 frames in clips of 3, 3 and 2.
    REQUIRE(trace.init_queries.size() == 3);
    CHECK(trace.clip_starts == std::vector<std::size_t>{0, 3, 6});
    CHECK(trace.init_queries[0].shape() == Shape{3, 3, 8});
    CHECK(trace.init_queries[2].shape() == Shape{3, 2, 8});
    CHECK(trace.init_queries[0].values()[0] == net.init_queries.values()[0]);

    NoGradGuard no_grad;
    const auto first = model::forward_clip(net, synth::frames_tensor(video, 0, 3), model::init_tracklet_state(net, 3));
    const Tensor expected = train::handoff_queries(first.final().queries, 3);
    const auto got = trace.init_queries[1].values();
    const auto want = expected.values();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);

    CHECK(out.frames == 8);
    for (const PredictedTracklet& t : out.tracklets) {
      CHECK(t.masks.size() == 8);
      CHECK(t.masks[0].size() == 32 * 32);
      CHECK(t.label >= 0);
      CHECK(t.label < 3);
      CHECK(t.score >= 0.0);
      CHECK(t.score <= 1.0);
    }
  }

  TEST_CASE("infer_video: a slot empty for reinit_k clips restarts from q* with a new identity") {
    const synth::Dataset data = synth::generate_dataset(tiny_scene());
    model::Model net(tiny_config(32));
    force_no_object(net, 100.0);
    InferenceTrace trace;
    // Four clips of two frames.
    const VideoPredictions out = infer_video(net, data.videos[0], 2, 2, &trace);
    REQUIRE(trace.reset.size() == 4);
    for (const auto& e : trace.empty) CHECK(e == std::vector<std::uint8_t>{1, 1, 1});
    CHECK(trace.reset[1] == std::vector<std::uint8_t>{0, 0, 0});
    CHECK(trace.reset[2] == std::vector<std::uint8_t>{1, 1, 1});
    CHECK(trace.reset[3] == std::vector<std::uint8_t>{0, 0, 0});
    CHECK(trace.identity[1] == std::vector<int>{0, 1, 2});
    CHECK(trace.identity[2] == std::vector<int>{3, 4, 5});
    CHECK(out.tracklets.size() == 6);

    const auto init = trace.init_queries[2].values();
    const auto qstar = net.init_queries.values();
    const std::size_t c = 8;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t f = 0; f < 2; ++f) {
        for (std::size_t i = 0; i < c; ++i) CHECK(init[(s * 2 + f) * c + i] == qstar[s * c + i]);
      }
    }

    // reinit_k = 0 keeps every slot on its handoff.
    InferenceTrace never;
    infer_video(net, data.videos[0], 2, 0, &never);
    for (const auto& r : never.reset) CHECK(r == std::vector<std::uint8_t>{0, 0, 0});
  }

  TEST_CASE("infer_video never associates; the baseline does") {
    const synth::Dataset data = synth::generate_dataset(tiny_scene());
    model::Model net(tiny_config(32));
    force_no_object(net, -100.0);
    const std::size_t h0 = train::hungarian_calls(), a0 = link_affinity_calls();
    infer_video(net, data.videos[0], 3);
    CHECK(train::hungarian_calls() == h0);
    CHECK(link_affinity_calls() == a0);
    const VideoPredictions linked = handcrafted_link_baseline(net, data.videos[0], 3);
    CHECK(train::hungarian_calls() > h0);
    CHECK(link_affinity_calls() > a0);
    CHECK(linked.tracklets.size() >= 3);
  }

  TEST_CASE("infer_video: deterministic and validates its input") {
    const synth::Dataset data = synth::generate_dataset(tiny_scene());
    const model::Model net(tiny_config(32));
    const VideoPredictions a = infer_video(net, data.videos[1], 4);
    const VideoPredictions b = infer_video(net, data.videos[1], 4);
    CHECK(to_json(a).dump() == to_json(b).dump());
    CHECK_THROWS_AS(infer_video(net, data.videos[0], 0), std::invalid_argument);
    const model::Model small(tiny_config(16));
    CHECK_THROWS_AS(infer_video(small, data.videos[0], 4), std::invalid_argument);
  }

  TEST_CASE("link_affinity: hand values") {
    ClipTracklet a;
    a.class_prob = {{0.8, 0.1, 0.05, 0.05}};
    a.boxes = {Box{0, 0, 10, 10}};
    a.masks = {box_mask(20, 20, 0, 0, 10, 10)};
    LinkConfig cfg;
    // Identical: IoU 1, L1 0, mask IoU 1, same class.
    CHECK(link_affinity(a, a, 20, 20, cfg) == doctest::Approx(3.0));
    ClipTracklet b = a;
    b.class_prob = {{0.1, 0.8, 0.05, 0.05}};
    b.boxes = {Box{10, 0, 20, 10}};
    b.masks = {box_mask(20, 20, 10, 0, 20, 10)};
    // Disjoint, shifted by half the frame twice, different class.
    CHECK(link_affinity(a, b, 20, 20, cfg) == doctest::Approx(-1.0));
    cfg.box_l1_weight = 0;
    CHECK(link_affinity(a, b, 20, 20, cfg) == doctest::Approx(0.0));
  }

  TEST_CASE("evaluate_dataset runs both linking modes and strides") {
    const synth::SceneConfig scene = tiny_scene();
    const synth::Dataset data = synth::generate_dataset(scene);
    const model::Model net(tiny_config(32));
    EvalConfig cfg;
    cfg.clip_len = 4;
    std::vector<VideoPredictions> preds;
    const Metrics e2e = evaluate_dataset(net, data, cfg, &preds);
    CHECK(preds.size() == 2);
    CHECK(e2e.continuity_pairs > 0);
    cfg.linking = Linking::Handcrafted;
    cfg.stride = 2;
    const Metrics hand = evaluate_dataset(net, data, cfg);
    for (const Metrics& m : {e2e, hand}) {
      for (double x : {m.ap, m.ap50, m.ar1, m.ar10, m.identity_continuity}) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
      }
    }
    cfg.stride = 0;
    CHECK_THROWS_AS(evaluate_dataset(net, data, cfg), std::invalid_argument);
  }

  TEST_CASE("metrics JSON has the fixed key order") {
    Metrics m;
    m.ap = 0.25;
    const auto j = to_json(m);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"AP", "AP50", "AP75", "AR1", "AR10", "identity_continuity"});
    CHECK(linking_from_string(to_string(Linking::Handcrafted)) == Linking::Handcrafted);
    CHECK_THROWS_AS(linking_from_string("nearest"), std::invalid_argument);
  }

  TEST_CASE("overlays: stable colours and readable P6 frames") {
    CHECK(identity_color(3) == identity_color(3));
    for (int i = 0; i < 12; ++i) {
      for (int j = i + 1; j < 12; ++j) CHECK(identity_color(i) != identity_color(j));
    }

    const synth::Dataset data = synth::generate_dataset(tiny_scene());
    const synth::Video& video = data.videos[0];
    VideoPredictions p;
    p.height = p.width = 32;
    p.frames = video.num_frames();
    std::vector<Mask> masks(p.frames, Mask(32 * 32, 0));
    masks[0] = box_mask(32, 32, 4, 4, 8, 8);
    p.tracklets = {prediction(5, 0, 1.0, masks)};
    p.tracklets[0].boxes[0] = Box{4, 4, 8, 8};

    const auto dir = std::filesystem::temp_directory_path() / "evis_overlay_test";
    std::filesystem::remove_all(dir);
    const auto paths = render_overlays(video, p, dir);
    REQUIRE(paths.size() == video.num_frames());
    const auto f0 = synth::read_netpbm(paths[0], 32, 32, 3);
    const auto col = identity_color(5);
    // Interior of the mask: half-way between the frame and the colour.
    const std::size_t i = (6 * 32 + 6) * 3;
    for (int c = 0; c < 3; ++c) CHECK(f0[i + c] == (video.frames[0][i + c] + col[c] + 1) / 2);
    // Box corner drawn in the identity colour.
    const std::size_t corner = (4 * 32 + 4) * 3;
    for (int c = 0; c < 3; ++c) CHECK(f0[corner + c] == col[c]);
    // Frames without predictions are unchanged.
    CHECK(synth::read_netpbm(paths[1], 32, 32, 3) == video.frames[1]);
    std::filesystem::remove_all(dir);

    p.frames = 3;
    CHECK_THROWS_AS(render_overlays(video, p, dir), std::invalid_argument);
  }
}
