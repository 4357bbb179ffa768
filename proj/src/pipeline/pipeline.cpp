#include "evis/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "evis/train.hpp"

namespace evis::pipeline {

namespace {

std::atomic<std::size_t> g_affinity_calls{0};

/// Per-slot view of the final head output of a clip.
std::vector<ClipTracklet> clip_tracklets(const model::HeadOutput& out, std::size_t frame_h, std::size_t frame_w) {
  const std::size_t n = out.class_logits.dim(0), t = out.class_logits.dim(1), k1 = out.class_logits.dim(2);
  const std::size_t p = frame_h * frame_w;
  const Tensor prob = softmax(out.class_logits, 2);
  const auto pv = prob.values();
  const auto bv = out.boxes.values();
  const auto mv = out.frame_masks.values();
  std::vector<ClipTracklet> res(n);
  for (std::size_t q = 0; q < n; ++q) {
    ClipTracklet& c = res[q];
    c.slot = q;
    std::size_t empty_frames = 0;
    for (std::size_t f = 0; f < t; ++f) {
      const std::size_t row = q * t + f;
      c.class_prob.emplace_back(pv.begin() + row * k1, pv.begin() + (row + 1) * k1);
      const auto best = std::max_element(c.class_prob.back().begin(), c.class_prob.back().end());
      if (static_cast<std::size_t>(best - c.class_prob.back().begin()) == k1 - 1) ++empty_frames;
      c.boxes.push_back({bv[row * 4], bv[row * 4 + 1], bv[row * 4 + 2], bv[row * 4 + 3]});
      Mask m(p);
      // sigmoid(x) >= 0.5 exactly when x >= 0
      for (std::size_t i = 0; i < p; ++i) m[i] = mv[row * p + i] >= 0.0 ? 1 : 0;
      c.masks.push_back(std::move(m));
    }
    c.empty = 2 * empty_frames > t;
  }
  return res;
}

/// Collects per-frame outputs under identities and finalises them into tracklets.
class TrackletBuilder {
 public:
  TrackletBuilder(std::size_t frames, std::size_t h, std::size_t w, std::size_t k) : frames_(frames), h_(h), w_(w), k_(k) {}

  void add(int identity, std::size_t frame, const ClipTracklet& c, std::size_t clip_frame) {
    auto [it, fresh] = acc_.try_emplace(identity);
    Acc& a = it->second;
    if (fresh) {
      a.t.identity = identity;
      a.t.first_frame = frame;
      a.t.masks.assign(frames_, Mask(h_ * w_, 0));
      a.t.boxes.assign(frames_, Box{0, 0, 0, 0});
      a.t.frame_labels.assign(frames_, static_cast<int>(k_));
      a.prob_sum.assign(k_ + 1, 0.0);
    }
    a.t.first_frame = std::min(a.t.first_frame, frame);
    a.t.last_frame = std::max(a.t.last_frame, frame + 1);
    a.t.masks[frame] = c.masks[clip_frame];
    a.t.boxes[frame] = c.boxes[clip_frame];
    const auto& pr = c.class_prob[clip_frame];
    a.t.frame_labels[frame] = static_cast<int>(std::max_element(pr.begin(), pr.end()) - pr.begin());
    for (std::size_t i = 0; i <= k_; ++i) a.prob_sum[i] += pr[i];
    ++a.count;
  }

  VideoPredictions finish() {
    VideoPredictions out;
    out.height = h_;
    out.width = w_;
    out.frames = frames_;
    for (auto& [id, a] : acc_) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < k_; ++i) {
        if (a.prob_sum[i] > a.prob_sum[best]) best = i;
      }
      a.t.label = static_cast<int>(best);
      a.t.score = a.prob_sum[best] / static_cast<double>(a.count);
      out.tracklets.push_back(std::move(a.t));
    }
    return out;
  }

 private:
  struct Acc {
    PredictedTracklet t;
    std::vector<double> prob_sum;
    std::size_t count = 0;
  };
  std::size_t frames_, h_, w_, k_;
  std::map<int, Acc> acc_;
};

void check_video(const model::Model& model, const synth::Video& video, std::size_t clip_len) {
  if (clip_len == 0) throw std::invalid_argument("inference: clip length must be positive");
  if (video.num_frames() == 0) throw std::invalid_argument("inference: empty video");
  if (video.height != model.config().frame_h || video.width != model.config().frame_w) {
    throw std::invalid_argument("inference: video size does not match the model");
  }
}

double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double binary_mask_iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    uni += a[i] | b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> split_clips(std::size_t frames, std::size_t clip_len) {
  if (clip_len == 0) throw std::invalid_argument("split_clips: clip length must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < frames; s += clip_len) out.emplace_back(s, std::min(clip_len, frames - s));
  return out;
}

VideoPredictions infer_video(const model::Model& model, const synth::Video& video, std::size_t clip_len,
                             std::size_t reinit_k, InferenceTrace* trace) {
  check_video(model, video, clip_len);
  NoGradGuard no_grad;
  const model::ModelConfig& cfg = model.config();
  const std::size_t n = cfg.queries, c = cfg.channels;
  TrackletBuilder builder(video.num_frames(), video.height, video.width, cfg.num_classes);

  std::vector<int> identity(n);
  for (std::size_t q = 0; q < n; ++q) identity[q] = static_cast<int>(q);
  int next_identity = static_cast<int>(n);
  std::vector<std::size_t> empty_run(n, 0);
  Tensor previous_queries;

  for (const auto& [start, len] : split_clips(video.num_frames(), clip_len)) {
    std::vector<std::uint8_t> reset(n, 0);
    model::TrackletState state;
    if (!previous_queries.defined()) {
      state = model::init_tracklet_state(model, len);
    } else {
      const Tensor handed = train::handoff_queries(previous_queries, len);
      std::vector<double> q(handed.values().begin(), handed.values().end());
      const auto qstar = model.init_queries.values();
      for (std::size_t s = 0; s < n; ++s) {
        if (reinit_k == 0 || empty_run[s] < reinit_k) continue;
        for (std::size_t f = 0; f < len; ++f) std::copy_n(qstar.begin() + s * c, c, q.begin() + (s * len + f) * c);
        reset[s] = 1;
        empty_run[s] = 0;
        identity[s] = next_identity++;
      }
      state = model::handoff_state(model, Tensor({n, len, c}, std::move(q)));
    }
    const model::ClipPredictions preds = model::forward_clip(model, synth::frames_tensor(video, start, len), state);
    const std::vector<ClipTracklet> slots = clip_tracklets(preds.final(), video.height, video.width);

    std::vector<std::uint8_t> empty(n, 0);
    for (std::size_t s = 0; s < n; ++s) {
      empty[s] = slots[s].empty ? 1 : 0;
      empty_run[s] = slots[s].empty ? empty_run[s] + 1 : 0;
      for (std::size_t f = 0; f < len; ++f) builder.add(identity[s], start + f, slots[s], f);
    }
    if (trace) {
      trace->clip_starts.push_back(start);
      trace->init_queries.push_back(state.queries);
      trace->empty.push_back(empty);
      trace->reset.push_back(reset);
      trace->identity.push_back(identity);
    }
    previous_queries = preds.final().queries;
  }
  return builder.finish();
}

// ---- hand-crafted linking ------------------------------------------------------

nlohmann::ordered_json to_json(const LinkConfig& c) {
  return {{"box_iou_weight", c.box_iou_weight},
          {"box_l1_weight", c.box_l1_weight},
          {"mask_iou_weight", c.mask_iou_weight},
          {"class_weight", c.class_weight},
          {"threshold", c.threshold}};
}

LinkConfig link_config_from_json(const nlohmann::json& j) {
  LinkConfig c;
  c.box_iou_weight = j.value("box_iou_weight", c.box_iou_weight);
  c.box_l1_weight = j.value("box_l1_weight", c.box_l1_weight);
  c.mask_iou_weight = j.value("mask_iou_weight", c.mask_iou_weight);
  c.class_weight = j.value("class_weight", c.class_weight);
  c.threshold = j.value("threshold", c.threshold);
  return c;
}

double link_affinity(const ClipTracklet& previous, const ClipTracklet& next, std::size_t frame_h,
                     std::size_t frame_w, const LinkConfig& config) {
  ++g_affinity_calls;
  if (previous.boxes.empty() || next.boxes.empty()) throw std::invalid_argument("link_affinity: empty tracklet");
  const Box& a = previous.boxes.back();
  const Box& b = next.boxes.front();
  const double w = static_cast<double>(frame_w), h = static_cast<double>(frame_h);
  const double l1 = std::abs(a[0] - b[0]) / w + std::abs(a[1] - b[1]) / h + std::abs(a[2] - b[2]) / w +
                    std::abs(a[3] - b[3]) / h;
  const bool same_class = argmax(previous.class_prob.back()) == argmax(next.class_prob.front());
  return config.box_iou_weight * box_iou(a, b) - config.box_l1_weight * l1 +
         config.mask_iou_weight * binary_mask_iou(previous.masks.back(), next.masks.front()) +
         config.class_weight * (same_class ? 1.0 : 0.0);
}

std::size_t link_affinity_calls() { return g_affinity_calls.load(); }

VideoPredictions handcrafted_link_baseline(const model::Model& model, const synth::Video& video,
                                           std::size_t clip_len, const LinkConfig& config) {
  check_video(model, video, clip_len);
  NoGradGuard no_grad;
  const model::ModelConfig& cfg = model.config();
  TrackletBuilder builder(video.num_frames(), video.height, video.width, cfg.num_classes);
  int next_identity = 0;
  std::vector<ClipTracklet> previous;
  std::vector<int> previous_ids;

  for (const auto& [start, len] : split_clips(video.num_frames(), clip_len)) {
    const model::ClipPredictions preds = model::forward_clip(model, synth::frames_tensor(video, start, len),
                                                             model::init_tracklet_state(model, len));
    std::vector<ClipTracklet> current;
    for (ClipTracklet& c : clip_tracklets(preds.final(), video.height, video.width)) {
      if (!c.empty) current.push_back(std::move(c));
    }
    std::vector<int> ids(current.size(), -1);
    if (!previous.empty() && !current.empty()) {
      const std::size_t np = previous.size(), nc = current.size();
      std::vector<double> affinity(np * nc);
      for (std::size_t i = 0; i < np; ++i) {
        for (std::size_t j = 0; j < nc; ++j) {
          affinity[i * nc + j] = link_affinity(previous[i], current[j], video.height, video.width, config);
        }
      }
      // hungarian() wants at least as many rows as columns.
      const bool prev_rows = np >= nc;
      const std::size_t rows = prev_rows ? np : nc, cols = prev_rows ? nc : np;
      std::vector<double> cost(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t col = 0; col < cols; ++col) {
          cost[r * cols + col] = prev_rows ? -affinity[r * nc + col] : -affinity[col * nc + r];
        }
      }
      for (const auto& [r, col] : train::hungarian(cost, rows, cols).pairs) {
        const std::size_t i = prev_rows ? r : col, j = prev_rows ? col : r;
        if (affinity[i * nc + j] >= config.threshold) ids[j] = previous_ids[i];
      }
    }
    for (std::size_t j = 0; j < current.size(); ++j) {
      if (ids[j] < 0) ids[j] = next_identity++;
      for (std::size_t f = 0; f < len; ++f) builder.add(ids[j], start + f, current[j], f);
    }
    previous = std::move(current);
    previous_ids = std::move(ids);
  }
  return builder.finish();
}

// ---- evaluation ----------------------------------------------------------------

std::vector<GroundTruthTube> ground_truth_tubes(const std::vector<synth::Tracklet>& tracklets) {
  std::vector<GroundTruthTube> out;
  for (const synth::Tracklet& tr : tracklets) {
    if (!tr.ever_visible()) continue;
    GroundTruthTube g;
    g.instance_id = tr.instance_id;
    for (int c : tr.class_per_frame) {
      if (c != synth::kNoObject) {
        g.label = c;
        break;
      }
    }
    g.masks = tr.mask_per_frame;
    out.push_back(std::move(g));
  }
  return out;
}

double video_iou(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("video_iou: tubes have different lengths");
  std::size_t inter = 0, uni = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].size() != gt[t].size()) throw std::invalid_argument("video_iou: frame sizes differ");
    for (std::size_t i = 0; i < pred[t].size(); ++i) {
      const bool p = pred[t][i] != 0, g = gt[t][i] != 0;
      inter += p && g;
      uni += p || g;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

nlohmann::ordered_json to_json(const Metrics& m) {
  return {{"AP", m.ap},
          {"AP50", m.ap50},
          {"AP75", m.ap75},
          {"AR1", m.ar1},
          {"AR10", m.ar10},
          {"identity_continuity", m.identity_continuity}};
}

namespace {

struct Detection {
  std::size_t video = 0;
  std::size_t index = 0;  // within the video's predictions
  double score = 0.0;
  int identity = 0;
};

// Highest score first; ties by video, then identity, so the result does not
// depend on the order predictions were supplied in.
bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.video != b.video) return a.video < b.video;
  return a.identity < b.identity;
}

/// Greedy matching of score-ordered detections to unmatched ground truth of
/// the same video; each detection takes its best-IoU remaining tube.
/// Returns a TP flag per detection.
std::vector<std::uint8_t> greedy_match(const std::vector<Detection>& dets, const std::vector<std::vector<std::size_t>>& gts,
                                       const std::vector<std::vector<std::vector<double>>>& iou, double threshold) {
  std::vector<std::vector<std::uint8_t>> taken(gts.size());
  for (std::size_t v = 0; v < gts.size(); ++v) taken[v].assign(gts[v].size(), 0);
  std::vector<std::uint8_t> tp(dets.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    const Detection& det = dets[d];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[det.video].size(); ++g) {
      if (taken[det.video][g]) continue;
      const double o = iou[det.video][det.index][g];
      if (o >= threshold && o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best >= 0.0) {
      taken[det.video][best_g] = 1;
      tp[d] = 1;
    }
  }
  return tp;
}

/// 101-point interpolated AP of a ranked TP/FP list against `positives` ground truths.
double interpolated_ap(const std::vector<std::uint8_t>& tp, std::size_t positives) {
  std::vector<double> precision, recall;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    precision.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(hits) / static_cast<double>(positives));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

}  // namespace

Metrics evaluate(const std::vector<EvalVideo>& videos, std::size_t num_classes) {
  std::vector<double> thresholds;
  for (int i = 0; i < 10; ++i) thresholds.push_back((50 + 5 * i) / 100.0);

  Metrics m;
  std::size_t classes_with_gt = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const int label = static_cast<int>(k);
    // Per video: ground truth of this class, detections of this class and their IoUs.
    std::vector<std::vector<std::size_t>> gts(videos.size());
    std::vector<std::vector<std::vector<double>>> iou(videos.size());
    std::vector<Detection> dets;
    std::size_t positives = 0;
    for (std::size_t v = 0; v < videos.size(); ++v) {
      const EvalVideo& ev = videos[v];
      for (std::size_t g = 0; g < ev.ground_truth.size(); ++g) {
        if (ev.ground_truth[g].label == label) gts[v].push_back(g);
      }
      positives += gts[v].size();
      iou[v].resize(ev.predictions.size());
      for (std::size_t p = 0; p < ev.predictions.size(); ++p) {
        const PredictedTracklet& pt = ev.predictions[p];
        if (pt.label != label) continue;
        dets.push_back({v, p, pt.score, pt.identity});
        for (std::size_t g : gts[v]) iou[v][p].push_back(video_iou(pt.masks, ev.ground_truth[g].masks));
      }
    }
    if (positives == 0) continue;
    ++classes_with_gt;
    std::sort(dets.begin(), dets.end(), detection_before);

    // Top-k detections of each video for AR@k.
    auto top_k = [&](std::size_t limit) {
      std::vector<Detection> out;
      std::vector<std::size_t> used(videos.size(), 0);
      for (const Detection& d : dets) {
        if (used[d.video] < limit) {
          out.push_back(d);
          ++used[d.video];
        }
      }
      return out;
    };
    const std::vector<Detection> top1 = top_k(1), top10 = top_k(10);

    double ap_sum = 0.0, ar1_sum = 0.0, ar10_sum = 0.0;
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      const double ap = interpolated_ap(greedy_match(dets, gts, iou, thresholds[ti]), positives);
      ap_sum += ap;
      if (ti == 0) m.ap50 += ap;
      if (ti == 5) m.ap75 += ap;
      auto recall = [&](const std::vector<Detection>& d) {
        const auto tp = greedy_match(d, gts, iou, thresholds[ti]);
        return static_cast<double>(std::count(tp.begin(), tp.end(), 1)) / static_cast<double>(positives);
      };
      ar1_sum += recall(top1);
      ar10_sum += recall(top10);
    }
    const double nt = static_cast<double>(thresholds.size());
    m.ap += ap_sum / nt;
    m.ar1 += ar1_sum / nt;
    m.ar10 += ar10_sum / nt;
  }
  if (classes_with_gt > 0) {
    const double nc = static_cast<double>(classes_with_gt);
    m.ap /= nc;
    m.ap50 /= nc;
    m.ap75 /= nc;
    m.ar1 /= nc;
    m.ar10 /= nc;
  }
  return m;
}

Continuity identity_continuity(const VideoPredictions& preds, const std::vector<synth::Tracklet>& tracklets,
                               std::size_t clip_len) {
  const auto clips = split_clips(preds.frames, clip_len);
  // Identity with the most pixels on the tracklet within a clip, -1 if none.
  auto dominant = [&](const synth::Tracklet& tr, std::size_t start, std::size_t len) {
    int best_id = -1;
    std::size_t best = 0;
    for (const PredictedTracklet& p : preds.tracklets) {
      std::size_t overlap = 0;
      for (std::size_t f = start; f < start + len; ++f) {
        if (!tr.visible(f)) continue;
        const Mask& gm = tr.mask_per_frame[f];
        const Mask& pm = p.masks[f];
        for (std::size_t i = 0; i < gm.size(); ++i) overlap += gm[i] & pm[i];
      }
      if (overlap > best || (overlap == best && overlap > 0 && p.identity < best_id)) {
        best = overlap;
        best_id = p.identity;
      }
    }
    return best_id;
  };
  auto visible_in = [](const synth::Tracklet& tr, std::size_t start, std::size_t len) {
    for (std::size_t f = start; f < start + len; ++f) {
      if (tr.visible(f)) return true;
    }
    return false;
  };

  Continuity c;
  for (const synth::Tracklet& tr : tracklets) {
    if (tr.class_per_frame.size() != preds.frames) {
      throw std::invalid_argument("identity_continuity: tracklet length does not match the predictions");
    }
    for (std::size_t b = 0; b + 1 < clips.size(); ++b) {
      const auto [s0, l0] = clips[b];
      const auto [s1, l1] = clips[b + 1];
      if (!visible_in(tr, s0, l0) || !visible_in(tr, s1, l1)) continue;
      ++c.pairs;
      const int before = dominant(tr, s0, l0);
      if (before >= 0 && before == dominant(tr, s1, l1)) ++c.same;
    }
  }
  return c;
}

std::string to_string(Linking l) { return l == Linking::EndToEnd ? "e2e" : "handcrafted"; }

Linking linking_from_string(const std::string& s) {
  if (s == "e2e") return Linking::EndToEnd;
  if (s == "handcrafted") return Linking::Handcrafted;
  throw std::invalid_argument("unknown linking mode '" + s + "' (expected e2e or handcrafted)");
}

Metrics evaluate_dataset(const model::Model& model, const synth::Dataset& dataset, const EvalConfig& config,
                         std::vector<VideoPredictions>* predictions) {
  if (config.stride == 0) throw std::invalid_argument("evaluate_dataset: stride must be positive");
  std::vector<EvalVideo> eval;
  Continuity cont;
  for (const synth::Video& full : dataset.videos) {
    const synth::Video video = synth::subsample(full, config.stride);
    const auto tracklets = synth::subsample(synth::extract_ground_truth(full, dataset.config), config.stride);
    VideoPredictions p = config.linking == Linking::EndToEnd
                             ? infer_video(model, video, config.clip_len, config.reinit_k)
                             : handcrafted_link_baseline(model, video, config.clip_len, config.link);
    const Continuity c = identity_continuity(p, tracklets, config.clip_len);
    cont.same += c.same;
    cont.pairs += c.pairs;
    eval.push_back({p.tracklets, ground_truth_tubes(tracklets)});
    if (predictions) predictions->push_back(std::move(p));
  }
  Metrics m = evaluate(eval, dataset.config.shape_classes.size());
  m.identity_continuity = cont.fraction();
  m.continuity_pairs = cont.pairs;
  return m;
}

nlohmann::ordered_json to_json(const VideoPredictions& p) {
  nlohmann::ordered_json tracks = nlohmann::ordered_json::array();
  for (const PredictedTracklet& t : p.tracklets) {
    // Masks as run lengths alternating 0-runs and 1-runs, starting with zeros.
    nlohmann::ordered_json masks = nlohmann::ordered_json::array();
    for (const Mask& m : t.masks) {
      std::vector<std::size_t> runs;
      std::uint8_t cur = 0;
      std::size_t len = 0;
      for (std::uint8_t v : m) {
        if (v != cur) {
          runs.push_back(len);
          cur = v;
          len = 0;
        }
        ++len;
      }
      runs.push_back(len);
      masks.push_back(runs);
    }
    tracks.push_back({{"identity", t.identity},
                      {"label", t.label},
                      {"score", t.score},
                      {"first_frame", t.first_frame},
                      {"last_frame", t.last_frame},
                      {"frame_labels", t.frame_labels},
                      {"boxes", t.boxes},
                      {"masks_rle", masks}});
  }
  return {{"height", p.height}, {"width", p.width}, {"frames", p.frames}, {"tracklets", tracks}};
}

// ---- overlays ------------------------------------------------------------------

std::array<std::uint8_t, 3> identity_color(int identity) {
  // Golden-ratio hue steps keep consecutive identities far apart.
  double hue = std::fmod(0.13 + 0.6180339887498949 * static_cast<double>(identity), 1.0);
  if (hue < 0) hue += 1.0;
  const double s = 0.85, v = 0.95;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  auto byte = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {byte(r), byte(g), byte(b)};
}

std::vector<std::filesystem::path> render_overlays(const synth::Video& video, const VideoPredictions& preds,
                                                   const std::filesystem::path& out_dir, const std::string& prefix) {
  if (preds.frames != video.num_frames() || preds.height != video.height || preds.width != video.width) {
    throw std::invalid_argument("render_overlays: predictions do not match the video");
  }
  std::filesystem::create_directories(out_dir);
  const std::size_t h = video.height, w = video.width;
  std::vector<std::filesystem::path> written;
  for (std::size_t f = 0; f < video.num_frames(); ++f) {
    std::vector<std::uint8_t> rgb = video.frames[f];
    for (const PredictedTracklet& t : preds.tracklets) {
      const auto col = identity_color(t.identity);
      const Mask& m = t.masks[f];
      bool any = false;
      for (std::size_t i = 0; i < h * w; ++i) {
        if (!m[i]) continue;
        any = true;
        for (int c = 0; c < 3; ++c) {
          rgb[i * 3 + c] = static_cast<std::uint8_t>((rgb[i * 3 + c] + col[c] + 1) / 2);
        }
      }
      if (!any) continue;
      const Box& b = t.boxes[f];
      auto px = [](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
      };
      const std::size_t x1 = px(b[0], w), x2 = px(b[2], w), y1 = px(b[1], h), y2 = px(b[3], h);
      auto put = [&](std::size_t y, std::size_t x) { std::copy(col.begin(), col.end(), rgb.begin() + (y * w + x) * 3); };
      for (std::size_t x = x1; x <= x2; ++x) {
        put(y1, x);
        put(y2, x);
      }
      for (std::size_t y = y1; y <= y2; ++y) {
        put(y, x1);
        put(y, x2);
      }
    }
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04zu.ppm", prefix.c_str(), f);
    const auto path = out_dir / name;
    synth::write_ppm(path, h, w, rgb);
    written.push_back(path);
  }
  return written;
}

}  // namespace evis::pipeline
