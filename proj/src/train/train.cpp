#include "evis/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace evis::train {

// ---- assignment --------------------------------------------------------------

namespace {
std::atomic<std::size_t> g_hungarian_calls{0};
}

std::size_t hungarian_calls() { return g_hungarian_calls.load(); }

Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  ++g_hungarian_calls;
  if (cost.size() != rows * cols) throw std::invalid_argument("hungarian: cost size does not match its shape");
  if (cols > rows) throw std::invalid_argument("hungarian: more ground truths than predictions");
  for (double c : cost) {
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
  }
  Assignment out;
  if (cols == 0) {
    for (std::size_t r = 0; r < rows; ++r) out.unmatched.push_back(r);
    return out;
  }
  // Shortest augmenting paths with potentials; the ground truths play the
  // role of the (fewer) workers and the predictions the jobs. 1-based.
  const std::size_t n = cols, m = rows;
  const double inf = std::numeric_limits<double>::infinity();
  auto a = [&](std::size_t worker, std::size_t job) { return cost[(job - 1) * cols + (worker - 1)]; };
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] == 0) {
      out.unmatched.push_back(j - 1);
    } else {
      out.pairs.emplace_back(j - 1, owner[j] - 1);
      out.total_cost += cost[(j - 1) * cols + (owner[j] - 1)];
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
  return out;
}

// ---- targets -----------------------------------------------------------------

std::vector<std::size_t> visible_tracklets(const std::vector<synth::Tracklet>& tracklets, std::size_t start,
                                           std::size_t length) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < tracklets.size(); ++k) {
    for (std::size_t t = start; t < start + length; ++t) {
      if (tracklets[k].visible(t)) {
        out.push_back(k);
        break;
      }
    }
  }
  return out;
}

std::vector<ClipTarget> clip_targets(const std::vector<synth::Tracklet>& tracklets, const std::vector<std::size_t>& keep,
                                     std::size_t start, std::size_t length, std::size_t num_classes) {
  std::vector<ClipTarget> out;
  for (std::size_t k : keep) {
    const synth::Tracklet& tr = tracklets.at(k);
    if (start + length > tr.class_per_frame.size()) throw std::out_of_range("clip_targets: frame range out of bounds");
    ClipTarget c;
    c.instance_id = tr.instance_id;
    for (std::size_t t = start; t < start + length; ++t) {
      const bool vis = tr.visible(t);
      c.visible.push_back(vis ? 1 : 0);
      c.labels.push_back(vis ? tr.class_per_frame[t] : static_cast<int>(num_classes));
      c.boxes.push_back(tr.box_per_frame[t]);
      c.masks.emplace_back(tr.mask_per_frame[t].begin(), tr.mask_per_frame[t].end());
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---- losses ------------------------------------------------------------------

nlohmann::ordered_json to_json(const LossWeights& w) {
  return {{"cls", w.cls}, {"l1", w.l1}, {"giou", w.giou}, {"ce", w.ce}, {"dice", w.dice}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.cls = j.value("cls", w.cls);
  w.l1 = j.value("l1", w.l1);
  w.giou = j.value("giou", w.giou);
  w.ce = j.value("ce", w.ce);
  w.dice = j.value("dice", w.dice);
  return w;
}

double giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  const double enclose = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / uni - (enclose - uni) / enclose;
}

double box_loss(const std::array<double, 4>& a, const std::array<double, 4>& b, std::size_t frame_h,
                std::size_t frame_w, double l1_weight, double giou_weight) {
  const double scale[4] = {static_cast<double>(frame_w), static_cast<double>(frame_h), static_cast<double>(frame_w),
                           static_cast<double>(frame_h)};
  double l1 = 0.0;
  for (int i = 0; i < 4; ++i) l1 += std::abs(a[i] - b[i]) / scale[i];
  return l1_weight * l1 + giou_weight * (1.0 - giou(a, b));
}

double mask_iou(std::span<const double> prob, std::span<const double> target) {
  if (prob.size() != target.size()) throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = prob[i] >= 0.5, t = target[i] > 0.5;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Tensor dice_loss(const Tensor& prob, const Tensor& target) {
  const Tensor num = add_scalar(mul_scalar(sum(mul(prob, target), 1), 2.0), 1.0);
  const Tensor den = add_scalar(add(sum(prob, 1), sum(target, 1)), 1.0);
  return mean(sub(Tensor::scalar(1.0), div(num, den)));
}

double dice_loss(std::span<const double> prob, std::span<const double> target) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * target[i];
    sp += prob[i];
    st += target[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

QueryPrediction query_prediction(const model::HeadOutput& out, std::size_t query) {
  const Shape& cs = out.class_logits.shape();
  const std::size_t t_len = cs[1], k1 = cs[2];
  const std::size_t hw = out.frame_masks.shape()[2] * out.frame_masks.shape()[3];
  const auto logits = out.class_logits.values(), boxes = out.boxes.values(), masks = out.frame_masks.values();
  QueryPrediction p;
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* l = logits.data() + (query * t_len + t) * k1;
    const double mx = *std::max_element(l, l + k1);
    std::vector<double> prob(k1);
    double z = 0.0;
    for (std::size_t k = 0; k < k1; ++k) z += (prob[k] = std::exp(l[k] - mx));
    for (double& x : prob) x /= z;
    p.class_prob.push_back(std::move(prob));
    const double* b = boxes.data() + (query * t_len + t) * 4;
    p.boxes.push_back({b[0], b[1], b[2], b[3]});
    const double* m = masks.data() + (query * t_len + t) * hw;
    std::vector<double> mp(hw);
    for (std::size_t i = 0; i < hw; ++i) mp[i] = 1.0 / (1.0 + std::exp(-m[i]));
    p.mask_prob.push_back(std::move(mp));
  }
  return p;
}

double match_cost(const QueryPrediction& pred, const ClipTarget& gt, std::size_t frame_h, std::size_t frame_w,
                  const LossWeights& w) {
  double cost = 0.0;
  for (std::size_t t = 0; t < gt.labels.size(); ++t) {
    cost -= pred.class_prob[t][static_cast<std::size_t>(gt.labels[t])];
    if (gt.visible[t]) {
      cost += box_loss(pred.boxes[t], gt.boxes[t], frame_h, frame_w, w.l1, w.giou);
      cost -= mask_iou(pred.mask_prob[t], gt.masks[t]);
    }
  }
  return cost;
}

Assignment match(const model::HeadOutput& out, const std::vector<ClipTarget>& targets, std::size_t frame_h,
                 std::size_t frame_w, const LossWeights& w) {
  const std::size_t n = out.class_logits.shape()[0], g = targets.size();
  std::vector<double> cost(n * g);
  for (std::size_t i = 0; i < n; ++i) {
    const QueryPrediction p = query_prediction(out, i);
    for (std::size_t j = 0; j < g; ++j) cost[i * g + j] = match_cost(p, targets[j], frame_h, frame_w, w);
  }
  return hungarian(cost, n, g);
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  class_term += o.class_term;
  box_l1_term += o.box_l1_term;
  box_giou_term += o.box_giou_term;
  mask_ce_term += o.mask_ce_term;
  dice_term += o.dice_term;
  total += o.total;
  if (!o.total_tensor.defined()) return *this;
  total_tensor = total_tensor.defined() ? add(total_tensor, o.total_tensor) : o.total_tensor;
  return *this;
}

namespace {

// GIoU of [E, 4] box tensors -> [E, 1].
Tensor giou_tensor(const Tensor& a, const Tensor& b) {
  auto col = [](const Tensor& x, std::size_t i) { return slice(x, 1, i, 1); };
  const Tensor iw = relu(sub(minimum(col(a, 2), col(b, 2)), maximum(col(a, 0), col(b, 0))));
  const Tensor ih = relu(sub(minimum(col(a, 3), col(b, 3)), maximum(col(a, 1), col(b, 1))));
  const Tensor inter = mul(iw, ih);
  const Tensor area_a = mul(sub(col(a, 2), col(a, 0)), sub(col(a, 3), col(a, 1)));
  const Tensor area_b = mul(sub(col(b, 2), col(b, 0)), sub(col(b, 3), col(b, 1)));
  const Tensor uni = sub(add(area_a, area_b), inter);
  const Tensor ew = sub(maximum(col(a, 2), col(b, 2)), minimum(col(a, 0), col(b, 0)));
  const Tensor eh = sub(maximum(col(a, 3), col(b, 3)), minimum(col(a, 1), col(b, 1)));
  const Tensor enclose = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

}  // namespace

LossBreakdown clip_loss(const model::HeadOutput& out, const std::vector<ClipTarget>& targets,
                        const Assignment& assignment, const LossWeights& w) {
  const Shape& cs = out.class_logits.shape();
  const std::size_t n = cs[0], t_len = cs[1], k1 = cs[2], num_classes = k1 - 1;
  const std::size_t fh = out.frame_masks.shape()[2], fw = out.frame_masks.shape()[3], hw = fh * fw;

  std::vector<std::size_t> labels(n * t_len, num_classes);
  std::vector<std::size_t> matched, visible;
  std::vector<double> matched_masks, visible_masks, visible_boxes;
  std::vector<char> seen_pred(n, 0), seen_gt(targets.size(), 0);
  for (const auto& [pred, gt] : assignment.pairs) {
    if (pred >= n || gt >= targets.size()) throw std::out_of_range("clip_loss: assignment index out of range");
    if (seen_pred[pred] || seen_gt[gt]) throw std::invalid_argument("clip_loss: assignment is not one-to-one");
    seen_pred[pred] = seen_gt[gt] = 1;
    const ClipTarget& target = targets[gt];
    if (target.labels.size() != t_len) throw std::invalid_argument("clip_loss: target length does not match the clip");
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t e = pred * t_len + t;
      labels[e] = static_cast<std::size_t>(target.labels[t]);
      matched.push_back(e);
      matched_masks.insert(matched_masks.end(), target.masks[t].begin(), target.masks[t].end());
      if (target.visible[t]) {
        visible.push_back(e);
        visible_masks.insert(visible_masks.end(), target.masks[t].begin(), target.masks[t].end());
        visible_boxes.insert(visible_boxes.end(), target.boxes[t].begin(), target.boxes[t].end());
      }
    }
  }

  LossBreakdown loss;
  const Tensor log_p = reshape(log_softmax(out.class_logits, 2), {n * t_len, k1});
  const Tensor class_term = neg(mean(pick(log_p, labels)));
  Tensor total = mul_scalar(class_term, w.cls);
  loss.class_term = class_term.item();

  const Tensor masks = reshape(out.frame_masks, {n * t_len, hw});
  if (!matched.empty()) {
    const Tensor sel = index_select(masks, 0, matched);
    const Tensor ce = mul_scalar(sum(bce_with_logits(sel, matched_masks)), 1.0 / static_cast<double>(sel.numel()));
    loss.mask_ce_term = ce.item();
    total = add(total, mul_scalar(ce, w.ce));
  }
  if (!visible.empty()) {
    const std::size_t v = visible.size();
    const Tensor prob = sigmoid(index_select(masks, 0, visible));
    const Tensor dice = dice_loss(prob, Tensor({v, hw}, visible_masks));
    loss.dice_term = dice.item();

    const Tensor pb = index_select(reshape(out.boxes, {n * t_len, 4}), 0, visible);
    const Tensor gb({v, 4}, visible_boxes);
    const Tensor scale({4}, {1.0 / static_cast<double>(fw), 1.0 / static_cast<double>(fh), 1.0 / static_cast<double>(fw),
                             1.0 / static_cast<double>(fh)});
    const Tensor l1 = mul_scalar(sum(mul(abs(sub(pb, gb)), scale)), 1.0 / static_cast<double>(v));
    const Tensor g = mean(sub(Tensor::scalar(1.0), giou_tensor(pb, gb)));
    loss.box_l1_term = l1.item();
    loss.box_giou_term = g.item();
    total = add(total, add(add(mul_scalar(dice, w.dice), mul_scalar(l1, w.l1)), mul_scalar(g, w.giou)));
  }
  loss.total = total.item();
  loss.total_tensor = total;
  return loss;
}

SupervisedLoss deep_supervision_loss(const model::ClipPredictions& preds, const std::vector<ClipTarget>& targets,
                                     const LossWeights& w, const Assignment* fixed, bool per_iteration) {
  const std::size_t fh = preds.final().frame_masks.shape()[2], fw = preds.final().frame_masks.shape()[3];
  SupervisedLoss out;
  out.assignment = fixed ? *fixed : match(preds.final(), targets, fh, fw, w);
  for (std::size_t m = 0; m < preds.iterations.size(); ++m) {
    const bool own = !fixed && per_iteration && m + 1 < preds.iterations.size();
    const Assignment a = own ? match(preds.iterations[m], targets, fh, fw, w) : out.assignment;
    out.loss += clip_loss(preds.iterations[m], targets, a, w);
  }
  return out;
}

// ---- optimiser ---------------------------------------------------------------

AdamW::AdamW(NamedTensors params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
    decay_.push_back(1);
  }
}

void AdamW::exclude_from_decay(const std::string& name) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first == name) decay_[i] = 0;
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : params_) {
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    auto values = p.mutable_values();
    const bool has = p.has_grad();
    const std::span<const double> grad = has ? p.grad() : std::span<const double>();
    const double decay = decay_[i] ? config_.weight_decay : 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g;
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g * g;
      const double mh = m_[i][j] / bc1, vh = v_[i][j] / bc2;
      values[j] -= lr * (mh / (std::sqrt(vh) + config_.eps) + decay * values[j]);
    }
  }
}

// ---- training loop -------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  if (clip_len < 1) throw std::invalid_argument("train config: clip_len must be >= 1");
  if (strides.empty()) throw std::invalid_argument("train config: no strides");
  for (std::size_t s : strides) {
    if (s < 1) throw std::invalid_argument("train config: strides must be >= 1");
  }
  if (optim.lr <= 0.0) throw std::invalid_argument("train config: lr must be positive");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["clip_len"] = c.clip_len;
  j["model"] = model::to_json(c.model);
  j["loss_weights"] = to_json(c.weights);
  j["lr"] = c.optim.lr;
  j["weight_decay"] = c.optim.weight_decay;
  j["epochs"] = c.epochs;
  j["lr_drop_epoch"] = c.lr_drop_epoch;
  j["grad_clip"] = c.grad_clip;
  j["correspondence"] = c.correspondence;
  j["per_iteration_matching"] = c.per_iteration_matching;
  j["strides"] = c.strides;
  j["dataset"] = c.dataset_path;
  j["checkpoint"] = c.checkpoint_path;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.clip_len = j.value("clip_len", c.clip_len);
  if (j.contains("model")) c.model = model::model_config_from_json(j["model"]);
  c.model.iterations = j.value("iterations", c.model.iterations);
  c.model.queries = j.value("queries", c.model.queries);
  c.model.channels = j.value("channels", c.model.channels);
  if (!j.contains("model") || !j["model"].contains("init_seed")) c.model.init_seed = c.seed;
  if (j.contains("loss_weights")) c.weights = loss_weights_from_json(j["loss_weights"]);
  c.optim.lr = j.value("lr", c.optim.lr);
  c.optim.weight_decay = j.value("weight_decay", c.optim.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.lr_drop_epoch = j.value("lr_drop_epoch", c.lr_drop_epoch);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.correspondence = j.value("correspondence", c.correspondence);
  c.per_iteration_matching = j.value("per_iteration_matching", c.per_iteration_matching);
  if (j.contains("strides")) c.strides = j["strides"].get<std::vector<std::size_t>>();
  c.log_every = j.value("log_every", c.log_every);
  c.dataset_path = j.value("dataset", c.dataset_path);
  c.checkpoint_path = j.value("checkpoint", c.checkpoint_path);
  c.validate();
  return c;
}

ClipPair sample_clip_pair(std::size_t frames, std::size_t clip_len, Random& rng) {
  if (frames == 0) throw std::invalid_argument("sample_clip_pair: empty video");
  ClipPair p;
  if (frames >= 2 * clip_len) {
    p.start_a = rng.index(frames - 2 * clip_len + 1);
    p.len_a = p.len_b = clip_len;
    p.start_b = p.start_a + clip_len;
  } else {
    p.len_a = (frames + 1) / 2;
    p.len_b = frames - p.len_a;
    p.start_b = p.len_a;
  }
  p.swapped = p.len_b > 0 && rng.bernoulli(0.5);
  return p;
}

Tensor handoff_queries(const Tensor& final_queries, std::size_t clip_len) {
  const std::size_t n = final_queries.shape()[0], c = final_queries.shape()[2];
  const Tensor avg = mean(final_queries, 1, true).detach();
  return expand(avg, {n, clip_len, c}).detach();
}

CorrespondenceResult correspondence_step(const model::Model& model, const synth::Video& video,
                                         const std::vector<synth::Tracklet>& tracklets, const ClipPair& pair,
                                         const LossWeights& w, bool per_iteration_matching) {
  if (tracklets.size() != video.instances.size()) {
    throw std::invalid_argument("correspondence_step: tracklets do not belong to this video");
  }
  for (const synth::Tracklet& tr : tracklets) {
    if (tr.class_per_frame.size() != video.num_frames()) {
      throw std::invalid_argument("correspondence_step: tracklets do not belong to this video");
    }
  }
  if (std::max(pair.start_a + pair.len_a, pair.start_b + pair.len_b) > video.num_frames() || pair.len_a == 0) {
    throw std::invalid_argument("correspondence_step: clip pair outside the video");
  }
  const std::size_t k = model.config().num_classes;
  const std::size_t first_start = pair.swapped ? pair.start_b : pair.start_a;
  const std::size_t first_len = pair.swapped ? pair.len_b : pair.len_a;
  const std::size_t second_start = pair.swapped ? pair.start_a : pair.start_b;
  const std::size_t second_len = pair.swapped ? pair.len_a : pair.len_b;
  const std::size_t union_start = std::min(pair.start_a, pair.start_b);
  const std::vector<std::size_t> keep = visible_tracklets(tracklets, union_start, pair.len_a + pair.len_b);

  CorrespondenceResult r;
  const auto targets1 = clip_targets(tracklets, keep, first_start, first_len, k);
  const auto preds1 =
      model::forward_clip(model, synth::frames_tensor(video, first_start, first_len), model::init_tracklet_state(model, first_len));
  SupervisedLoss s1 = deep_supervision_loss(preds1, targets1, w, nullptr, per_iteration_matching);
  s1.loss.total_tensor.backward();
  r.first = s1.loss;
  r.assignment = s1.assignment;
  if (second_len == 0) return r;

  r.handoff_queries = handoff_queries(preds1.final().queries, second_len);
  const auto targets2 = clip_targets(tracklets, keep, second_start, second_len, k);
  const auto preds2 = model::forward_clip(model, synth::frames_tensor(video, second_start, second_len),
                                          model::handoff_state(model, r.handoff_queries));
  SupervisedLoss s2 = deep_supervision_loss(preds2, targets2, w, &r.assignment, false);
  s2.loss.total_tensor.backward();
  r.second = s2.loss;
  return r;
}

LossBreakdown independent_clip_step(const model::Model& model, const synth::Video& video,
                                    const std::vector<synth::Tracklet>& tracklets, std::size_t start,
                                    std::size_t length, const LossWeights& w, bool per_iteration_matching) {
  const auto targets =
      clip_targets(tracklets, visible_tracklets(tracklets, start, length), start, length, model.config().num_classes);
  const auto preds =
      model::forward_clip(model, synth::frames_tensor(video, start, length), model::init_tracklet_state(model, length));
  SupervisedLoss s = deep_supervision_loss(preds, targets, w, nullptr, per_iteration_matching);
  s.loss.total_tensor.backward();
  return s.loss;
}

model::Model train(const synth::Dataset& dataset, const TrainConfig& config, TrainResult* result,
                   const StepCallback& on_step) {
  config.validate();
  if (dataset.videos.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.model.num_classes != dataset.config.shape_classes.size()) {
    throw std::invalid_argument("train: model class count does not match the dataset");
  }
  if (config.model.frame_h != dataset.config.frame_h || config.model.frame_w != dataset.config.frame_w) {
    throw std::invalid_argument("train: model frame size does not match the dataset");
  }
  const auto t0 = std::chrono::steady_clock::now();
  model::Model model(config.model);
  AdamW opt(model.parameters(), config.optim);
  opt.exclude_from_decay("init_proposals");
  Random rng(config.seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);

  // Subsampled copies of every video and its ground truth, per stride.
  struct Sample {
    synth::Video video;
    std::vector<synth::Tracklet> tracklets;
  };
  std::vector<std::vector<Sample>> samples(config.strides.size());
  for (std::size_t s = 0; s < config.strides.size(); ++s) {
    for (const synth::Video& v : dataset.videos) {
      const auto gts = synth::extract_ground_truth(v, dataset.config);
      samples[s].push_back({synth::subsample(v, config.strides[s]), synth::subsample(gts, config.strides[s])});
    }
  }

  TrainResult res;
  std::vector<std::size_t> order(dataset.videos.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    const double lr = epoch < config.lr_drop_epoch ? config.optim.lr : 0.1 * config.optim.lr;
    for (std::size_t vi : order) {
      const Sample& sample = samples[rng.index(config.strides.size())][vi];
      const ClipPair pair = sample_clip_pair(sample.video.num_frames(), config.clip_len, rng);
      opt.zero_grad();
      StepStats stats;
      if (config.correspondence) {
        const auto r = correspondence_step(model, sample.video, sample.tracklets, pair, config.weights,
                                           config.per_iteration_matching);
        stats.loss = r.first;
        stats.loss += r.second;
        stats.clips = pair.len_b > 0 ? 2 : 1;
      } else {
        stats.loss = independent_clip_step(model, sample.video, sample.tracklets, pair.start_a, pair.len_a,
                                           config.weights, config.per_iteration_matching);
        stats.clips = 1;
        if (pair.len_b > 0) {
          stats.loss += independent_clip_step(model, sample.video, sample.tracklets, pair.start_b, pair.len_b,
                                              config.weights, config.per_iteration_matching);
          stats.clips = 2;
        }
      }
      stats.grad_norm = opt.clip_grad_norm(config.grad_clip);
      opt.step(lr);
      model.sanitize();
      stats.loss.total_tensor = Tensor();
      ++res.steps;
      res.loss_history.push_back(stats.loss.total);
      res.last_loss = stats.loss;
      if (config.log_every > 0 && res.steps % config.log_every == 0) {
        std::cerr << "step " << res.steps << " epoch " << epoch << " loss " << stats.loss.total << " (cls "
                  << stats.loss.class_term << " l1 " << stats.loss.box_l1_term << " giou " << stats.loss.box_giou_term
                  << " ce " << stats.loss.mask_ce_term << " dice " << stats.loss.dice_term << ") |g| "
                  << stats.grad_norm << "\n";
      }
      if (on_step) on_step(res.steps, stats);
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (result) *result = res;
  return model;
}

}  // namespace evis::train
