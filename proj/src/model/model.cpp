#include "evis/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "evis/random.hpp"

namespace evis::model {

std::string to_string(AttentionScheme s) {
  switch (s) {
    case AttentionScheme::Factorised: return "factorised";
    case AttentionScheme::Spatial: return "spatial";
    case AttentionScheme::Temporal: return "temporal";
    case AttentionScheme::Joint: return "joint";
  }
  throw std::invalid_argument("unknown attention scheme");
}

std::string to_string(DynamicConv d) { return d == DynamicConv::Temporal ? "temporal" : "still"; }
std::string to_string(QueryMode q) { return q == QueryMode::Disentangled ? "disentangled" : "shared"; }

AttentionScheme attention_scheme_from_string(const std::string& s) {
  if (s == "factorised" || s == "ftsa") return AttentionScheme::Factorised;
  if (s == "spatial" || s == "s") return AttentionScheme::Spatial;
  if (s == "temporal" || s == "t") return AttentionScheme::Temporal;
  if (s == "joint") return AttentionScheme::Joint;
  throw std::invalid_argument("unknown attention scheme '" + s + "'");
}

DynamicConv dynamic_conv_from_string(const std::string& s) {
  if (s == "temporal") return DynamicConv::Temporal;
  if (s == "still") return DynamicConv::StillImage;
  throw std::invalid_argument("unknown dynamic conv mode '" + s + "'");
}

QueryMode query_mode_from_string(const std::string& s) {
  if (s == "disentangled") return QueryMode::Disentangled;
  if (s == "shared") return QueryMode::Shared;
  throw std::invalid_argument("unknown query mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (frame_h == 0 || frame_w == 0 || frame_h % 4 != 0 || frame_w % 4 != 0) {
    throw std::invalid_argument("model config: frame size must be a positive multiple of 4");
  }
  if (channels == 0 || heads == 0 || channels % heads != 0) {
    throw std::invalid_argument("model config: channels must be divisible by heads");
  }
  if (queries == 0 || iterations == 0 || roi_size == 0 || mask_size == 0 || num_classes == 0) {
    throw std::invalid_argument("model config: counts must be positive");
  }
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["channels"] = c.channels;
  j["queries"] = c.queries;
  j["iterations"] = c.iterations;
  j["heads"] = c.heads;
  j["roi_size"] = c.roi_size;
  j["mask_size"] = c.mask_size;
  j["num_classes"] = c.num_classes;
  j["frame_h"] = c.frame_h;
  j["frame_w"] = c.frame_w;
  j["backbone_width1"] = c.backbone_width1;
  j["backbone_width2"] = c.backbone_width2;
  j["attention"] = to_string(c.attention);
  j["dynamic_conv"] = to_string(c.dynamic_conv);
  j["query_mode"] = to_string(c.query_mode);
  j["time_encoding"] = c.time_encoding;
  j["outside_logit"] = c.outside_logit;
  j["init_seed"] = c.init_seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.channels = j.value("channels", c.channels);
  c.queries = j.value("queries", c.queries);
  c.iterations = j.value("iterations", c.iterations);
  c.heads = j.value("heads", c.heads);
  c.roi_size = j.value("roi_size", c.roi_size);
  c.mask_size = j.value("mask_size", c.mask_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.frame_h = j.value("frame_h", c.frame_h);
  c.frame_w = j.value("frame_w", c.frame_w);
  c.backbone_width1 = j.value("backbone_width1", c.backbone_width1);
  c.backbone_width2 = j.value("backbone_width2", c.backbone_width2);
  if (j.contains("attention")) c.attention = attention_scheme_from_string(j["attention"]);
  if (j.contains("dynamic_conv")) c.dynamic_conv = dynamic_conv_from_string(j["dynamic_conv"]);
  if (j.contains("query_mode")) c.query_mode = query_mode_from_string(j["query_mode"]);
  c.time_encoding = j.value("time_encoding", c.time_encoding);
  c.outside_logit = j.value("outside_logit", c.outside_logit);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.validate();
  return c;
}

// ---- parameters ------------------------------------------------------------

namespace {

Tensor uniform_param(Random& rng, const Shape& shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v), true);
}

Tensor xavier(Random& rng, const Shape& shape, std::size_t fan_in, std::size_t fan_out) {
  return uniform_param(rng, shape, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

Tensor zeros_param(const Shape& shape) { return Tensor::zeros(shape, true); }
Tensor ones_param(const Shape& shape) { return Tensor::full(shape, 1.0, true); }

Tensor conv_param(Random& rng, std::size_t k, std::size_t cin, std::size_t cout) {
  return xavier(rng, {k, k, cin, cout}, k * k * cin, k * k * cout);
}

AttentionParams attention_params(Random& rng, std::size_t c) {
  AttentionParams p;
  p.wq = xavier(rng, {c, c}, c, c);
  p.bq = zeros_param({c});
  p.wk = xavier(rng, {c, c}, c, c);
  p.bk = zeros_param({c});
  p.wv = xavier(rng, {c, c}, c, c);
  p.bv = zeros_param({c});
  p.wo = xavier(rng, {c, c}, c, c);
  p.bo = zeros_param({c});
  return p;
}

void add_attention(NamedTensors& out, const std::string& prefix, const AttentionParams& p) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

}  // namespace

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Random rng(config_.init_seed);
  const std::size_t c = config_.channels, r = config_.roi_size, k = config_.num_classes;
  const std::size_t widths[5] = {3, config_.backbone_width1, config_.backbone_width2, c, c};
  for (int l = 0; l < 4; ++l) {
    backbone_w.push_back(conv_param(rng, 3, widths[l], widths[l + 1]));
    backbone_b.push_back(zeros_param({widths[l + 1]}));
  }

  std::vector<double> q(config_.queries * c);
  for (double& x : q) x = rng.normal();
  init_queries = Tensor({config_.queries, c}, std::move(q), true);
  // Initial proposals live in frame-normalised coordinates so that one
  // optimiser step moves every box by a similar fraction of the frame. Each
  // starts as a half-size box around a random centre.
  std::vector<double> b;
  for (std::size_t n = 0; n < config_.queries; ++n) {
    const double cx = rng.uniform(0.25, 0.75), cy = rng.uniform(0.25, 0.75);
    b.insert(b.end(), {cx - 0.25, cy - 0.25, cx + 0.25, cy + 0.25});
  }
  init_proposals = Tensor({config_.queries, 4}, std::move(b), true);

  const std::size_t cm = config_.mask_channels();
  for (std::size_t m = 0; m < config_.iterations; ++m) {
    StageParams s;
    s.temporal = attention_params(rng, c);
    s.spatial = attention_params(rng, c);
    s.temporal_ln_g = ones_param({c});
    s.temporal_ln_b = zeros_param({c});
    s.spatial_ln_g = ones_param({c});
    s.spatial_ln_b = zeros_param({c});
    // Generated filters act on unit-scale features: keep their entries near
    // 1/sqrt(C) for layer-normalised query embeddings.
    s.filter_w = uniform_param(rng, {c, c * c + c}, std::sqrt(3.0) / static_cast<double>(c));
    s.filter_b = zeros_param({c * c + c});
    s.embed_w = xavier(rng, {r * r * c, c}, r * r * c, c);
    s.embed_b = zeros_param({c});
    s.embed_ln_g = ones_param({c});
    s.embed_ln_b = zeros_param({c});
    s.class_w = xavier(rng, {c, k + 1}, c, k + 1);
    s.class_b = zeros_param({k + 1});
    s.box_w = uniform_param(rng, {c, 4}, 0.01);
    s.box_b = zeros_param({4});
    s.update_w = xavier(rng, {c, c}, c, c);
    s.update_b = zeros_param({c});
    s.update_ln_g = ones_param({c});
    s.update_ln_b = zeros_param({c});
    s.mask1_w = conv_param(rng, 3, c, cm);
    s.mask1_b = zeros_param({cm});
    s.mask2_w = conv_param(rng, 3, cm, cm);
    s.mask2_b = zeros_param({cm});
    s.mask3_w = conv_param(rng, 1, cm, 1);
    s.mask3_b = zeros_param({1});
    stages.push_back(std::move(s));
  }
}

NamedTensors Model::parameters() const {
  NamedTensors out;
  for (std::size_t l = 0; l < backbone_w.size(); ++l) {
    out.emplace_back("backbone." + std::to_string(l) + ".w", backbone_w[l]);
    out.emplace_back("backbone." + std::to_string(l) + ".b", backbone_b[l]);
  }
  out.emplace_back("init_queries", init_queries);
  out.emplace_back("init_proposals", init_proposals);
  for (std::size_t m = 0; m < stages.size(); ++m) {
    const StageParams& s = stages[m];
    const std::string p = "stage" + std::to_string(m) + ".";
    add_attention(out, p + "temporal", s.temporal);
    add_attention(out, p + "spatial", s.spatial);
    out.emplace_back(p + "temporal_ln.g", s.temporal_ln_g);
    out.emplace_back(p + "temporal_ln.b", s.temporal_ln_b);
    out.emplace_back(p + "spatial_ln.g", s.spatial_ln_g);
    out.emplace_back(p + "spatial_ln.b", s.spatial_ln_b);
    out.emplace_back(p + "filter.w", s.filter_w);
    out.emplace_back(p + "filter.b", s.filter_b);
    out.emplace_back(p + "embed.w", s.embed_w);
    out.emplace_back(p + "embed.b", s.embed_b);
    out.emplace_back(p + "embed_ln.g", s.embed_ln_g);
    out.emplace_back(p + "embed_ln.b", s.embed_ln_b);
    out.emplace_back(p + "class.w", s.class_w);
    out.emplace_back(p + "class.b", s.class_b);
    out.emplace_back(p + "box.w", s.box_w);
    out.emplace_back(p + "box.b", s.box_b);
    out.emplace_back(p + "update.w", s.update_w);
    out.emplace_back(p + "update.b", s.update_b);
    out.emplace_back(p + "update_ln.g", s.update_ln_g);
    out.emplace_back(p + "update_ln.b", s.update_ln_b);
    out.emplace_back(p + "mask1.w", s.mask1_w);
    out.emplace_back(p + "mask1.b", s.mask1_b);
    out.emplace_back(p + "mask2.w", s.mask2_w);
    out.emplace_back(p + "mask2.b", s.mask2_b);
    out.emplace_back(p + "mask3.w", s.mask3_w);
    out.emplace_back(p + "mask3.b", s.mask3_b);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void Model::sanitize() {
  // At least two pixels wide and inside the frame.
  const double mx = 2.0 / static_cast<double>(config_.frame_w), my = 2.0 / static_cast<double>(config_.frame_h);
  auto b = init_proposals.mutable_values();
  for (std::size_t n = 0; n < config_.queries; ++n) {
    double* box = b.data() + 4 * n;
    box[0] = std::clamp(box[0], 0.0, 1.0 - mx);
    box[1] = std::clamp(box[1], 0.0, 1.0 - my);
    box[2] = std::clamp(box[2], box[0] + mx, 1.0);
    box[3] = std::clamp(box[3], box[1] + my, 1.0);
  }
}

Tensor Model::proposals_in_pixels() const {
  const double fw = static_cast<double>(config_.frame_w), fh = static_cast<double>(config_.frame_h);
  return mul(init_proposals, Tensor({4}, {fw, fh, fw, fh}));
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ck;
  ck.hyperparameters["model"] = to_json(config_);
  for (const auto& [name, t] : parameters()) ck.tensors.emplace_back(name, t);
  return ck;
}

Model Model::from_checkpoint(const Checkpoint& ck) {
  Model m(model_config_from_json(ck.hyperparameters.at("model")));
  NamedTensors params = m.parameters();
  if (params.size() != ck.tensors.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, dst] = params[i];
    const auto& [src_name, src] = ck.tensors[i];
    if (name != src_name || dst.shape() != src.shape()) {
      throw std::runtime_error("checkpoint: expected " + name + " " + shape_str(dst.shape()) + ", found " + src_name +
                               " " + shape_str(src.shape()));
    }
    Tensor target = dst;
    std::copy(src.values().begin(), src.values().end(), target.mutable_values().begin());
  }
  return m;
}

void Model::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }
Model Model::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

// ---- forward ----------------------------------------------------------------

Tensor extract_base_feature(const Model& model, const Tensor& frames) {
  const ModelConfig& c = model.config();
  if (frames.rank() != 4 || frames.shape()[3] != 3) throw std::invalid_argument("backbone: frames must be [T, H, W, 3]");
  if (frames.shape()[1] % 4 != 0 || frames.shape()[2] % 4 != 0) {
    throw std::invalid_argument("backbone: frame size must be divisible by 4, got " + shape_str(frames.shape()));
  }
  if (frames.shape()[1] != c.frame_h || frames.shape()[2] != c.frame_w) {
    throw std::invalid_argument("backbone: frames " + shape_str(frames.shape()) + " do not match the configured size");
  }
  const std::size_t strides[4] = {2, 2, 1, 1};
  Tensor x = frames;
  for (std::size_t l = 0; l < 4; ++l) {
    x = conv2d(x, model.backbone_w[l], model.backbone_b[l], strides[l]);
    if (l < 3) x = relu(x);
  }
  return x;
}

TrackletState init_tracklet_state(const Model& model, std::size_t clip_len) {
  if (clip_len < 1) throw std::invalid_argument("init_tracklet_state: clip length must be >= 1");
  const std::size_t n = model.num_queries(), c = model.config().channels;
  return {expand(reshape(model.init_queries, {n, 1, c}), {n, clip_len, c}),
          expand(reshape(model.proposals_in_pixels(), {n, 1, 4}), {n, clip_len, 4})};
}

TrackletState handoff_state(const Model& model, const Tensor& queries) {
  const std::size_t n = model.num_queries();
  if (queries.rank() != 3 || queries.shape()[0] != n) throw std::invalid_argument("handoff_state: queries must be [N, T, C]");
  return {queries, expand(reshape(model.proposals_in_pixels(), {n, 1, 4}), {n, queries.shape()[1], 4})};
}

Tensor time_encoding(std::size_t clip_len, std::size_t channels) {
  std::vector<double> v(clip_len * channels);
  for (std::size_t t = 0; t < clip_len; ++t) {
    for (std::size_t i = 0; i < channels; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(channels));
      const double a = static_cast<double>(t) * freq;
      v[t * channels + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return Tensor({clip_len, channels}, std::move(v));
}

Tensor ftsa_temporal(const StageParams& p, const ModelConfig& c, const Tensor& q) {
  const Tensor x_qk = c.time_encoding ? add(q, time_encoding(q.shape()[1], c.channels)) : q;
  return layer_norm(add(q, multi_head_attention(x_qk, q, p.temporal, c.heads)), p.temporal_ln_g, p.temporal_ln_b);
}

Tensor ftsa_spatial(const StageParams& p, const ModelConfig& c, const Tensor& q) {
  const Tensor by_frame = permute(q, {1, 0, 2});
  const Tensor out = layer_norm(add(by_frame, multi_head_self_attention(by_frame, p.spatial, c.heads)),
                                p.spatial_ln_g, p.spatial_ln_b);
  return permute(out, {1, 0, 2});
}

Tensor ftsa(const StageParams& p, const ModelConfig& c, const Tensor& q) {
  switch (c.attention) {
    case AttentionScheme::Factorised: return ftsa_spatial(p, c, ftsa_temporal(p, c, q));
    case AttentionScheme::Spatial: return ftsa_spatial(p, c, q);
    case AttentionScheme::Temporal: return ftsa_temporal(p, c, q);
    case AttentionScheme::Joint: {
      const std::size_t n = q.shape()[0], t = q.shape()[1], ch = q.shape()[2];
      const Tensor x_qk = c.time_encoding ? add(q, time_encoding(t, ch)) : q;
      const Tensor out = multi_head_attention(reshape(x_qk, {1, n * t, ch}), reshape(q, {1, n * t, ch}),
                                              p.temporal, c.heads);
      return layer_norm(add(q, reshape(out, {n, t, ch})), p.temporal_ln_g, p.temporal_ln_b);
    }
  }
  throw std::invalid_argument("unknown attention scheme");
}

Tensor adaptive_weights(const std::vector<Tensor>& responses, const Tensor& centre,
                        std::span<const std::uint8_t> valid) {
  const std::size_t d_count = responses.size();
  if (d_count == 0) throw std::invalid_argument("adaptive_weights: no responses");
  const std::size_t b = centre.shape()[0], pix = centre.shape()[1];
  if (valid.size() != b * d_count) throw std::invalid_argument("adaptive_weights: validity size mismatch");
  std::vector<Tensor> sims;
  for (const Tensor& r : responses) sims.push_back(cosine_similarity(r, centre));
  const Tensor scores = stack(sims, 2);  // [B, P, D]
  std::vector<std::uint8_t> flags(b * pix * d_count);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < pix; ++p) {
      for (std::size_t d = 0; d < d_count; ++d) flags[(i * pix + p) * d_count + d] = valid[i * d_count + d];
    }
  }
  return masked_softmax(scores, 2, flags);
}

TdcOutput temporal_dynamic_conv(const StageParams& p, const ModelConfig& c, const Tensor& queries,
                                const Tensor& proposals, const Tensor& feature) {
  const std::size_t n = queries.shape()[0], t_len = queries.shape()[1], ch = c.channels;
  const std::size_t r = c.roi_size, pix = r * r, b = n * t_len;
  if (feature.shape()[0] != t_len) throw std::invalid_argument("temporal_dynamic_conv: feature/clip length mismatch");

  const Tensor generated = linear(reshape(queries, {b, ch}), p.filter_w, p.filter_b);
  const Tensor filters = reshape(slice(generated, 1, 0, ch * ch), {b, ch, ch});
  const Tensor filter_bias = reshape(slice(generated, 1, ch * ch, ch), {b, 1, ch});

  std::vector<std::size_t> frame_of_box(b);
  for (std::size_t i = 0; i < b; ++i) frame_of_box[i] = i % t_len;
  const double scale = static_cast<double>(c.feature_w()) / static_cast<double>(c.frame_w);
  const Tensor rois = reshape(roi_align(feature, reshape(proposals, {b, 4}), frame_of_box, r, r, scale), {b, pix, ch});

  TdcOutput out;
  out.offsets = c.dynamic_conv == DynamicConv::Temporal ? std::vector<int>{-1, 0, 1} : std::vector<int>{0};
  const std::size_t d_count = out.offsets.size();
  out.valid.assign(b * d_count, 0);
  std::vector<Tensor> responses;
  Tensor centre;
  for (std::size_t d = 0; d < d_count; ++d) {
    const int off = out.offsets[d];
    std::vector<std::size_t> source(b);
    for (std::size_t i = 0; i < b; ++i) {
      const long t = static_cast<long>(i % t_len) + off;
      const bool ok = t >= 0 && t < static_cast<long>(t_len);
      out.valid[i * d_count + d] = ok ? 1 : 0;
      source[i] = (i / t_len) * t_len + static_cast<std::size_t>(std::clamp(t, 0L, static_cast<long>(t_len) - 1));
    }
    // Every neighbour is filtered with the filter of the centre frame.
    const Tensor neighbour = off == 0 ? rois : index_select(rois, 0, source);
    responses.push_back(add(matmul(neighbour, filters), filter_bias));
    if (off == 0) centre = responses.back();
  }
  const Tensor weights = adaptive_weights(responses, centre, out.valid);
  Tensor blended;
  for (std::size_t d = 0; d < d_count; ++d) {
    const Tensor term = mul(slice(weights, 2, d, 1), responses[d]);
    blended = d == 0 ? term : add(blended, term);
  }
  out.features = reshape(blended, {n, t_len, r, r, ch});
  out.weights = reshape(weights, {n, t_len, r, r, d_count});
  return out;
}

Tensor apply_box_deltas(const Tensor& boxes, const Tensor& deltas, std::size_t frame_h, std::size_t frame_w) {
  // Largest allowed log-scale change per step.
  constexpr double kMaxLogScale = 4.0;
  const double fw = static_cast<double>(frame_w), fh = static_cast<double>(frame_h);
  const Tensor x1 = slice(boxes, 1, 0, 1), y1 = slice(boxes, 1, 1, 1);
  const Tensor x2 = slice(boxes, 1, 2, 1), y2 = slice(boxes, 1, 3, 1);
  const Tensor w = sub(x2, x1), h = sub(y2, y1);
  const Tensor cx = add(x1, mul_scalar(w, 0.5)), cy = add(y1, mul_scalar(h, 0.5));
  const Tensor ncx = clamp(add(cx, mul(slice(deltas, 1, 0, 1), w)), 0.5, fw - 0.5);
  const Tensor ncy = clamp(add(cy, mul(slice(deltas, 1, 1, 1), h)), 0.5, fh - 0.5);
  const Tensor nw = clamp(mul(w, exp(clamp(slice(deltas, 1, 2, 1), -kMaxLogScale, kMaxLogScale))), 1.0, 2.0 * fw);
  const Tensor nh = clamp(mul(h, exp(clamp(slice(deltas, 1, 3, 1), -kMaxLogScale, kMaxLogScale))), 1.0, 2.0 * fh);
  const Tensor hw = mul_scalar(nw, 0.5), hh = mul_scalar(nh, 0.5);
  return concat({sub(ncx, hw), sub(ncy, hh), add(ncx, hw), add(ncy, hh)}, 1);
}

HeadOutput heads(const StageParams& p, const ModelConfig& c, const Tensor& features, const Tensor& queries,
                 const Tensor& proposals) {
  const std::size_t n = queries.shape()[0], t_len = queries.shape()[1], ch = c.channels;
  const std::size_t r = c.roi_size, b = n * t_len, hm = c.mask_size, k1 = c.num_classes + 1;

  const Tensor embed = relu(layer_norm(linear(reshape(features, {b, r * r * ch}), p.embed_w, p.embed_b),
                                       p.embed_ln_g, p.embed_ln_b));
  HeadOutput out;
  out.class_logits = reshape(linear(embed, p.class_w, p.class_b), {n, t_len, k1});
  const Tensor flat_boxes = reshape(proposals, {b, 4});
  out.boxes = reshape(apply_box_deltas(flat_boxes, linear(embed, p.box_w, p.box_b), c.frame_h, c.frame_w), {n, t_len, 4});

  Tensor q = layer_norm(add(reshape(queries, {b, ch}), linear(embed, p.update_w, p.update_b)), p.update_ln_g,
                        p.update_ln_b);
  q = reshape(q, {n, t_len, ch});
  if (c.query_mode == QueryMode::Shared) q = expand(mean(q, 1, true), {n, t_len, ch});
  out.queries = q;

  Tensor m = reshape(features, {b, r, r, ch});
  m = relu(conv2d(m, p.mask1_w, p.mask1_b, 1));
  m = relu(conv2d(m, p.mask2_w, p.mask2_b, 1));
  // Bilinear upsampling R -> Hm: align each whole map as a single RoI.
  std::vector<double> whole(b * 4);
  std::vector<std::size_t> self(b);
  for (std::size_t i = 0; i < b; ++i) {
    whole[4 * i + 2] = whole[4 * i + 3] = static_cast<double>(r);
    self[i] = i;
  }
  m = roi_align(m, Tensor({b, 4}, std::move(whole)), self, hm, hm, 1.0);
  m = reshape(conv2d(m, p.mask3_w, p.mask3_b, 1), {b, hm, hm});
  out.mask_logits = reshape(m, {n, t_len, hm, hm});
  out.frame_masks = reshape(paste_masks(m, flat_boxes, c.frame_h, c.frame_w, c.outside_logit),
                            {n, t_len, c.frame_h, c.frame_w});
  return out;
}

ClipPredictions forward_clip(const Model& model, const Tensor& frames, const TrackletState& init) {
  const ModelConfig& c = model.config();
  const std::size_t t_len = frames.shape()[0];
  if (init.queries.shape() != Shape{c.queries, t_len, c.channels}) {
    throw std::invalid_argument("forward_clip: initial queries must be " +
                                shape_str({c.queries, t_len, c.channels}) + ", got " + shape_str(init.queries.shape()));
  }
  if (init.proposals.shape() != Shape{c.queries, t_len, 4}) {
    throw std::invalid_argument("forward_clip: initial proposals must be [N, T, 4]");
  }
  const Tensor feature = extract_base_feature(model, frames);
  ClipPredictions preds;
  Tensor q = init.queries, boxes = init.proposals;
  for (std::size_t m = 0; m < c.iterations; ++m) {
    const StageParams& p = model.stages[m];
    q = ftsa(p, c, q);
    const TdcOutput tdc = temporal_dynamic_conv(p, c, q, boxes, feature);
    preds.iterations.push_back(heads(p, c, tdc.features, q, boxes));
    q = preds.iterations.back().queries;
    boxes = preds.iterations.back().boxes;
  }
  return preds;
}

}  // namespace evis::model
