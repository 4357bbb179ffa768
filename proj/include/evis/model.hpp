#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evis/checkpoint.hpp"
#include "evis/ops.hpp"
#include "evis/tensor.hpp"

// Query-based video instance segmentation model: a small CNN backbone,
// tracklet queries and proposals, and M rounds of query/video interaction
// (factorised temporo-spatial attention, temporal dynamic convolution, heads).
namespace evis::model {

enum class AttentionScheme { Factorised, Spatial, Temporal, Joint };
enum class DynamicConv { Temporal, StillImage };
enum class QueryMode { Disentangled, Shared };

std::string to_string(AttentionScheme s);
std::string to_string(DynamicConv d);
std::string to_string(QueryMode q);
AttentionScheme attention_scheme_from_string(const std::string& s);
DynamicConv dynamic_conv_from_string(const std::string& s);
QueryMode query_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t channels = 64;    // C
  std::size_t queries = 6;      // N
  std::size_t iterations = 3;   // M
  std::size_t heads = 4;
  std::size_t roi_size = 7;     // H_r = W_r
  std::size_t mask_size = 14;   // H_m = W_m
  std::size_t num_classes = 3;  // K foreground classes; index K is "no object"
  std::size_t frame_h = 64;
  std::size_t frame_w = 64;
  std::size_t backbone_width1 = 16;
  std::size_t backbone_width2 = 32;
  AttentionScheme attention = AttentionScheme::Factorised;
  DynamicConv dynamic_conv = DynamicConv::Temporal;
  QueryMode query_mode = QueryMode::Disentangled;
  bool time_encoding = true;
  /// Logit given to frame pixels outside a query's box when pasting masks.
  double outside_logit = -12.0;
  std::uint64_t init_seed = 0;

  std::size_t feature_h() const { return frame_h / 4; }
  std::size_t feature_w() const { return frame_w / 4; }
  std::size_t mask_channels() const { return channels / 2 < 8 ? 8 : channels / 2; }
  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Weights of one query/video interaction round.
struct StageParams {
  AttentionParams temporal, spatial;
  Tensor temporal_ln_g, temporal_ln_b, spatial_ln_g, spatial_ln_b;
  Tensor filter_w, filter_b;  // [C, C*C + C], [C*C + C]
  Tensor embed_w, embed_b, embed_ln_g, embed_ln_b;  // [R*R*C, C]
  Tensor class_w, class_b;  // [C, K + 1]
  Tensor box_w, box_b;      // [C, 4]
  Tensor update_w, update_b, update_ln_g, update_ln_b;  // [C, C]
  Tensor mask1_w, mask1_b, mask2_w, mask2_b, mask3_w, mask3_b;
};

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t num_queries() const { return config_.queries; }

  /// Every learnable tensor with a stable name, in a fixed order.
  NamedTensors parameters() const;
  std::size_t parameter_count() const;

  /// Keeps the learned initial proposals valid boxes inside the frame. Call
  /// after each optimiser update.
  void sanitize();
  /// b* scaled to frame pixels, [N, 4].
  Tensor proposals_in_pixels() const;

  Checkpoint to_checkpoint() const;
  static Model from_checkpoint(const Checkpoint& checkpoint);
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  std::vector<Tensor> backbone_w, backbone_b;
  Tensor init_queries;    // q*: [N, C]
  Tensor init_proposals;  // b*: [N, 4], (x1, y1, x2, y2) as fractions of the frame
  std::vector<StageParams> stages;

 private:
  ModelConfig config_;
};

/// [T, H, W, 3] frames in [0, 1] -> base feature [T, H/4, W/4, C].
Tensor extract_base_feature(const Model& model, const Tensor& frames);

struct TrackletState {
  Tensor queries;    // [N, T, C]
  Tensor proposals;  // [N, T, 4]
};

/// q* and b* repeated over T frames.
TrackletState init_tracklet_state(const Model& model, std::size_t clip_len);
/// Proposals b* repeated over T frames with queries supplied by the caller.
TrackletState handoff_state(const Model& model, const Tensor& queries);

/// [T, C] sinusoidal encoding of the frame index within a clip.
Tensor time_encoding(std::size_t clip_len, std::size_t channels);

/// Attention within each query over its T embeddings, residual + layer norm.
Tensor ftsa_temporal(const StageParams& p, const ModelConfig& c, const Tensor& queries);
/// Attention within each frame over the N queries, residual + layer norm.
Tensor ftsa_spatial(const StageParams& p, const ModelConfig& c, const Tensor& queries);
/// The configured attention scheme applied to [N, T, C] queries.
Tensor ftsa(const StageParams& p, const ModelConfig& c, const Tensor& queries);

/// Per-pixel neighbour weights. responses[d] are [B, P, C] for neighbour
/// offsets d; valid holds B * D flags (entry b * D + d). Returns [B, P, D]
/// with a softmax over d of the cosine similarity to `centre`.
Tensor adaptive_weights(const std::vector<Tensor>& responses, const Tensor& centre,
                        std::span<const std::uint8_t> valid);

struct TdcOutput {
  Tensor features;  // o: [N, T, R, R, C]
  Tensor weights;   // [N, T, R, R, D], D = neighbour count (3 or 1)
  std::vector<int> offsets;
  std::vector<std::uint8_t> valid;  // N * T * D flags
};

/// Dynamic filters generated from each query embedding are applied to the RoI
/// features of its own frame and of the adjacent frames, then blended.
TdcOutput temporal_dynamic_conv(const StageParams& p, const ModelConfig& c, const Tensor& queries,
                                const Tensor& proposals, const Tensor& feature);

struct HeadOutput {
  Tensor class_logits;  // [N, T, K + 1]
  Tensor boxes;         // [N, T, 4]
  Tensor mask_logits;   // [N, T, Hm, Wm]
  Tensor frame_masks;   // [N, T, H, W] logits pasted with the input proposals
  Tensor queries;       // [N, T, C]
};

/// Applies (dx, dy, dw, dh) deltas in centre/size form. Zero deltas return the
/// input boxes; the result always intersects the frame with positive area.
Tensor apply_box_deltas(const Tensor& boxes, const Tensor& deltas, std::size_t frame_h, std::size_t frame_w);

HeadOutput heads(const StageParams& p, const ModelConfig& c, const Tensor& features, const Tensor& queries,
                 const Tensor& proposals);

struct ClipPredictions {
  std::vector<HeadOutput> iterations;  // M entries, last is final
  const HeadOutput& final() const { return iterations.back(); }
  std::size_t clip_len() const { return iterations.back().boxes.shape()[1]; }
};

ClipPredictions forward_clip(const Model& model, const Tensor& frames, const TrackletState& init);

}  // namespace evis::model
