#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "evis/model.hpp"
#include "evis/synth.hpp"

// Clip-by-clip inference with query handoff, video-level AP/AR, the
// hand-crafted linking baseline and overlay rendering.
namespace evis::pipeline {

using Mask = std::vector<std::uint8_t>;  // H*W in {0, 1}
using Box = std::array<double, 4>;       // x1, y1, x2, y2 in pixels

struct PredictedTracklet {
  int identity = 0;
  int label = 0;        // video-level foreground class
  double score = 0.0;   // mean probability of `label` over the tracklet's frames
  std::size_t first_frame = 0;  // frames [first_frame, last_frame) are covered by this identity
  std::size_t last_frame = 0;
  std::vector<Mask> masks;        // one per video frame, all zero outside the covered range
  std::vector<Box> boxes;         // one per video frame, zeros outside the covered range
  std::vector<int> frame_labels;  // per-frame argmax including K (no object); K outside the range
};

struct VideoPredictions {
  std::size_t height = 0, width = 0, frames = 0;
  std::vector<PredictedTracklet> tracklets;
};

/// Per-clip record of what the inference loop did.
struct InferenceTrace {
  std::vector<std::size_t> clip_starts;
  std::vector<Tensor> init_queries;                // [N, T_c, C] fed to each clip
  std::vector<std::vector<std::uint8_t>> empty;    // per clip, per slot: majority of frames predicted no-object
  std::vector<std::vector<std::uint8_t>> reset;    // per clip, per slot: started from q* because of reinit
  std::vector<std::vector<int>> identity;          // per clip, per slot
};

/// Consecutive clips of at most `clip_len` frames; the last may be shorter.
std::vector<std::pair<std::size_t, std::size_t>> split_clips(std::size_t frames, std::size_t clip_len);

/// Fully end-to-end inference: the first clip starts from q*, each later clip
/// from the time-averaged final queries of the previous clip, always with b*.
/// A slot predicted as no-object for `reinit_k` consecutive clips restarts
/// from q* with a new identity. No association step exists on this path.
VideoPredictions infer_video(const model::Model& model, const synth::Video& video, std::size_t clip_len,
                             std::size_t reinit_k = 2, InferenceTrace* trace = nullptr);

/// Per-slot outputs of one clip processed independently from q*.
struct ClipTracklet {
  std::size_t slot = 0;
  bool empty = false;
  std::vector<std::vector<double>> class_prob;  // [T][K + 1]
  std::vector<Mask> masks;
  std::vector<Box> boxes;
};

struct LinkConfig {
  double box_iou_weight = 1.0;
  double box_l1_weight = 1.0;
  double mask_iou_weight = 1.0;
  double class_weight = 1.0;
  /// Pairs with affinity below this start a new identity.
  double threshold = 1.0;
};

nlohmann::ordered_json to_json(const LinkConfig& c);
LinkConfig link_config_from_json(const nlohmann::json& j);

/// Affinity between the last frame of one tracklet and the first frame of the
/// next: weighted box IoU, negated normalised box L1, mask IoU and class agreement.
double link_affinity(const ClipTracklet& previous, const ClipTracklet& next, std::size_t frame_h,
                     std::size_t frame_w, const LinkConfig& config);
/// Number of link_affinity evaluations since the program started.
std::size_t link_affinity_calls();

/// Runs every clip independently from q* and links non-empty slot tracklets
/// across clip boundaries with Hungarian matching on the affinity.
VideoPredictions handcrafted_link_baseline(const model::Model& model, const synth::Video& video,
                                           std::size_t clip_len, const LinkConfig& config = {});

// ---- evaluation ----------------------------------------------------------------

struct GroundTruthTube {
  int instance_id = 0;
  int label = 0;
  std::vector<Mask> masks;
};

/// Tracklets that are visible at least once, with their class.
std::vector<GroundTruthTube> ground_truth_tubes(const std::vector<synth::Tracklet>& tracklets);

/// sum_t |p_t & g_t| / sum_t |p_t | g_t|; 0 when both tubes are empty.
double video_iou(const std::vector<Mask>& pred, const std::vector<Mask>& gt);

struct Metrics {
  double ap = 0, ap50 = 0, ap75 = 0, ar1 = 0, ar10 = 0;
  double identity_continuity = 0;
  std::size_t continuity_pairs = 0;
};

nlohmann::ordered_json to_json(const Metrics& m);

struct EvalVideo {
  std::vector<PredictedTracklet> predictions;
  std::vector<GroundTruthTube> ground_truth;
};

/// Video-level AP/AR averaged over IoU thresholds 0.50:0.05:0.95 and over the
/// classes that have ground truth. Predictions are re-sorted by score, so the
/// input order does not matter.
Metrics evaluate(const std::vector<EvalVideo>& videos, std::size_t num_classes);

struct Continuity {
  std::size_t same = 0;
  std::size_t pairs = 0;
  /// same / pairs, or 0 when there are no pairs.
  double fraction() const { return pairs == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(pairs); }
};

/// Counts (ground-truth tracklet, clip boundary) pairs, with the tracklet
/// visible on both sides, and how many of them keep the same dominant
/// predicted identity (most overlapping pixels) across the boundary.
Continuity identity_continuity(const VideoPredictions& preds, const std::vector<synth::Tracklet>& tracklets,
                               std::size_t clip_len);

enum class Linking { EndToEnd, Handcrafted };
std::string to_string(Linking l);
Linking linking_from_string(const std::string& s);

struct EvalConfig {
  std::size_t clip_len = 8;
  std::size_t stride = 1;
  std::size_t reinit_k = 2;
  Linking linking = Linking::EndToEnd;
  LinkConfig link;
};

/// Subsamples every video by `stride`, runs inference and evaluates, with
/// identity continuity pooled over all videos.
Metrics evaluate_dataset(const model::Model& model, const synth::Dataset& dataset, const EvalConfig& config,
                         std::vector<VideoPredictions>* predictions = nullptr);

nlohmann::ordered_json to_json(const VideoPredictions& p);

// ---- overlays ------------------------------------------------------------------

/// Fixed colour of an identity.
std::array<std::uint8_t, 3> identity_color(int identity);

/// One P6 PPM per frame: masks alpha-blended in their identity colour and box
/// outlines. Returns the written paths.
std::vector<std::filesystem::path> render_overlays(const synth::Video& video, const VideoPredictions& preds,
                                                   const std::filesystem::path& out_dir,
                                                   const std::string& prefix = "frame");

}  // namespace evis::pipeline
