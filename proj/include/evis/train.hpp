#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evis/gradcheck.hpp"
#include "evis/model.hpp"
#include "evis/random.hpp"
#include "evis/synth.hpp"

// Set-matching training: bipartite assignment, the clip loss with deep
// supervision, clip-pair correspondence learning and AdamW.
namespace evis::train {

// ---- assignment --------------------------------------------------------------

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, ground truth), sorted by gt
  std::vector<std::size_t> unmatched;                      // predictions, ascending
  double total_cost = 0.0;
};

/// Minimum-cost assignment of every column (ground truth) of a row-major
/// rows x cols cost matrix to a distinct row (prediction). Requires cols <= rows.
Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols);
/// Number of hungarian() calls since the program started.
std::size_t hungarian_calls();

// ---- targets -----------------------------------------------------------------

/// Ground truth of one tracklet over the frames of a clip.
struct ClipTarget {
  int instance_id = 0;
  std::vector<int> labels;                       // class index, or K for no object
  std::vector<std::array<double, 4>> boxes;      // valid where visible
  std::vector<std::vector<double>> masks;        // H*W in {0, 1}
  std::vector<std::uint8_t> visible;
};

/// Targets for frames [start, start + length) of `tracklets`, keeping only
/// those with indices in `keep`.
std::vector<ClipTarget> clip_targets(const std::vector<synth::Tracklet>& tracklets, const std::vector<std::size_t>& keep,
                                     std::size_t start, std::size_t length, std::size_t num_classes);
/// Indices of tracklets visible somewhere in frames [start, start + length).
std::vector<std::size_t> visible_tracklets(const std::vector<synth::Tracklet>& tracklets, std::size_t start,
                                           std::size_t length);

// ---- losses ------------------------------------------------------------------

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double ce = 5.0;
  double dice = 5.0;
};

nlohmann::ordered_json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

/// Generalized IoU of two (x1, y1, x2, y2) boxes.
double giou(const std::array<double, 4>& a, const std::array<double, 4>& b);
/// lambda_L1 * sum |a - b| / (W, H, W, H) + lambda_giou * (1 - GIoU).
double box_loss(const std::array<double, 4>& a, const std::array<double, 4>& b, std::size_t frame_h,
                std::size_t frame_w, double l1_weight, double giou_weight);
/// IoU of a mask binarised at probability 0.5 against a binary mask; 0 when both are empty.
double mask_iou(std::span<const double> prob, std::span<const double> target);

/// 1 - (2 sum(m * t) + 1) / (sum m + sum t + 1) for [E, P] soft masks; mean over E.
Tensor dice_loss(const Tensor& prob, const Tensor& target);
/// Scalar form of the same formula.
double dice_loss(std::span<const double> prob, std::span<const double> target);

/// Per-frame predictions of one query, as plain numbers.
struct QueryPrediction {
  std::vector<std::vector<double>> class_prob;  // [T][K + 1]
  std::vector<std::array<double, 4>> boxes;
  std::vector<std::vector<double>> mask_prob;   // [T][H*W]
};

QueryPrediction query_prediction(const model::HeadOutput& out, std::size_t query);

/// sum_t [ -p(c_t) + 1{visible}(box_loss - mask IoU) ].
double match_cost(const QueryPrediction& pred, const ClipTarget& gt, std::size_t frame_h, std::size_t frame_w,
                  const LossWeights& w);

Assignment match(const model::HeadOutput& out, const std::vector<ClipTarget>& targets, std::size_t frame_h,
                 std::size_t frame_w, const LossWeights& w);

struct LossBreakdown {
  double class_term = 0, box_l1_term = 0, box_giou_term = 0, mask_ce_term = 0, dice_term = 0, total = 0;
  Tensor total_tensor;

  LossBreakdown& operator+=(const LossBreakdown& o);
};

LossBreakdown clip_loss(const model::HeadOutput& out, const std::vector<ClipTarget>& targets,
                        const Assignment& assignment, const LossWeights& w);

/// Sum of clip_loss over all iterations. When `assignment` is null the
/// matching is computed on the last iteration and reused (or recomputed per
/// iteration if `per_iteration` is set).
struct SupervisedLoss {
  LossBreakdown loss;
  Assignment assignment;  // matching of the last iteration
};
SupervisedLoss deep_supervision_loss(const model::ClipPredictions& preds, const std::vector<ClipTarget>& targets,
                                     const LossWeights& w, const Assignment* fixed, bool per_iteration);

// ---- optimiser ---------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamW {
 public:
  AdamW(NamedTensors params, AdamWConfig config);
  /// One update from the gradients currently stored on the parameters;
  /// parameters without a gradient are treated as having zero gradient.
  void step(double lr);
  void zero_grad();
  /// Scales gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
  double clip_grad_norm(double max_norm);
  std::size_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  /// Names excluded from weight decay.
  void exclude_from_decay(const std::string& name);

 private:
  NamedTensors params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::uint8_t> decay_;
  std::size_t steps_ = 0;
};

// ---- training loop -------------------------------------------------------------

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t clip_len = 8;
  model::ModelConfig model;
  LossWeights weights;
  AdamWConfig optim;
  std::size_t epochs = 100;
  std::size_t lr_drop_epoch = 80;
  double grad_clip = 1.0;  // <= 0 disables clipping
  /// Train on clip pairs with query handoff; otherwise clips are independent.
  bool correspondence = true;
  bool per_iteration_matching = false;
  /// Frame-rate strides sampled uniformly for each training example.
  std::vector<std::size_t> strides{1};
  std::size_t log_every = 0;  // steps between log lines, 0 = silent
  std::string dataset_path;
  std::string checkpoint_path;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
/// Accepts the flat keys seed, clip_len, iterations, queries, channels, lr,
/// weight_decay, epochs, lr_drop_epoch, loss_weights, dataset, checkpoint as
/// well as a nested "model" object.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepStats {
  LossBreakdown loss;
  double grad_norm = 0.0;
  std::size_t clips = 0;
};

/// The clip pair used by one correspondence step: frames of `video` after
/// subsampling, clip A = [start_a, start_a + len_a), likewise for B, and the
/// order in which they are processed.
struct ClipPair {
  std::size_t start_a = 0, len_a = 0, start_b = 0, len_b = 0;
  bool swapped = false;
};

/// Chooses two adjacent clips of at most clip_len frames each from a video of
/// `frames` frames and a random processing order. If the video has a single
/// frame the second clip is empty.
ClipPair sample_clip_pair(std::size_t frames, std::size_t clip_len, Random& rng);

struct CorrespondenceResult {
  LossBreakdown first, second;
  Assignment assignment;
  Tensor handoff_queries;  // [N, T2, C] initial queries of the second clip
};

/// Forward + backward over a clip pair: the first clip starts from q*, is
/// matched against the video-level ground truth of both clips, and hands its
/// time-averaged final queries (without gradient) to the second clip, which
/// reuses the same assignment. Gradients accumulate on the model parameters.
CorrespondenceResult correspondence_step(const model::Model& model, const synth::Video& video,
                                         const std::vector<synth::Tracklet>& tracklets, const ClipPair& pair,
                                         const LossWeights& w, bool per_iteration_matching);

/// Forward + backward over one clip starting from q*, with its own matching.
LossBreakdown independent_clip_step(const model::Model& model, const synth::Video& video,
                                    const std::vector<synth::Tracklet>& tracklets, std::size_t start,
                                    std::size_t length, const LossWeights& w, bool per_iteration_matching);

/// Time-averaged queries repeated over `clip_len` frames, detached.
Tensor handoff_queries(const Tensor& final_queries, std::size_t clip_len);

struct TrainResult {
  std::size_t steps = 0;
  double seconds = 0.0;
  LossBreakdown last_loss;
  std::vector<double> loss_history;  // total loss per step
};

using StepCallback = std::function<void(std::size_t step, const StepStats& stats)>;

/// Runs config.epochs passes over the dataset (one example per video per
/// epoch) and returns the trained model. Deterministic given the config.
model::Model train(const synth::Dataset& dataset, const TrainConfig& config, TrainResult* result = nullptr,
                   const StepCallback& on_step = {});

// ---- gradient check ------------------------------------------------------------

/// Reverse-mode gradients of the deep-supervised clip loss against central
/// differences for every parameter of a tiny model (T = 2, N = 2, 16x16
/// frames, random targets with one disappearance), with the assignment held
/// fixed. Parameters other than b* are jittered by U(-0.05, 0.05) so that no
/// ReLU sits exactly on its kink. eps 1e-6, relative tolerance 1e-4, an
/// absolute floor of 64u|L|/eps for the rounding noise of the differences,
/// and kinks within eps counted as nonsmooth.
GradCheckReport full_loss_grad_check(std::uint64_t seed);

}  // namespace evis::train
