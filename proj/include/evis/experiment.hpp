#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evis/pipeline.hpp"
#include "evis/train.hpp"

// Train-on-one-set, evaluate-on-another runs and the ablation switches.
namespace evis::experiment {

struct ExperimentConfig {
  synth::SceneConfig train_scene;
  synth::SceneConfig eval_scene;  // held out: generated with its own seed
  train::TrainConfig train;
  pipeline::EvalConfig eval;
};

/// Keys "train_scene", "eval_scene", "train" and "eval"; all optional.
/// "eval" accepts clip_len, stride, reinit_k, linking and link.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ExperimentConfig& c);
pipeline::EvalConfig eval_config_from_json(const nlohmann::json& j, const pipeline::EvalConfig& defaults);
nlohmann::ordered_json to_json(const pipeline::EvalConfig& c);

/// Seeds every random source of the experiment from one number: training,
/// model initialisation and both scenes (the held-out scene gets a different
/// stream than the training scene).
ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed);

/// Names accepted by apply_variant, in report order.
const std::vector<std::string>& ablation_variants();

/// The base configuration with one switch flipped:
///   baseline             as configured
///   attention=spatial    spatial self-attention only
///   attention=temporal   temporal self-attention only
///   dynamic_conv=still   still-image dynamic convolution
///   query=shared         one time-shared embedding per query
///   linking=handcrafted  independent clips linked by the hand-crafted baseline
///   stride=3             evaluated on every third frame
///   no_correspondence    trained on independent clips
ExperimentConfig apply_variant(ExperimentConfig c, const std::string& variant);

/// Runs the given variants, training each distinct training configuration
/// once, and returns {variant: metrics}. Progress and timing lines go to
/// `log` when it is non-null, so the returned JSON is reproducible.
nlohmann::ordered_json run_ablation(const ExperimentConfig& base, const std::vector<std::string>& variants,
                                    std::ostream* log = nullptr);

}  // namespace evis::experiment
