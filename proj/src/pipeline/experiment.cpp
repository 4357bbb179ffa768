#include "evis/experiment.hpp"

#include <map>
#include <stdexcept>

namespace evis::experiment {

pipeline::EvalConfig eval_config_from_json(const nlohmann::json& j, const pipeline::EvalConfig& defaults) {
  pipeline::EvalConfig c = defaults;
  c.clip_len = j.value("clip_len", c.clip_len);
  c.stride = j.value("stride", c.stride);
  c.reinit_k = j.value("reinit_k", c.reinit_k);
  if (j.contains("linking")) c.linking = pipeline::linking_from_string(j["linking"]);
  if (j.contains("link")) c.link = pipeline::link_config_from_json(j["link"]);
  if (c.clip_len == 0 || c.stride == 0) throw std::invalid_argument("eval config: clip_len and stride must be positive");
  return c;
}

nlohmann::ordered_json to_json(const pipeline::EvalConfig& c) {
  return {{"clip_len", c.clip_len},
          {"stride", c.stride},
          {"reinit_k", c.reinit_k},
          {"linking", pipeline::to_string(c.linking)},
          {"link", pipeline::to_json(c.link)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("train_scene")) c.train_scene = synth::scene_config_from_json(j["train_scene"]);
  c.eval_scene = c.train_scene;
  c.eval_scene.seed = c.train_scene.seed + 1;
  if (j.contains("eval_scene")) c.eval_scene = synth::scene_config_from_json(j["eval_scene"]);
  if (c.eval_scene.frame_h != c.train_scene.frame_h || c.eval_scene.frame_w != c.train_scene.frame_w ||
      c.eval_scene.shape_classes != c.train_scene.shape_classes) {
    throw std::invalid_argument("experiment config: train and eval scenes need the same frame size and classes");
  }
  if (j.contains("train")) c.train = train::train_config_from_json(j["train"]);
  c.train.model.frame_h = c.train_scene.frame_h;
  c.train.model.frame_w = c.train_scene.frame_w;
  c.train.model.num_classes = c.train_scene.shape_classes.size();
  c.eval.clip_len = c.train.clip_len;
  if (j.contains("eval")) c.eval = eval_config_from_json(j["eval"], c.eval);
  return c;
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  return {{"train_scene", synth::to_json(c.train_scene)},
          {"eval_scene", synth::to_json(c.eval_scene)},
          {"train", train::to_json(c.train)},
          {"eval", to_json(c.eval)}};
}

ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed) {
  c.train.seed = seed;
  c.train.model.init_seed = seed;
  c.train_scene.seed = 2 * seed;
  c.eval_scene.seed = 2 * seed + 1;
  return c;
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{"baseline",       "attention=spatial",   "attention=temporal",
                                              "dynamic_conv=still", "query=shared",     "linking=handcrafted",
                                              "stride=3",       "no_correspondence"};
  return names;
}

ExperimentConfig apply_variant(ExperimentConfig c, const std::string& variant) {
  if (variant == "baseline") {
  } else if (variant == "attention=spatial") {
    c.train.model.attention = model::AttentionScheme::Spatial;
  } else if (variant == "attention=temporal") {
    c.train.model.attention = model::AttentionScheme::Temporal;
  } else if (variant == "dynamic_conv=still") {
    c.train.model.dynamic_conv = model::DynamicConv::StillImage;
  } else if (variant == "query=shared") {
    c.train.model.query_mode = model::QueryMode::Shared;
  } else if (variant == "linking=handcrafted") {
    c.eval.linking = pipeline::Linking::Handcrafted;
  } else if (variant == "stride=3") {
    c.eval.stride = 3;
  } else if (variant == "no_correspondence") {
    c.train.correspondence = false;
  } else {
    throw std::invalid_argument("unknown ablation variant '" + variant + "'");
  }
  return c;
}

nlohmann::ordered_json run_ablation(const ExperimentConfig& base, const std::vector<std::string>& variants,
                                    std::ostream* log) {
  const synth::Dataset train_set = synth::generate_dataset(base.train_scene);
  const synth::Dataset eval_set = synth::generate_dataset(base.eval_scene);
  // Variants that only change evaluation share the trained model.
  std::map<std::string, model::Model> cache;
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const std::string& name : variants) {
    const ExperimentConfig c = apply_variant(base, name);
    const std::string key = train::to_json(c.train).dump();
    auto it = cache.find(key);
    if (it == cache.end()) {
      if (log) *log << "[ablate] training " << name << std::endl;
      train::TrainResult r;
      model::Model m = train::train(train_set, c.train, &r);
      if (log) *log << "[ablate] trained " << name << " in " << r.seconds << " s" << std::endl;
      it = cache.emplace(key, std::move(m)).first;
    }
    if (log) *log << "[ablate] evaluating " << name << std::endl;
    const pipeline::Metrics metrics = pipeline::evaluate_dataset(it->second, eval_set, c.eval);
    out[name] = pipeline::to_json(metrics);
  }
  return out;
}

}  // namespace evis::experiment
