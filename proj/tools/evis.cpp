// Command-line front end: data generation, training, evaluation, inference,
// overlays, the gradient check and ablations.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "evis/experiment.hpp"
#include "evis/pipeline.hpp"
#include "evis/train.hpp"

using namespace evis;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void print(const nlohmann::ordered_json& j) { std::cout << j.dump(2) << std::endl; }

struct LoadedModel {
  model::Model model;
  std::size_t clip_len = 8;
};

LoadedModel load_model(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m{model::Model::from_checkpoint(ck)};
  if (ck.hyperparameters.contains("train")) m.clip_len = ck.hyperparameters["train"].value("clip_len", m.clip_len);
  return m;
}

// Options shared by eval, infer and viz.
struct EvalOptions {
  std::string checkpoint, dataset;
  std::optional<std::size_t> clip_len;
  std::size_t stride = 1;
  std::size_t reinit_k = 2;
  std::string linking = "e2e";
  std::string link_config;

  void add_to(CLI::App* app) {
    app->add_option("checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("dataset", dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--clip-len", clip_len, "Frames per clip (default: the training clip length)");
    app->add_option("--stride", stride, "Keep every n-th frame")->check(CLI::PositiveNumber);
    app->add_option("--reinit-k", reinit_k, "Empty clips before a slot restarts from q* (0 = never)");
    app->add_option("--linking", linking, "e2e or handcrafted")->check(CLI::IsMember({"e2e", "handcrafted"}));
    app->add_option("--link-config", link_config, "JSON weights for the hand-crafted linker")->check(CLI::ExistingFile);
  }

  pipeline::EvalConfig config(const LoadedModel& m) const {
    pipeline::EvalConfig c;
    c.clip_len = clip_len.value_or(m.clip_len);
    c.stride = stride;
    c.reinit_k = reinit_k;
    c.linking = pipeline::linking_from_string(linking);
    if (!link_config.empty()) c.link = pipeline::link_config_from_json(read_json(link_config));
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video instance segmentation with tracklet queries on synthetic shape videos"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice (overrides the config)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  std::string gen_config, gen_out;
  gen->add_option("config", gen_config, "Scene config JSON (optional key \"out\")")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory");

  // train
  auto* tr = app.add_subcommand("train", "Train a model; writes the checkpoint named in the config");
  std::string train_config, train_out, train_dataset;
  std::size_t log_every = 0;
  tr->add_option("config", train_config, "Training config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--dataset", train_dataset, "Dataset directory (overrides the config)");
  tr->add_option("--checkpoint", train_out, "Checkpoint path (overrides the config)");
  tr->add_option("--log-every", log_every, "Steps between progress lines on stderr");

  // eval / infer / viz
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset; prints metrics JSON");
  EvalOptions eval_opts;
  eval_opts.add_to(ev);

  auto* inf = app.add_subcommand("infer", "Write per-video predictions as JSON");
  EvalOptions infer_opts;
  std::string infer_out;
  infer_opts.add_to(inf);
  inf->add_option("--out", infer_out, "Output JSON file")->required();

  auto* viz = app.add_subcommand("viz", "Render identity-coloured overlays as PPM frames");
  EvalOptions viz_opts;
  std::string viz_out;
  std::optional<std::size_t> viz_video;
  viz_opts.add_to(viz);
  viz->add_option("--out", viz_out, "Output directory")->required();
  viz->add_option("--video", viz_video, "Only this video index");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Check full-loss gradients of a tiny model against finite differences");
  std::size_t gc_seeds = 10;
  gc->add_option("--seeds", gc_seeds, "Number of seeds, starting at --seed (default 0)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate ablation variants; prints metrics JSON per variant");
  std::string ablate_config;
  std::vector<std::string> ablate_only;
  ab->add_option("config", ablate_config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  ab->add_option("--only", ablate_only, "Subset of variants")->check(CLI::IsMember(experiment::ablation_variants()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Unknown subcommands and bad options exit with 2 and the usage text.
    if (e.get_exit_code() != 0) {
      std::string message = e.what();
      for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--seed") {
          ++i;
        } else if (!arg.empty() && arg[0] != '-') {
          if (app.get_subcommand_no_throw(arg) == nullptr) message = "unknown subcommand '" + arg + "'";
          break;
        }
      }
      std::cerr << message << "\n\n" << app.help();
      return 2;
    }
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      const nlohmann::json j = read_json(gen_config);
      synth::SceneConfig cfg = synth::scene_config_from_json(j);
      if (seed) cfg.seed = *seed;
      std::string out = gen_out.empty() ? j.value("out", std::string()) : gen_out;
      if (out.empty()) throw std::runtime_error("gen-data: no output directory (--out or \"out\" in the config)");
      const synth::Dataset data = synth::generate_dataset(cfg);
      synth::save_dataset(out, data);
      print({{"out", out}, {"videos", data.videos.size()}, {"frames_per_video", cfg.frames_per_video}});
    } else if (tr->parsed()) {
      train::TrainConfig cfg = train::train_config_from_json(read_json(train_config));
      if (seed) {
        cfg.seed = *seed;
        cfg.model.init_seed = *seed;
      }
      if (!train_dataset.empty()) cfg.dataset_path = train_dataset;
      if (!train_out.empty()) cfg.checkpoint_path = train_out;
      if (log_every > 0) cfg.log_every = log_every;
      if (cfg.dataset_path.empty() || cfg.checkpoint_path.empty()) {
        throw std::runtime_error("train: the config must name a dataset and a checkpoint");
      }
      const synth::Dataset data = synth::load_dataset(cfg.dataset_path);
      // The frame size and class count come from the data.
      cfg.model.frame_h = data.config.frame_h;
      cfg.model.frame_w = data.config.frame_w;
      cfg.model.num_classes = data.config.shape_classes.size();
      train::TrainResult result;
      const model::Model m = train::train(data, cfg, &result);
      Checkpoint ck = m.to_checkpoint();
      ck.hyperparameters["train"] = train::to_json(cfg);
      save_checkpoint(cfg.checkpoint_path, ck);
      std::cerr << "trained " << result.steps << " steps in " << result.seconds << " s\n";
      print({{"checkpoint", cfg.checkpoint_path},
             {"steps", result.steps},
             {"final_loss", result.last_loss.total},
             {"parameters", m.parameter_count()}});
    } else if (ev->parsed()) {
      const LoadedModel m = load_model(eval_opts.checkpoint);
      const synth::Dataset data = synth::load_dataset(eval_opts.dataset);
      print(pipeline::to_json(pipeline::evaluate_dataset(m.model, data, eval_opts.config(m))));
    } else if (inf->parsed()) {
      const LoadedModel m = load_model(infer_opts.checkpoint);
      const synth::Dataset data = synth::load_dataset(infer_opts.dataset);
      std::vector<pipeline::VideoPredictions> preds;
      const pipeline::Metrics metrics = pipeline::evaluate_dataset(m.model, data, infer_opts.config(m), &preds);
      nlohmann::ordered_json videos = nlohmann::ordered_json::array();
      for (const auto& p : preds) videos.push_back(pipeline::to_json(p));
      std::ofstream out(infer_out);
      if (!out) throw std::runtime_error("cannot write " + infer_out);
      out << nlohmann::ordered_json{{"videos", videos}}.dump() << "\n";
      print(pipeline::to_json(metrics));
    } else if (viz->parsed()) {
      const LoadedModel m = load_model(viz_opts.checkpoint);
      const synth::Dataset data = synth::load_dataset(viz_opts.dataset);
      const pipeline::EvalConfig cfg = viz_opts.config(m);
      std::size_t written = 0;
      for (std::size_t v = 0; v < data.videos.size(); ++v) {
        if (viz_video && *viz_video != v) continue;
        const synth::Video video = synth::subsample(data.videos[v], cfg.stride);
        const pipeline::VideoPredictions p = cfg.linking == pipeline::Linking::EndToEnd
                                                 ? pipeline::infer_video(m.model, video, cfg.clip_len, cfg.reinit_k)
                                                 : pipeline::handcrafted_link_baseline(m.model, video, cfg.clip_len, cfg.link);
        char dir[32];
        std::snprintf(dir, sizeof dir, "video_%03zu", v);
        written += pipeline::render_overlays(video, p, fs::path(viz_out) / dir).size();
      }
      if (viz_video && *viz_video >= data.videos.size()) throw std::runtime_error("viz: no such video");
      print({{"out", viz_out}, {"frames", written}});
    } else if (gc->parsed()) {
      const std::uint64_t first = seed.value_or(0);
      bool passed = true;
      nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
      for (std::uint64_t s = first; s < first + gc_seeds; ++s) {
        const GradCheckReport r = train::full_loss_grad_check(s);
        std::size_t failures = 0;
        for (const auto& e : r.inputs) failures += e.failures;
        passed = passed && r.passed;
        seeds.push_back({{"seed", s},
                         {"passed", r.passed},
                         {"elements", r.elements()},
                         {"failures", failures},
                         {"nonsmooth", r.nonsmooth()},
                         {"max_rel_error", r.max_rel_error()}});
      }
      print({{"passed", passed}, {"seeds", seeds}});
      return passed ? 0 : 1;
    } else if (ab->parsed()) {
      experiment::ExperimentConfig cfg = experiment::experiment_config_from_json(read_json(ablate_config));
      if (seed) cfg = experiment::with_seed(cfg, *seed);
      const auto& variants = ablate_only.empty() ? experiment::ablation_variants() : ablate_only;
      print(experiment::run_ablation(cfg, variants, &std::cerr));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
