// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only when
// every selected criterion passes. Experiment settings live in configs/.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <regex>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "evis/experiment.hpp"
#include "evis/pipeline.hpp"
#include "evis/random.hpp"
#include "evis/train.hpp"

using namespace evis;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[2048];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ", ") + fmt("%.3f", x);
  return "[" + s + "]";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs a shell command with output redirected to `log`; returns the exit status.
int run(const std::string& cmd, const fs::path& log) {
  const int rc = std::system((cmd + " > " + quote(log.string()) + " 2>&1").c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  std::string test_numerics, test_model, evis;
  fs::path configs, work;
  std::size_t seeds = 3;

  // Models trained for one criterion and reused by another.
  struct Trained {
    model::Model model;
    train::TrainResult result;
  };
  std::map<std::string, Trained> models;

  const Trained& trained(const std::string& key, const synth::Dataset& data, const train::TrainConfig& cfg) {
    auto it = models.find(key);
    if (it != models.end()) return it->second;
    std::cerr << "  training " << key << std::endl;
    train::TrainResult r;
    model::Model m = train::train(data, cfg, &r);
    std::cerr << "  trained " << key << ": " << r.steps << " steps, " << fmt("%.0f", r.seconds) << " s" << std::endl;
    return models.emplace(key, Trained{std::move(m), r}).first->second;
  }
};

// ---- criteria -------------------------------------------------------------------

Outcome gradients(Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path log = ctx.work / "gradients.log";
  const int rc = run(quote(ctx.test_numerics) + " --source-file=*test_gradients.cpp", log);
  std::size_t elements = 0, failures = 0, nonsmooth = 0, failed_seeds = 0;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const GradCheckReport r = train::full_loss_grad_check(s);
    elements += r.elements();
    nonsmooth += r.nonsmooth();
    for (const auto& e : r.inputs) failures += e.failures;
    worst = std::max(worst, r.max_rel_error());
    if (!r.passed) ++failed_seeds;
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = rc == 0 && failed_seeds == 0 && t < 120.0;
  o.detail = fmt("op suite exit %d (log %s); full loss: 10 seeds, %zu elements, %zu failures, %zu nonsmooth skipped, "
                 "max rel err %.2e; %.1f s (need all pass, < 120 s)",
                 rc, log.string().c_str(), elements, failures, nonsmooth, worst, t);
  return o;
}

Outcome hungarian_oracle(Context&) {
  const auto t0 = Clock::now();
  Random rng(2024);
  std::size_t mismatches = 0;
  const std::size_t trials = 1000;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t n = 1 + rng.index(7);
    const std::size_t g = 1 + rng.index(n);
    // Half integer costs (many ties), half continuous.
    std::vector<double> cost(n * g);
    for (double& c : cost) c = trial % 2 ? std::floor(rng.uniform(0, 10)) : rng.uniform(-5, 5);

    // Brute force: every injective map from columns to rows, via permutations of the rows.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double s = 0.0;
      for (std::size_t j = 0; j < g; ++j) s += cost[perm[j] * g + j];
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));

    const train::Assignment a = train::hungarian(cost, n, g);
    std::vector<char> used(n, 0);
    bool valid = a.pairs.size() == g;
    double s = 0.0;
    for (std::size_t j = 0; valid && j < g; ++j) {
      const auto [row, col] = a.pairs[j];
      valid = col == j && row < n && !used[row];
      if (valid) used[row] = 1, s += cost[row * g + col];
    }
    if (!valid || s != best) ++mismatches;
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 30.0,
          fmt("%zu/%zu matrices (N <= 7, G <= N) disagree with the brute-force minimum; %.2f s (need 0, < 30 s)",
              mismatches, trials, t)};
}

Outcome structure(Context& ctx) {
  const std::vector<std::string> cases{
      "temporal attention stage never mixes queries",
      "spatial attention stage never mixes frames",
      "temporal dynamic conv against a direct recomputation on a 2x2 RoI",
      "adaptive weights sum to one per pixel and ignore response scale",
      "forward_clip is equivariant to permuting query slots",
  };
  std::string filter;
  for (const auto& c : cases) filter += (filter.empty() ? "" : ",") + c;
  const fs::path log = ctx.work / "structure.log";
  const int rc = run(quote(ctx.test_model) + " " + quote("--test-case=" + filter), log);
  // Make sure every case actually ran.
  const std::string out = read_file(log);
  std::smatch match;
  const bool all_ran = std::regex_search(out, match, std::regex(R"(test cases:\s*(\d+) \|\s*(\d+) passed)")) &&
                       std::stoul(match[1]) == cases.size() && std::stoul(match[2]) == cases.size();
  return {rc == 0 && all_ran, fmt("%zu cases (attention stage locality, temporal dynamic conv vs direct recomputation, "
                                  "adaptive weights sum 1 within 1e-12, slot equivariance within 1e-9): exit %d, %s (log %s)",
                                  cases.size(), rc, all_ran ? "all ran" : "not all ran", log.string().c_str())};
}

// The overfit configuration with training seed `seed`; the scene stays fixed.
experiment::ExperimentConfig overfit_config(const Context& ctx, std::uint64_t seed, bool correspondence) {
  experiment::ExperimentConfig c = experiment::experiment_config_from_json(read_json(ctx.configs / "overfit.json"));
  c.train.seed = seed;
  c.train.model.init_seed = seed;
  c.train.correspondence = correspondence;
  return c;
}

std::string key(const char* what, std::uint64_t seed, bool correspondence) {
  return fmt("%s seed %llu %s", what, static_cast<unsigned long long>(seed), correspondence ? "with CL" : "without CL");
}

Outcome overfit(Context& ctx) {
  const auto t0 = Clock::now();
  const auto cfg = overfit_config(ctx, 0, true);
  const synth::Dataset data = synth::generate_dataset(cfg.train_scene);
  const auto& m = ctx.trained(key("overfit", 0, true), data, cfg.train);
  const pipeline::Metrics r = pipeline::evaluate_dataset(m.model, data, cfg.eval);
  const double t = m.result.seconds + seconds_since(t0);
  const bool pass = r.ap50 >= 0.80 && r.identity_continuity >= 0.90 && m.result.steps <= 3000 && t <= 1800.0;
  return {pass, fmt("train-set AP50 %.3f, identity_continuity %.3f, %zu steps, %.0f s "
                    "(need AP50 >= 0.80, continuity >= 0.90, <= 3000 steps, <= 1800 s)",
                    r.ap50, r.identity_continuity, m.result.steps, t)};
}

Outcome correspondence(Context& ctx) {
  std::vector<double> with, without, gaps;
  for (std::uint64_t s = 0; s < ctx.seeds; ++s) {
    double cont[2];
    for (bool cl : {true, false}) {
      const auto cfg = overfit_config(ctx, s, cl);
      const synth::Dataset data = synth::generate_dataset(cfg.train_scene);
      const auto& m = ctx.trained(key("overfit", s, cl), data, cfg.train);
      cont[cl] = pipeline::evaluate_dataset(m.model, data, cfg.eval).identity_continuity;
    }
    with.push_back(cont[1]);
    without.push_back(cont[0]);
    gaps.push_back(cont[1] - cont[0]);
  }
  const double gap = median(gaps);
  return {gap >= 0.3, fmt("identity_continuity with CL %s, without %s; median gap %.3f (need >= 0.300)",
                          join(with).c_str(), join(without).c_str(), gap)};
}

// Held-out runs: one model per seed, trained with stride augmentation, and
// evaluated with handoff, with the hand-crafted linker and at stride 3.
struct HeldOut {
  double e2e_ap50, hand_ap50, stride3_ap50;
};

HeldOut held_out(Context& ctx, std::uint64_t seed) {
  const auto base = experiment::experiment_config_from_json(read_json(ctx.configs / "heldout.json"));
  const auto cfg = experiment::with_seed(base, seed);
  const synth::Dataset train_set = synth::generate_dataset(cfg.train_scene);
  const synth::Dataset eval_set = synth::generate_dataset(cfg.eval_scene);
  const auto& m = ctx.trained(fmt("held-out seed %llu", static_cast<unsigned long long>(seed)), train_set, cfg.train);
  HeldOut h{};
  pipeline::EvalConfig ec = cfg.eval;
  h.e2e_ap50 = pipeline::evaluate_dataset(m.model, eval_set, ec).ap50;
  ec.linking = pipeline::Linking::Handcrafted;
  h.hand_ap50 = pipeline::evaluate_dataset(m.model, eval_set, ec).ap50;
  ec.linking = pipeline::Linking::EndToEnd;
  ec.stride = 3;
  h.stride3_ap50 = pipeline::evaluate_dataset(m.model, eval_set, ec).ap50;
  return h;
}

std::map<std::uint64_t, HeldOut> held_out_cache;

const HeldOut& held_out_cached(Context& ctx, std::uint64_t seed) {
  auto it = held_out_cache.find(seed);
  if (it == held_out_cache.end()) it = held_out_cache.emplace(seed, held_out(ctx, seed)).first;
  return it->second;
}

Outcome linking(Context& ctx) {
  std::vector<double> e2e, hand, diff;
  for (std::uint64_t s = 0; s < ctx.seeds; ++s) {
    const HeldOut& h = held_out_cached(ctx, s);
    e2e.push_back(h.e2e_ap50);
    hand.push_back(h.hand_ap50);
    diff.push_back(h.e2e_ap50 - h.hand_ap50);
  }
  const double d = median(diff);
  return {d >= 0.0, fmt("held-out AP50 handoff %s, hand-crafted %s; median difference %+.3f (need >= 0)",
                        join(e2e).c_str(), join(hand).c_str(), d)};
}

Outcome low_frame_rate(Context& ctx) {
  std::vector<double> s1, s3, drop;
  for (std::uint64_t s = 0; s < ctx.seeds; ++s) {
    const HeldOut& h = held_out_cached(ctx, s);
    s1.push_back(h.e2e_ap50);
    s3.push_back(h.stride3_ap50);
    drop.push_back(h.e2e_ap50 - h.stride3_ap50);
  }
  const double d = median(drop);
  return {d <= 0.10, fmt("held-out AP50 stride 1 %s, stride 3 %s; median drop %+.3f (need <= 0.100)",
                         join(s1).c_str(), join(s3).c_str(), d)};
}

Outcome ablation(Context& ctx) {
  const auto cfg = experiment::experiment_config_from_json(read_json(ctx.configs / "ablate.json"));
  const std::vector<std::string> variants{"baseline", "query=shared", "dynamic_conv=still"};
  const nlohmann::ordered_json r = experiment::run_ablation(cfg, variants, &std::cerr);
  std::ofstream(ctx.work / "ablation.json") << r.dump(2) << "\n";
  bool complete = true;
  for (const auto& v : variants) {
    complete = complete && r.contains(v) && r[v].size() == 6;
    if (complete) {
      for (const auto& [k, x] : r[v].items()) complete = complete && std::isfinite(x.get<double>());
    }
  }
  if (!complete) return {false, "ablation output is missing variants or metrics"};
  const double ap = r["baseline"]["AP"], shared = r["query=shared"]["AP"], still = r["dynamic_conv=still"]["AP"];
  return {true, fmt("metrics emitted (%s); AP disentangled %.3f vs shared %.3f (%s), temporal %.3f vs still %.3f (%s); "
                    "ordering reported, not gated",
                    (ctx.work / "ablation.json").string().c_str(), ap, shared, ap >= shared ? "as expected" : "reversed",
                    ap, still, ap >= still ? "as expected" : "reversed")};
}

Outcome determinism(Context& ctx) {
  // A short training run through the CLI, twice, from scratch.
  const fs::path train_cfg = ctx.work / "determinism_train.json";
  std::ofstream(train_cfg) << nlohmann::json{{"channels", 32}, {"epochs", 40}, {"lr_drop_epoch", 30}}.dump() << "\n";
  std::vector<std::string> metrics;
  for (const char* run_name : {"a", "b"}) {
    const fs::path dir = ctx.work / (std::string("determinism_") + run_name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    // Relative paths inside each run directory, so the checkpoints can be compared too.
    const std::string cd = "cd " + quote(dir.string()) + " && " + quote(fs::absolute(ctx.evis).string());
    int rc = run(cd + " --seed 7 gen-data " + quote(fs::absolute(ctx.configs / "scene.json").string()) + " --out data",
                 dir / "gen.log");
    if (rc == 0) rc = run(cd + " --seed 7 train " + quote(train_cfg.string()) + " --dataset data --checkpoint model.ckpt",
                          dir / "train.log");
    if (rc == 0) rc = run(cd + " eval model.ckpt data", dir / "metrics.json");
    if (rc == 0) rc = run(cd + " infer model.ckpt data --out predictions.json", dir / "infer.log");
    if (rc != 0) return {false, fmt("CLI run %s failed with exit %d (see %s)", run_name, rc, dir.string().c_str())};
    metrics.push_back(read_file(dir / "metrics.json"));
  }
  auto same_file = [&](const char* name) {
    return read_file(ctx.work / "determinism_a" / name) == read_file(ctx.work / "determinism_b" / name);
  };
  const bool same = metrics[0] == metrics[1];
  // All-zero metrics would make the comparison vacuous.
  const double ap50 = nlohmann::json::parse(metrics[0]).at("AP50");
  return {same && ap50 > 0.0,
          fmt("two seeded gen-data + train + eval runs: metrics JSON %s (AP50 %.3f, need > 0), checkpoints %s, "
              "predictions %s",
              same ? "byte-identical" : "differ", ap50, same_file("model.ckpt") ? "byte-identical" : "differ",
              same_file("predictions.json") ? "byte-identical" : "differ")};
}

Outcome eval_oracle(Context&) {
  using namespace pipeline;
  auto box = [](std::size_t h, std::size_t w, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
    Mask m(h * w, 0);
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m[y * w + x] = 1;
    return m;
  };
  auto pred = [](int id, double score, std::vector<Mask> masks) {
    PredictedTracklet p;
    p.identity = id;
    p.label = 0;
    p.score = score;
    p.first_frame = 0;
    p.last_frame = masks.size() - 1;
    p.masks = std::move(masks);
    return p;
  };
  auto gt = [](int id, std::vector<Mask> masks) { return GroundTruthTube{id, 0, std::move(masks)}; };

  // One perfect prediction: everything is 1.
  const Mask m = box(8, 8, 1, 1, 5, 5);
  const Metrics perfect = evaluate({EvalVideo{{pred(0, 0.9, {m, m})}, {gt(1, {m, m})}}}, 3);
  const bool ok1 = perfect.ap == 1.0 && perfect.ap50 == 1.0 && perfect.ar1 == 1.0;

  // Tube IoU 0.6: true positive at 0.50, 0.55 and 0.60 only, so AP = 3/10.
  const Mask g = box(1, 10, 0, 0, 10, 1), p = box(1, 10, 0, 0, 6, 1);
  const Metrics partial = evaluate({EvalVideo{{pred(0, 0.7, {p})}, {gt(1, {g})}}}, 3);
  const double expected2 = 3.0 / 10.0;
  const bool ok2 = video_iou({p}, {g}) == 0.6 && std::abs(partial.ap - expected2) <= 1e-12 && partial.ap50 == 1.0 &&
                   partial.ap75 == 0.0;

  // Ranked A, duplicate of A, B against ground truths A and B: the duplicate
  // is a false positive, so interpolated precision is 1 up to recall 1/2 and
  // 2/3 beyond, at every threshold.
  const Mask a = box(8, 8, 0, 0, 3, 3), b = box(8, 8, 5, 5, 8, 8);
  const Metrics dup = evaluate({EvalVideo{{pred(0, 0.9, {a}), pred(1, 0.8, {a}), pred(2, 0.7, {b})},
                                          {gt(1, {a}), gt(2, {b})}}},
                               3);
  const double expected3 = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
  const bool ok3 = std::abs(dup.ap - expected3) <= 1e-12 && dup.ar1 == 0.5 && dup.ar10 == 1.0;

  return {ok1 && ok2 && ok3, fmt("perfect: AP %.6f AP50 %.6f AR1 %.6f (want 1); IoU 0.6: AP %.17g (want 0.3); "
                                 "duplicate: AP %.17g (want %.17g); both within 1e-12; AR1 %.2f AR10 %.2f (want 0.5, 1)",
                                 perfect.ap, perfect.ap50, perfect.ar1, partial.ap, dup.ap, expected3, dup.ar1, dup.ar10)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria: one PASS/FAIL line each"};
  Context ctx;
  std::string work = "acceptance_work";
  std::vector<std::string> only;
  const std::vector<std::string> names{"gradients",     "hungarian",      "structure",   "overfit",     "correspondence",
                                       "linking",       "low_frame_rate", "ablation",    "determinism", "eval_oracle"};
  app.add_option("--test-numerics", ctx.test_numerics, "test_numerics binary")->required();
  app.add_option("--test-model", ctx.test_model, "test_model binary")->required();
  app.add_option("--evis", ctx.evis, "evis CLI binary")->required();
  app.add_option("--configs", ctx.configs, "Directory with overfit.json, heldout.json, ablate.json and scene.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Subset of criteria")->check(CLI::IsMember(names));
  CLI11_PARSE(app, argc, argv);
  ctx.work = fs::absolute(work);
  fs::create_directories(ctx.work);

  const std::map<std::string, std::function<Outcome(Context&)>> criteria{
      {"gradients", gradients},   {"hungarian", hungarian_oracle},     {"structure", structure},
      {"overfit", overfit},       {"correspondence", correspondence}, {"linking", linking},
      {"low_frame_rate", low_frame_rate}, {"ablation", ablation},     {"determinism", determinism},
      {"eval_oracle", eval_oracle}};

  bool all = true;
  for (const std::string& name : names) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria.at(name)(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << fmt(" [%.0f s]", seconds_since(t0))
              << std::endl;
  }
  return all ? 0 : 1;
}
