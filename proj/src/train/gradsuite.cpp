#include <algorithm>
#include <cmath>

#include "evis/random.hpp"
#include "evis/train.hpp"

namespace evis::train {

GradCheckReport full_loss_grad_check(std::uint64_t seed) {
  model::ModelConfig cfg;
  cfg.channels = 8;
  cfg.queries = 2;
  cfg.iterations = 2;
  cfg.heads = 2;
  cfg.roi_size = 3;
  cfg.mask_size = 4;
  cfg.frame_h = cfg.frame_w = 16;
  cfg.backbone_width1 = 4;
  cfg.backbone_width2 = 4;
  cfg.init_seed = 100 + seed;
  const std::size_t h = 16, w = 16, t = 2, k = cfg.num_classes;
  model::Model net(cfg);
  Random rng(seed * 0x9E3779B97F4A7C15ULL + 17);
  for (auto& [name, p] : net.parameters()) {
    if (name == "init_proposals") continue;
    for (double& v : p.mutable_values()) v += rng.uniform(-0.05, 0.05);
  }
  std::vector<double> pixels(t * h * w * 3);
  for (double& v : pixels) v = rng.uniform();
  const Tensor frames({t, h, w, 3}, std::move(pixels));

  // One tracklet, visible in frame 0 only, with a random square mask.
  ClipTarget target;
  for (std::size_t f = 0; f < t; ++f) {
    const bool vis = f == 0;
    const std::size_t side = 2 + rng.index(3), x0 = rng.index(w - side), y0 = rng.index(h - side);
    std::vector<double> m(h * w, 0.0);
    if (vis) {
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) m[y * w + x] = 1.0;
    }
    target.visible.push_back(vis ? 1 : 0);
    target.labels.push_back(vis ? static_cast<int>(rng.index(k)) : static_cast<int>(k));
    target.masks.push_back(std::move(m));
    target.boxes.push_back(vis ? std::array<double, 4>{double(x0), double(y0), double(x0 + side), double(y0 + side)}
                               : std::array<double, 4>{0, 0, 0, 0});
  }
  const std::vector<ClipTarget> targets{target};
  const LossWeights lw;

  Assignment fixed;
  double loss = 0.0;
  {
    NoGradGuard guard;
    const auto preds = model::forward_clip(net, frames, model::init_tracklet_state(net, t));
    fixed = match(preds.final(), targets, h, w, lw);
    loss = deep_supervision_loss(preds, targets, lw, &fixed, false).loss.total;
  }
  GradCheckOptions opt;
  opt.eps = 1e-6;
  opt.tol = 1e-4;
  opt.abs_tol = 64.0 * 0x1.0p-53 * std::max(std::abs(loss), 1.0) / opt.eps;
  opt.detect_nonsmooth = true;
  std::vector<Tensor> inputs;
  for (const auto& [name, p] : net.parameters()) {
    inputs.push_back(p);
    opt.names.push_back(name);
  }
  const ScalarFn fn = [&](const std::vector<Tensor>&) {
    const auto preds = model::forward_clip(net, frames, model::init_tracklet_state(net, t));
    return deep_supervision_loss(preds, targets, lw, &fixed, false).loss.total_tensor;
  };
  return grad_check(fn, inputs, opt);
}

}  // namespace evis::train
