// Every differentiable op against central differences, 10 seeds each,
// f64 with eps = 1e-6 and relative tolerance 1e-5.
#include <doctest.h>

#include "evis/gradcheck.hpp"
#include "evis/ops.hpp"
#include "support.hpp"

using namespace evis;
using evis::testing::project;
using evis::testing::random_tensor;
using evis::testing::Rng;

namespace {

constexpr double kEps = 1e-6;
constexpr double kTol = 1e-5;
constexpr int kSeeds = 10;

using Builder = std::function<std::pair<std::vector<Tensor>, ScalarFn>(Rng&, std::uint64_t)>;

void check_op(const char* name, const Builder& build) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + static_cast<std::uint64_t>(seed));
    auto [inputs, fn] = build(rng, static_cast<std::uint64_t>(seed));
    auto report = grad_check(fn, inputs, kEps, kTol);
    INFO(name << " seed " << seed << " max rel error " << report.max_rel_error());
    CHECK(report.passed);
  }
}

Tensor rt(const Shape& s, Rng& rng, double lo = -1, double hi = 1) { return random_tensor(s, rng, lo, hi, true); }

}  // namespace

TEST_CASE("elementwise ops") {
  check_op("add/sub/mul/div broadcast", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({3, 4}, rng), rt({4}, rng, 0.5, 2.0), rt({3, 1}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      return project(sub(div(mul(x[0], x[2]), x[1]), add(x[2], x[1])), seed);
    };
    return std::make_pair(in, fn);
  });
  check_op("max/min", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({5, 3}, rng), rt({5, 3}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      return project(add(maximum(x[0], x[1]), mul_scalar(minimum(x[0], x[1]), 0.7)), seed);
    };
    return std::make_pair(in, fn);
  });
  check_op("unary", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({4, 3}, rng, 0.2, 2.0), rt({4, 3}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      Tensor a = add(log(x[0]), sqrt(x[0]));
      Tensor b = add(add(exp(x[1]), sigmoid(x[1])), add(relu(x[1]), abs(x[1])));
      Tensor c = add(square(x[1]), clamp(x[1], -0.5, 0.5));
      return project(add(add(a, b), add_scalar(neg(c), 3.0)), seed);
    };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("reductions and shape ops") {
  check_op("sum/mean axis", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 3, 4}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      return add(project(sum(x[0], 1), seed), project(mean(x[0], 2, true), seed + 1));
    };
    return std::make_pair(in, fn);
  });
  check_op("permute/reshape/slice/concat/index/expand", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 3, 4}, rng), rt({2, 1, 4}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      Tensor p = permute(x[0], {2, 0, 1});
      Tensor r = reshape(p, {8, 3});
      Tensor s = slice(r, 0, 2, 5);
      const std::vector<std::size_t> idx{4, 0, 0, 2};
      Tensor g = index_select(s, 0, idx);
      Tensor e = expand(x[1], {2, 3, 4});
      Tensor c = concat({x[0], e}, 1);
      return add(project(g, seed), project(c, seed + 7));
    };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("linear algebra") {
  check_op("matmul/bmm/linear", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 3, 4}, rng), rt({4, 5}, rng), rt({2, 4, 2}, rng), rt({5}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      return add(add(project(matmul(x[0], x[1]), seed), project(matmul(x[0], x[2]), seed + 1)),
                 project(linear(x[0], x[1], x[3]), seed + 2));
    };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("probabilities and normalisation") {
  check_op("softmax/log_softmax/masked", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({3, 4, 2}, rng, -3, 3)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      std::vector<std::uint8_t> valid(24, 1);
      for (std::size_t i = 0; i < 24; i += 5) valid[i] = 0;
      return add(add(project(softmax(x[0], 1), seed), project(log_softmax(x[0], 2), seed + 1)),
                 project(masked_softmax(x[0], 1, valid), seed + 2));
    };
    return std::make_pair(in, fn);
  });
  check_op("layer_norm", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({3, 6}, rng, -2, 2), rt({6}, rng, 0.5, 1.5), rt({6}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) { return project(layer_norm(x[0], x[1], x[2]), seed); };
    return std::make_pair(in, fn);
  });
  check_op("cosine_similarity", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({4, 5}, rng), rt({4, 5}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) { return project(cosine_similarity(x[0], x[1]), seed); };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("losses") {
  check_op("pick/bce", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({4, 3}, rng, -3, 3), rt({2, 5}, rng, -4, 4)};
    std::vector<double> targets(10);
    for (double& t : targets) t = rng.uniform() < 0.5 ? 0.0 : 1.0;
    ScalarFn fn = [seed, targets](const std::vector<Tensor>& x) {
      const std::vector<std::size_t> idx{2, 0, 1, 1};
      return add(project(pick(log_softmax(x[0], 1), idx), seed), sum(bce_with_logits(x[1], targets)));
    };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("attention") {
  // The key bias is omitted from the inputs: softmax is shift invariant, so
  // its gradient is identically zero and only roundoff would be compared.
  check_op("multi_head_attention", [](Rng& rng, std::uint64_t seed) {
    const std::size_t c = 8;
    std::vector<Tensor> in{rt({2, 3, c}, rng), rt({2, 3, c}, rng)};
    for (int i = 0; i < 4; ++i) {
      in.push_back(rt({c, c}, rng));
      in.push_back(rt({c}, rng, -0.1, 0.1));
    }
    Tensor key_bias = in[5].detach();
    in.erase(in.begin() + 5);
    ScalarFn fn = [seed, key_bias](const std::vector<Tensor>& x) {
      AttentionParams p{x[2], x[3], x[4], key_bias, x[5], x[6], x[7], x[8]};
      return project(multi_head_attention(x[0], x[1], p, 2), seed);
    };
    return std::make_pair(in, fn);
  });
}

TEST_CASE("vision") {
  check_op("conv2d", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 5, 6, 3}, rng), rt({3, 3, 3, 4}, rng), rt({4}, rng), rt({1, 1, 3, 2}, rng)};
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      return add(add(project(conv2d(x[0], x[1], x[2], 1), seed), project(conv2d(x[0], x[1], x[2], 2), seed + 1)),
                 project(conv2d(x[0], x[3], Tensor{}, 1), seed + 2));
    };
    return std::make_pair(in, fn);
  });
  check_op("roi_align", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 6, 7, 3}, rng)};
    std::vector<double> boxes;
    for (int b = 0; b < 3; ++b) {
      const double x1 = rng.uniform(-4, 9), y1 = rng.uniform(-4, 8);
      boxes.insert(boxes.end(), {x1, y1, x1 + rng.uniform(5, 14), y1 + rng.uniform(5, 12)});
    }
    in.emplace_back(Shape{3, 4}, boxes, true);
    ScalarFn fn = [seed](const std::vector<Tensor>& x) {
      const std::vector<std::size_t> frames{0, 1, 1};
      return project(roi_align(x[0], x[1], frames, 3, 4, 0.5), seed);
    };
    return std::make_pair(in, fn);
  });
  check_op("paste_masks", [](Rng& rng, std::uint64_t seed) {
    std::vector<Tensor> in{rt({2, 4, 5}, rng, -3, 3)};
    std::vector<double> boxes;
    for (int b = 0; b < 2; ++b) {
      const double x1 = rng.uniform(-2, 8), y1 = rng.uniform(-2, 8);
      boxes.insert(boxes.end(), {x1, y1, x1 + rng.uniform(3, 9), y1 + rng.uniform(3, 9)});
    }
    in.emplace_back(Shape{2, 4}, boxes, true);
    ScalarFn fn = [seed](const std::vector<Tensor>& x) { return project(paste_masks(x[0], x[1], 12, 11, -5.0), seed); };
    return std::make_pair(in, fn);
  });
}
