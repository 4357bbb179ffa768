#pragma once

// Test-only helpers: seeded random tensors and a finite-difference oracle
// that is independent of evis::grad_check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "evis/ops.hpp"
#include "evis/tensor.hpp"

namespace evis::testing {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

/// Central differences of a scalar function of one tensor.
inline std::vector<double> finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                             double eps = 1e-6) {
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> up = base, down = base;
    up[i] += eps;
    down[i] -= eps;
    out[i] = (f(Tensor(x.shape(), up)) - f(Tensor(x.shape(), down))) / (2.0 * eps);
  }
  return out;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// sum(x * w) for a fixed random projection w, turning any op into a
/// well-conditioned scalar test function.
inline Tensor project(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
  return sum(mul(x, random_tensor(x.shape(), rng)));
}

}  // namespace evis::testing
