#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evis/tensor.hpp"

namespace evis {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t failures = 0;
  std::size_t elements = 0;
  /// Elements skipped because the function has a kink within eps (see
  /// GradCheckOptions::detect_nonsmooth).
  std::size_t nonsmooth = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> inputs;
  bool passed = true;
  double max_rel_error() const;
  std::size_t elements() const;
  std::size_t nonsmooth() const;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of a scalar function with central
/// differences (f(x+eps) - f(x-eps)) / 2eps, element by element. Relative
/// error is |a-b| / max(|a|, |b|, 1e-8). An element fails when its relative
/// error exceeds `tol` and its absolute error exceeds `abs_tol`
/// (abs_tol = 0 makes the test purely relative).
///
/// Inputs are perturbed in place and restored; they must be leaves. When
/// `names` is non-empty it labels the report entries.
GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, double eps, double tol,
                           double abs_tol = 0.0, std::vector<std::string> names = {});

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  double abs_tol = 0.0;
  /// For an element that fails, also take the one-sided differences
  /// (f(x+eps) - f(x)) / eps and (f(x) - f(x-eps)) / eps. If they disagree by
  /// more than `kink_tol` relative while the analytic gradient matches one of
  /// them within `kink_tol`, a ReLU/clamp/bilinear-cell boundary lies within
  /// eps of x. Such elements are counted as nonsmooth instead of failed.
  bool detect_nonsmooth = false;
  double kink_tol = 1e-3;
  std::vector<std::string> names;
};

GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, const GradCheckOptions& options);

}  // namespace evis
