#include "evis/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace evis {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : inputs) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::size_t GradCheckReport::elements() const {
  std::size_t n = 0;
  for (const auto& e : inputs) n += e.elements;
  return n;
}

std::size_t GradCheckReport::nonsmooth() const {
  std::size_t n = 0;
  for (const auto& e : inputs) n += e.nonsmooth;
  return n;
}

GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, double eps, double tol, double abs_tol,
                           std::vector<std::string> names) {
  GradCheckOptions options;
  options.eps = eps;
  options.tol = tol;
  options.abs_tol = abs_tol;
  options.names = std::move(names);
  return grad_check(fn, std::move(inputs), options);
}

GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, const GradCheckOptions& options) {
  const double eps = options.eps, tol = options.tol, abs_tol = options.abs_tol;
  const std::vector<std::string>& names = options.names;
  for (Tensor& t : inputs) {
    if (!t.is_leaf()) throw std::invalid_argument("grad_check: inputs must be leaves");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = fn(inputs);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: function is not scalar-valued");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }
  loss = Tensor();

  GradCheckReport report;
  NoGradGuard no_grad;
  const double base = options.detect_nonsmooth ? fn(inputs).item() : 0.0;
  auto close = [](double a, double b, double rtol) {
    return std::abs(a - b) <= rtol * std::max({std::abs(a), std::abs(b), 1e-8});
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    GradCheckEntry entry;
    entry.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    auto values = inputs[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = fn(inputs).item();
      values[i] = saved - eps;
      const double down = fn(inputs).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++entry.elements;
      const bool bad = rel > tol && abs_err > abs_tol;
      if (bad && options.detect_nonsmooth) {
        const double right = (up - base) / eps, left = (base - down) / eps;
        const double kt = options.kink_tol;
        if (!close(left, right, kt) && (close(a, left, kt) || close(a, right, kt))) {
          ++entry.nonsmooth;
          continue;
        }
      }
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      if (bad) ++entry.failures;
    }
    if (entry.failures > 0) report.passed = false;
    report.inputs.push_back(std::move(entry));
  }
  return report;
}

}  // namespace evis
