#pragma once

// Central finite-difference gradient checking against the recorded backward.

#include <bit>
#include <functional>
#include <string>

#include "vila/ops.hpp"

namespace vila {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-5;
  /// Components whose magnitude is below floor_ratio * max|grad| are compared
  /// against that floor instead of their own magnitude.
  double floor_ratio = 1e-3;
  /// Coordinates to leave out, e.g. inputs within eps of a kink.
  std::function<bool(std::size_t index, double value)> skip = nullptr;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

class NondeterministicFunction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Skip predicate for functions with a kink at zero (relu and friends).
inline std::function<bool(std::size_t, double)> skip_near(double point, double margin) {
  return [point, margin](std::size_t, double v) { return std::abs(v - point) < margin; };
}

/// Compares the backward gradient of scalar f at x with central differences.
/// x is perturbed in place and restored.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  const GradCheckOptions& opt = {}) {
  auto eval = [&]() {
    NoGradGuard ng;
    const Tensor y = f(x);
    if (y.numel() != 1) throw DimensionError("grad_check needs a scalar function, got " + shape_str(y.shape()));
    return y.item();
  };

  const double f0 = eval();
  const double f1 = eval();
  if (std::bit_cast<std::uint64_t>(f0) != std::bit_cast<std::uint64_t>(f1)) {
    throw NondeterministicFunction("grad_check: two forward passes at the same point disagree");
  }

  GradCheckReport rep;
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  reset_graph();
  {
    const Tensor y = f(x);
    backward(y);
  }
  rep.analytic = x.grad();
  x.zero_grad();
  x.set_requires_grad(had);

  auto data = x.mutable_data();
  rep.numeric.assign(data.size(), 0.0);
  std::vector<bool> skipped(data.size(), false);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    if (opt.skip && opt.skip(i, orig)) {
      skipped[i] = true;
      ++rep.skipped;
      continue;
    }
    data[i] = orig + opt.eps;
    const double fp = eval();
    data[i] = orig - opt.eps;
    const double fm = eval();
    data[i] = orig;
    rep.numeric[i] = (fp - fm) / (2.0 * opt.eps);
  }

  double scale = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!skipped[i]) scale = std::max({scale, std::abs(rep.numeric[i]), std::abs(rep.analytic[i])});
  }
  const double floor = std::max(opt.floor_ratio * scale, 1e-12);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (skipped[i]) continue;
    ++rep.checked;
    const double a = rep.analytic[i], n = rep.numeric[i];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
    }
  }
  rep.passed = rep.max_rel_error <= opt.tol;
  return rep;
}

}  // namespace vila
