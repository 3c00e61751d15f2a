#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ytune/autodiff.hpp"

namespace ytune {

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every element
/// of `p`. `fn` must read p.value; it is restored before returning.
inline Tensor finite_diff_grad(const std::function<double()>& fn, Parameter& p, double h = 1e-5) {
  if (!(h > 0.0)) throw UsageError("finite difference step must be positive");
  Tensor g(p.value.shape());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double orig = p.value[i];
    p.value[i] = orig + h;
    const double up = fn();
    p.value[i] = orig - h;
    const double down = fn();
    p.value[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Entries whose analytic and numeric magnitudes are both below this floor
/// are compared in absolute terms against it. Central differences at h=1e-5
/// carry ~1e-10 of cancellation noise per unit of loss once roundoff from a
/// deep forward pass is included, so check_gradients scales the floor by
/// max(1, |loss|).
inline constexpr double kGradCheckFloor = 1e-5;

inline double grad_relative_error(double analytic, double numeric, double floor = kGradCheckFloor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct ParamGradError {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t elements_checked = 0;
  double tolerance = 0.0;
  /// Absolute floor used in the relative error (see kGradCheckFloor).
  double floor = 0.0;
  bool passed = false;
};

/// Compares analytic gradients against central differences for every
/// trainable parameter in `params`. `loss_fn` evaluates the loss from current
/// parameter values; `grad_fn` zeroes and fills Parameter::grad.
inline GradCheckReport check_gradients(const std::vector<Parameter*>& params,
                                       const std::function<double()>& loss_fn,
                                       const std::function<void()>& grad_fn, double tol,
                                       double h = 1e-5) {
  const double floor = kGradCheckFloor * std::max(1.0, std::abs(loss_fn()));
  grad_fn();
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  GradCheckReport report;
  report.tolerance = tol;
  report.floor = floor;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    Tensor numeric = finite_diff_grad(loss_fn, p, h);
    ParamGradError e{p.name, p.size(), 0.0, 0};
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double r = grad_relative_error(analytic[k][i], numeric[i], floor);
      if (r > e.max_rel_error) {
        e.max_rel_error = r;
        e.worst_index = i;
      }
    }
    report.elements_checked += p.size();
    if (e.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = e.max_rel_error;
      report.worst_param = p.name;
    }
    report.params.push_back(std::move(e));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace ytune
