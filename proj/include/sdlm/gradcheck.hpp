// Central finite-difference gradient checker. Failures are reported, never
// thrown: callers decide what tolerance means.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sdlm/tensor.hpp"

namespace sdlm {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;
  bool within(double tolerance) const { return max_rel_err < tolerance; }
};

// f(grads): evaluates the scalar objective at the current parameter values.
// When grads != nullptr it must be resized/filled with one gradient tensor per
// parameter, in order. f must be deterministic.
template <typename T>
GradCheckReport grad_check(
    const std::vector<std::pair<std::string, Tensor<T>*>>& params,
    const std::function<double(std::vector<Tensor<T>>* grads)>& f,
    double step) {
  std::vector<Tensor<T>> analytic;
  f(&analytic);
  if (analytic.size() != params.size())
    throw argument_error("grad_check: objective filled " +
                         std::to_string(analytic.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckGroup group;
    group.name = params[p].first;
    Tensor<T>& theta = *params[p].second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T saved = theta[i];
      theta[i] = saved + static_cast<T>(step);
      const double f_plus = f(nullptr);
      theta[i] = saved - static_cast<T>(step);
      const double f_minus = f(nullptr);
      theta[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = static_cast<double>(analytic[p][i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > group.max_rel_err) {
        group.max_rel_err = rel;
        group.worst_index = i;
        group.worst_analytic = a;
        group.worst_numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace sdlm
