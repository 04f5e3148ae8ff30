#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "marble/autodiff.hpp"

namespace marble {

// Builds a scalar loss on `tape` from the bound parameter leaves (one Var per
// entry of the params span, in order).
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_param;  // max relative error per parameter tensor
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

// Central differences (f(θ+e) - f(θ-e)) / 2e per coordinate against the
// tape gradient. Parameters are perturbed in place and restored.
GradCheckResult finite_diff_check(const LossBuilder& f, std::span<Tensor* const> params,
                                  double eps = 1e-5);

// Scalar form used for closed-form derivatives.
double central_difference(const std::function<double(double)>& f, double x, double eps = 1e-5);

}  // namespace marble
