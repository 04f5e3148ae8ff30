#include "marble/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "marble/error.hpp"

namespace marble {

namespace {

double evaluate(const LossBuilder& f, std::span<Tensor* const> params) {
  Tape tape(false);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (Tensor* p : params) vars.push_back(tape.param(*p, nullptr));
  const double v = f(tape, vars).value().item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
  return v;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult finite_diff_check(const LossBuilder& f, std::span<Tensor* const> params,
                                  double eps) {
  if (!(eps > 0.0)) throw ArgumentError("finite_diff_check: eps must be positive");

  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) grads.emplace_back(p->shape(), 0.0);
  {
    Tape tape(true);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.param(*params[i], &grads[i]));
    Var loss = f(tape, vars);
    tape.backward(loss);
  }

  GradCheckResult res;
  res.per_param.assign(params.size(), 0.0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double orig = p[j];
      p[j] = orig + eps;
      const double up = evaluate(f, params);
      p[j] = orig - eps;
      const double down = evaluate(f, params);
      p[j] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(grads[pi][j], numeric);
      res.per_param[pi] = std::max(res.per_param[pi], err);
      if (err > res.max_rel_error || (pi == 0 && j == 0)) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        res.worst_param = pi;
        res.worst_index = j;
        res.worst_analytic = grads[pi][j];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

double central_difference(const std::function<double(double)>& f, double x, double eps) {
  if (!(eps > 0.0)) throw ArgumentError("central_difference: eps must be positive");
  const double up = f(x + eps);
  const double down = f(x - eps);
  if (!std::isfinite(up) || !std::isfinite(down)) {
    throw NumericError("central_difference: function is not finite near x");
  }
  return (up - down) / (2.0 * eps);
}

}  // namespace marble
