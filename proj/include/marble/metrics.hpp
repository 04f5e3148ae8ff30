#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "marble/autodiff.hpp"

namespace marble {

struct SurvivalRecord {
  double time = 1.0;  // > 0
  bool event = false;
  friend bool operator==(const SurvivalRecord&, const SurvivalRecord&) = default;
};

// -log softmax(logits)[label] in log-sum-exp form.
Var cross_entropy(Var logits, std::size_t label);

struct CoxLoss {
  Var loss;
  bool degenerate = false;  // no events: only the penalty term is present
};

// Negative Cox partial log-likelihood with Breslow ties plus lambda * ||theta||^2:
//   -sum_{i: event} ( r_i - log sum_{j: t_j >= t_i} exp(r_j) ) + lambda * theta_sq_norm
// `theta_sq_norm` is a scalar Var (typically the squared norm of all trainable
// parameters); pass a constant zero to disable the penalty.
CoxLoss cox_loss(Var risks, std::span<const SurvivalRecord> records, double lambda,
                 Var theta_sq_norm);

// Sum of squares of a set of tensors, as one differentiable scalar.
Var squared_norm(std::span<const Var> params);

// Harrell's concordance over pairs with t_i < t_j and event_i: r_i > r_j
// scores 1, tied risks 0.5. Throws UndefinedValueError without comparable
// pairs.
double c_index(std::span<const double> risks, std::span<const SurvivalRecord> records);

// Mann-Whitney AUC with mid-ranks for ties. labels are 0/1.
double auc_binary(std::span<const double> scores, std::span<const int> labels);

// Unweighted mean of one-vs-rest AUCs over the classes present. scores is
// row-major n x C.
double auc_macro_ovr(std::span<const double> scores, std::size_t classes,
                     std::span<const int> labels);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

}  // namespace marble
