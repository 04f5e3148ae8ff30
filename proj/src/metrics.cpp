#include "marble/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "marble/error.hpp"

namespace marble {

Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& l = logits.value();
  if (l.rank() != 1) throw DimensionError("cross_entropy: logits must be a vector");
  if (label >= l.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(l.size()) + " classes");
  }
  return sub(log_sum_exp(logits), pick(logits, label));
}

CoxLoss cox_loss(Var risks, std::span<const SurvivalRecord> records, double lambda,
                 Var theta_sq_norm) {
  const Tensor& r = risks.value();
  if (r.rank() != 1 || r.size() != records.size() || records.empty()) {
    throw DimensionError("cox_loss: " + std::to_string(records.size()) + " records for risks " +
                         shape_str(r.shape()));
  }
  if (!(lambda >= 0.0)) throw ArgumentError("cox_loss: lambda must be >= 0");
  const std::size_t n = r.size();
  for (const auto& rec : records) {
    if (!(rec.time > 0.0)) throw DomainError("cox_loss: survival times must be positive");
  }

  // Ascending time; risk set of subject i is the suffix starting at the first
  // subject whose time equals t_i (Breslow: ties share one denominator).
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });

  // Suffix log-sum-exp over the sorted order, stabilized by the global max.
  const double mx = *std::max_element(r.data().begin(), r.data().end());
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t p = n; p-- > 0;) suffix[p] = suffix[p + 1] + std::exp(r[order[p]] - mx);
  std::vector<std::size_t> group_start(n);
  for (std::size_t p = 0; p < n; ++p) {
    const bool tie = p > 0 && records[order[p]].time == records[order[p - 1]].time;
    group_start[p] = tie ? group_start[p - 1] : p;
  }

  bool any_event = false;
  double nll = 0.0;
  // Per sorted position s: sum over events i whose risk set starts at or
  // before s of 1 / S_i, where S_i is the (shifted) risk-set sum.
  std::vector<double> inv_at_start(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = order[p];
    if (!records[i].event) continue;
    any_event = true;
    const double denom = suffix[group_start[p]];
    nll -= r[i] - (mx + std::log(denom));
    inv_at_start[group_start[p]] += 1.0 / denom;
  }
  const double penalty = lambda * theta_sq_norm.value().item();
  Tensor value = Tensor::scalar(nll + penalty);

  const std::size_t ir = risks.id, ip = theta_sq_norm.id;
  std::vector<SurvivalRecord> recs(records.begin(), records.end());
  Var loss = risks.tape->push(
      "cox_loss", std::move(value), {ir, ip},
      [ir, ip, lambda, order, inv_at_start, recs, mx](Tape& t, std::size_t self) {
        const double g = t.grad_ref(self)[0];
        if (t.needs_grad(ir)) {
          const Tensor& rv = t.value(ir);
          Tensor& gr = t.grad_ref(ir);
          double cumulative = 0.0;
          for (std::size_t p = 0; p < order.size(); ++p) {
            cumulative += inv_at_start[p];
            const std::size_t j = order[p];
            double d = std::exp(rv[j] - mx) * cumulative;
            if (recs[j].event) d -= 1.0;
            gr[j] += g * d;
          }
        }
        if (t.needs_grad(ip)) t.grad_ref(ip)[0] += g * lambda;
      });
  return CoxLoss{loss, !any_event};
}

Var squared_norm(std::span<const Var> params) {
  if (params.empty()) throw DimensionError("squared_norm: no tensors");
  std::vector<Var> parts;
  parts.reserve(params.size());
  for (const Var& p : params) parts.push_back(dot(p, p));
  return sum(stack_scalars(parts));
}

double c_index(std::span<const double> risks, std::span<const SurvivalRecord> records) {
  const std::size_t n = risks.size();
  if (n != records.size()) throw DimensionError("c_index: risks and records differ in length");
  if (n < 2) throw UndefinedValueError("c_index: need at least two subjects");

  // Walk subjects by decreasing time. Subjects with strictly later times sit
  // in a Fenwick tree over risk ranks; each event queries how many of them
  // have lower / equal risk.
  std::vector<double> sorted(risks.begin(), risks.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const std::size_t m = sorted.size();
  auto rank_of = [&](double v) {
    return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
  };
  std::vector<std::size_t> tree(m + 1, 0);
  auto add = [&](std::size_t pos) {
    for (std::size_t i = pos + 1; i <= m; i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t count) {  // entries with rank < count
    std::size_t s = 0;
    for (std::size_t i = count; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].time > records[b].time; });

  double concordant = 0.0;
  double comparable = 0.0;
  std::size_t inserted = 0;
  for (std::size_t p = 0; p < n;) {
    std::size_t q = p;
    while (q < n && records[order[q]].time == records[order[p]].time) ++q;
    for (std::size_t s = p; s < q; ++s) {
      const std::size_t i = order[s];
      if (!records[i].event) continue;
      const std::size_t rk = rank_of(risks[i]);
      const std::size_t lower = prefix(rk);
      const std::size_t equal = prefix(rk + 1) - lower;
      concordant += static_cast<double>(lower) + 0.5 * static_cast<double>(equal);
      comparable += static_cast<double>(inserted);
    }
    for (std::size_t s = p; s < q; ++s) add(rank_of(risks[order[s]]));
    inserted += q - p;
    p = q;
  }
  if (comparable == 0.0) throw UndefinedValueError("c_index: no comparable pairs");
  return concordant / comparable;
}

double auc_binary(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  if (n != labels.size()) throw DimensionError("auc_binary: scores and labels differ in length");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the mid-rank keeps every quantity an exact integer.
  double rank2_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t p = 0; p < n;) {
    std::size_t q = p;
    while (q < n && scores[order[q]] == scores[order[p]]) ++q;
    const double mid2 = static_cast<double>(p + 1 + q);  // 2 * mean of ranks p+1..q
    for (std::size_t s = p; s < q; ++s) {
      if (labels[order[s]] != 0 && labels[order[s]] != 1) {
        throw ArgumentError("auc_binary: labels must be 0 or 1");
      }
      if (labels[order[s]] == 1) {
        rank2_pos += mid2;
        ++n_pos;
      }
    }
    p = q;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedValueError("auc_binary: only one class present");
  const double np = static_cast<double>(n_pos);
  // U = R_pos - n_pos (n_pos + 1) / 2, doubled on both sides.
  const double u2 = rank2_pos - np * (np + 1.0);
  return (u2 / 2.0) / (np * static_cast<double>(n_neg));
}

double auc_macro_ovr(std::span<const double> scores, std::size_t classes,
                     std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (scores.size() != n * classes) throw DimensionError("auc_macro_ovr: score matrix size mismatch");
  double total = 0.0;
  std::size_t used = 0;
  std::vector<double> col(n);
  std::vector<int> bin(n);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * classes + c];
      bin[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
      pos += static_cast<std::size_t>(bin[i]);
    }
    if (pos == 0 || pos == n) continue;
    total += auc_binary(col, bin);
    ++used;
  }
  if (used == 0) throw UndefinedValueError("auc_macro_ovr: only one class present");
  return total / static_cast<double>(used);
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: length mismatch");
  if (truth.empty()) throw DimensionError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace marble
