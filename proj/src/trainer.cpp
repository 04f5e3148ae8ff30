#include "marble/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "marble/error.hpp"
#include "marble/metrics.hpp"

namespace marble {

std::string_view level_mode_name(LevelMode m) {
  switch (m) {
    case LevelMode::All: return "all";
    case LevelMode::Coarse: return "coarse";
    case LevelMode::Fine: return "fine";
  }
  return "all";
}

LevelMode parse_level_mode(std::string_view s) {
  if (s == "all") return LevelMode::All;
  if (s == "coarse") return LevelMode::Coarse;
  if (s == "fine") return LevelMode::Fine;
  throw ConfigError("unknown level mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(drop_alpha >= 0.0 && drop_alpha < 1.0)) {
    throw ConfigError("drop_alpha must lie in [0, 1), got " + std::to_string(drop_alpha));
  }
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
  if (batch_size != 1) throw ConfigError("batch_size is fixed at 1");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(cox_lambda >= 0.0)) throw ConfigError("cox_lambda must be >= 0");
  if (cox_group < 2) throw ConfigError("cox_group must be >= 2");
  if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  if (dims.d_model == 0 || dims.inner == 0 || dims.state == 0) throw ConfigError("model dims must be positive");
  if (head == HeadKind::Classification && dims.classes < 2) throw ConfigError("classes must be >= 2");
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                OptimizerState& state, double lr, const TrainConfig& config) {
  if (params.size() != grads.size()) throw DimensionError("adamw_step: params/grads count mismatch");
  if (!(lr >= 0.0)) throw ArgumentError("adamw_step: lr must be >= 0");
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state layout mismatch");
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (g.shape() != p.shape() || state.m[i].shape() != p.shape()) {
      throw DimensionError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p[j] = p[j] - lr * m_hat / (std::sqrt(v_hat) + config.adam_eps) - lr * config.weight_decay * p[j];
    }
  }
}

double cosine_warmup_lr(std::size_t epoch, const TrainConfig& config) {
  if (epoch >= config.epochs) {
    throw ArgumentError("cosine_warmup_lr: epoch " + std::to_string(epoch) + " out of range");
  }
  const double W = static_cast<double>(config.warmup_epochs);
  const double e = static_cast<double>(epoch);
  if (epoch < config.warmup_epochs) return config.base_lr * ((e + 1.0) / W);
  const double span = static_cast<double>(config.epochs) - W;
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * (e - W) / span));
}

double clip_global_norm(std::span<Tensor* const> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor* g : grads) {
    for (double v : g->data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor* g : grads) {
      for (double& v : g->data()) v *= s;
    }
  }
  return norm;
}

std::string epoch_report_csv(const std::vector<EpochReport>& reports) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,train_loss,val_metric,best_so_far,stopped_flag\n";
  for (const auto& r : reports) {
    os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_metric << ','
       << r.best_so_far << ',' << (r.stopped ? 1 : 0) << '\n';
  }
  return os.str();
}

double EvalReport::selection_metric() const {
  if (head == HeadKind::Classification) {
    if (!auc) throw UndefinedValueError("evaluation has no AUC");
    return *auc;
  }
  if (!c_index) throw UndefinedValueError("evaluation has no C-index");
  return *c_index;
}

TokenBag project_levels(const TokenBag& bag, LevelMode mode) {
  switch (mode) {
    case LevelMode::All: return bag;
    case LevelMode::Coarse: return single_level(bag, 0);
    case LevelMode::Fine: return single_level(bag, bag.finest());
  }
  return bag;
}

EvalReport evaluate(const MarbleParams& params, const std::vector<const Slide*>& slides,
                    LevelMode mode) {
  if (slides.empty()) throw ConfigError("evaluate: empty split");
  const ModelDims dims = dims_of(params);
  EvalReport rep;
  rep.head = params.head;
  std::vector<double> scores, margins;
  std::vector<int> labels, predicted;
  std::vector<double> risks;
  std::vector<SurvivalRecord> records;
  for (const Slide* s : slides) {
    const TokenBag bag = project_levels(s->bag, mode);
    if (bag.dim != dims.d_model || bag.num_levels() != dims.levels) {
      throw CheckpointError("evaluate: model (D=" + std::to_string(dims.d_model) + ", levels=" +
                            std::to_string(dims.levels) + ") does not fit slide " + s->meta.id +
                            " (D=" + std::to_string(bag.dim) + ", levels=" +
                            std::to_string(bag.num_levels()) + ")");
    }
    const SlideOutput out = encode_slide(bag, params);
    SlidePrediction pred;
    pred.id = s->meta.id;
    if (params.head == HeadKind::Classification) {
      const Tensor& logits = out.head;
      const double mx = *std::max_element(logits.data().begin(), logits.data().end());
      double z = 0.0;
      for (double l : logits.data()) z += std::exp(l - mx);
      for (double l : logits.data()) pred.scores.push_back(std::exp(l - mx) / z);
      pred.predicted = static_cast<int>(
          std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin());
      scores.insert(scores.end(), pred.scores.begin(), pred.scores.end());
      if (logits.size() == 2) margins.push_back(logits[1] - logits[0]);
      labels.push_back(s->meta.label);
      predicted.push_back(pred.predicted);
    } else {
      pred.scores.push_back(out.head.item());
      risks.push_back(out.head.item());
      records.push_back(s->meta.survival);
    }
    rep.predictions.push_back(std::move(pred));
  }
  if (params.head == HeadKind::Classification) {
    rep.accuracy = accuracy(predicted, labels);
    const std::size_t C = dims.classes;
    if (C == 2) {
      // Rank by the logit margin; probabilities saturate to equal values.
      rep.auc = auc_binary(margins, labels);
    } else {
      rep.auc = auc_macro_ovr(scores, C, labels);
    }
  } else {
    rep.c_index = c_index(risks, records);
  }
  return rep;
}

EvalReport evaluate(const MarbleParams& params, const Dataset& data, Split split, LevelMode mode) {
  return evaluate(params, data.split(split), mode);
}

ModelDims resolve_dims(const Dataset& data, const TrainConfig& config) {
  if (data.slides.empty()) throw ConfigError("dataset is empty");
  ModelDims d = config.dims;
  d.head = config.head;
  const TokenBag& first = data.slides.front().bag;
  d.d_model = first.dim;
  d.levels = config.level_mode == LevelMode::All ? first.num_levels() : 1;
  if (config.head == HeadKind::Survival) d.classes = 1;
  return d;
}

namespace {

std::vector<Tensor*> tensor_list(MarbleParams& p) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors(p)) out.push_back(t);
  return out;
}

double checked(double loss, std::size_t epoch, const std::string& slide) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", slide " + slide);
  }
  return loss;
}

TrainResult run_training(const Dataset& data, const TrainConfig& config, const MetricOverride& metric,
                         const EpochCallback& on_epoch) {
  config.validate();
  if (data.task != config.head) throw ConfigError("dataset task does not match the configured head");
  const auto train_set = data.split(Split::Train);
  const auto val_set = data.split(Split::Val);
  if (train_set.empty()) throw ConfigError("train split is empty");
  if (val_set.empty() && !metric) throw ConfigError("validation split is empty");

  const ModelDims dims = resolve_dims(data, config);
  if (dims.levels < 1) throw ConfigError("bags have no levels");
  if (config.level_mode != LevelMode::All && data.slides.front().bag.num_levels() < 2) {
    throw ConfigError("single-scale modes need at least two levels in the data");
  }
  Rng init_rng(derive_seed(config.seed, "init"));
  MarbleParams params = init_marble(dims, init_rng);

  TrainResult result;
  result.initial = params;
  result.best = params;
  result.best_metric = -std::numeric_limits<double>::infinity();

  MarbleParams grads = zeros_like(params);
  std::vector<Tensor*> param_list = tensor_list(params);
  std::vector<Tensor*> grad_list = tensor_list(grads);
  std::vector<const Tensor*> grad_view(grad_list.begin(), grad_list.end());
  OptimizerState opt;

  const std::uint64_t order_seed = derive_seed(config.seed, "order");
  const std::uint64_t drop_seed = derive_seed(config.seed, "drop");
  const std::uint64_t shuffle_seed = derive_seed(config.seed, "shuffle");

  std::size_t stagnant = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_warmup_lr(epoch, config);
    Rng order_rng(derive_seed(order_seed, "epoch" + std::to_string(epoch)));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    auto prepare = [&](std::size_t step, const Slide& s) {
      const std::string tag = "e" + std::to_string(epoch) + "s" + std::to_string(step);
      TokenBag bag = config.drop_alpha > 0.0
                         ? coarse_branch_drop(s.bag, config.drop_alpha, derive_seed(drop_seed, tag))
                         : s.bag;
      if (config.shuffle_each_epoch) bag = shuffle_within_levels(bag, derive_seed(shuffle_seed, tag));
      return project_levels(bag, config.level_mode);
    };
    auto step_optimizer = [&]() {
      clip_global_norm(grad_list, config.clip_norm);
      adamw_step(param_list, grad_view, opt, lr, config);
      for (Tensor* g : grad_list) g->fill(0.0);
    };

    double loss_total = 0.0;
    std::size_t loss_count = 0;
    if (config.head == HeadKind::Classification) {
      for (std::size_t step = 0; step < order.size(); ++step) {
        const Slide& s = *train_set[order[step]];
        const TokenBag bag = prepare(step, s);
        Tape tape(true);
        try {
          const MarbleVars vars = bind(tape, params, &grads);
          const SlideVars out = encode_slide(tape, bag, vars);
          Var loss = cross_entropy(out.head, static_cast<std::size_t>(s.meta.label));
          loss_total += checked(loss.value().item(), epoch, s.meta.id);
          tape.backward(loss);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) +
                             ", slide " + s.meta.id + ")");
        }
        ++loss_count;
        step_optimizer();
      }
    } else {
      for (std::size_t start = 0; start < order.size(); start += config.cox_group) {
        const std::size_t stop = std::min(order.size(), start + config.cox_group);
        Tape tape(true);
        std::string ids;
        try {
          MarbleVars vars = bind(tape, params, &grads);
          std::vector<Var> risks;
          std::vector<SurvivalRecord> records;
          for (std::size_t step = start; step < stop; ++step) {
            const Slide& s = *train_set[order[step]];
            ids += (ids.empty() ? "" : "/") + s.meta.id;
            risks.push_back(encode_slide(tape, prepare(step, s), vars).head);
            records.push_back(s.meta.survival);
          }
          std::vector<Var> theta;
          vars.visit([&](const std::string&, Var& v) { theta.push_back(v); });
          const CoxLoss cox = cox_loss(stack_scalars(risks), records, config.cox_lambda, squared_norm(theta));
          loss_total += checked(cox.loss.value().item(), epoch, ids);
          tape.backward(cox.loss);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) +
                             ", slides " + ids + ")");
        }
        ++loss_count;
        step_optimizer();
      }
    }

    EpochReport rep;
    rep.epoch = epoch + 1;
    rep.lr = lr;
    rep.train_loss = loss_total / static_cast<double>(std::max<std::size_t>(loss_count, 1));
    rep.val_metric = metric ? metric(epoch)
                            : evaluate(params, val_set, config.level_mode).selection_metric();
    if (rep.val_metric > result.best_metric) {
      result.best_metric = rep.val_metric;
      result.best = params;
      result.best_epoch = epoch + 1;
      stagnant = 0;
    } else {
      ++stagnant;
    }
    rep.best_so_far = result.best_metric;
    rep.stopped = stagnant >= config.early_stop_patience;
    result.epochs.push_back(rep);
    if (on_epoch) on_epoch(rep);
    if (rep.stopped) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace

TrainResult train(const Dataset& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  return run_training(data, config, MetricOverride{}, on_epoch);
}

TrainResult train_with_metric(const Dataset& data, const TrainConfig& config,
                              const MetricOverride& metric) {
  return run_training(data, config, metric, EpochCallback{});
}

std::uint64_t repeat_seed(std::uint64_t seed, std::size_t repeat) {
  return repeat == 0 ? seed : derive_seed(seed, "repeat" + std::to_string(repeat));
}

RepeatSummary summarize(const std::vector<double>& values) {
  RepeatSummary s;
  s.test_metrics = values;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace marble
