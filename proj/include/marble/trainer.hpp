#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marble/bagdata.hpp"
#include "marble/model.hpp"

namespace marble {

// Which levels of each bag the model sees. Coarse/Fine train a single-level
// model on level 0 / the finest level with no fusion.
enum class LevelMode { All, Coarse, Fine };

std::string_view level_mode_name(LevelMode m);
LevelMode parse_level_mode(std::string_view s);

struct TrainConfig {
  double base_lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  std::size_t early_stop_patience = 10;
  std::size_t batch_size = 1;
  double drop_alpha = 0.1;
  bool shuffle_each_epoch = true;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::Classification;
  double cox_lambda = 1e-4;
  std::size_t cox_group = 16;  // slides per Cox partial-likelihood step
  ModelDims dims;              // dims.levels / dims.head are derived at train time
  LevelMode level_mode = LevelMode::All;

  void validate() const;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

// One decoupled-weight-decay Adam update:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                OptimizerState& state, double lr, const TrainConfig& config);

// Linear warm-up to base_lr over warmup_epochs, then half-cosine decay.
double cosine_warmup_lr(std::size_t epoch, const TrainConfig& config);

// Scales gradients in place so that their global L2 norm is at most
// max_norm. Returns the norm before clipping.
double clip_global_norm(std::span<Tensor* const> grads, double max_norm);

struct EpochReport {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double best_so_far = 0.0;
  bool stopped = false;
};

std::string epoch_report_csv(const std::vector<EpochReport>& reports);

struct SlidePrediction {
  std::string id;
  std::vector<double> scores;  // class probabilities, or {risk}
  int predicted = -1;          // classification only
};

struct EvalReport {
  HeadKind head = HeadKind::Classification;
  std::optional<double> accuracy;
  std::optional<double> auc;  // binary, or macro one-vs-rest for C > 2
  std::optional<double> c_index;
  std::vector<SlidePrediction> predictions;

  // AUC for classification, C-index for survival.
  double selection_metric() const;
};

// Deterministic pass: full bags in stored order, no regularizers.
EvalReport evaluate(const MarbleParams& params, const std::vector<const Slide*>& slides,
                    LevelMode mode);
EvalReport evaluate(const MarbleParams& params, const Dataset& data, Split split, LevelMode mode);

struct TrainResult {
  MarbleParams best;
  MarbleParams initial;
  std::vector<EpochReport> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  bool stopped_early = false;
};

// Applies the level mode to a bag (All: unchanged).
TokenBag project_levels(const TokenBag& bag, LevelMode mode);

// Model dims implied by the config and the dataset's first bag.
ModelDims resolve_dims(const Dataset& data, const TrainConfig& config);

// Per-epoch hook, e.g. for progress output.
using EpochCallback = std::function<void(const EpochReport&)>;

TrainResult train(const Dataset& data, const TrainConfig& config, const EpochCallback& on_epoch = {});

// The metric an evaluation of `validation` would select on, overriding the
// real validation pass. Exists so early stopping can be exercised against a
// scripted metric sequence.
using MetricOverride = std::function<double(std::size_t epoch)>;
TrainResult train_with_metric(const Dataset& data, const TrainConfig& config,
                              const MetricOverride& metric);

struct RepeatSummary {
  std::vector<double> test_metrics;
  double mean = 0.0;
  double sd = 0.0;
};

// Seed for repeat i (repeat 0 keeps the configured seed).
std::uint64_t repeat_seed(std::uint64_t seed, std::size_t repeat);

RepeatSummary summarize(const std::vector<double>& values);

}  // namespace marble
