#include "marble/harness.hpp"

#include <sstream>

#include "marble/error.hpp"

namespace marble {

void check_alpha_grid(const std::vector<double>& grid) {
  if (grid.empty()) throw ArgumentError("alpha grid is empty");
  for (double a : grid) {
    if (!(a >= 0.0 && a < 1.0)) {
      throw ArgumentError("alpha grid value " + std::to_string(a) + " outside [0, 1)");
    }
  }
}

std::vector<SweepRow> sweep_alpha(const Dataset& data, const TrainConfig& config,
                                  const std::vector<double>& grid, std::size_t repeats) {
  check_alpha_grid(grid);
  if (repeats == 0) throw ArgumentError("repeats must be positive");
  std::vector<SweepRow> rows;
  for (double a : grid) {
    std::vector<double> val, test;
    for (std::size_t r = 0; r < repeats; ++r) {
      TrainConfig c = config;
      c.drop_alpha = a;
      c.seed = repeat_seed(config.seed, r);
      const TrainResult res = train(data, c);
      val.push_back(res.best_metric);
      test.push_back(evaluate(res.best, data, Split::Test, c.level_mode).selection_metric());
    }
    rows.push_back(SweepRow{a, summarize(val), summarize(test)});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << "alpha,val_mean,val_sd,test_mean,test_sd\n";
  for (const auto& r : rows) {
    os << r.alpha << ',' << r.val.mean << ',' << r.val.sd << ',' << r.test.mean << ',' << r.test.sd << '\n';
  }
  return os.str();
}

std::vector<AblationRow> ablate_scales(const Dataset& data, const TrainConfig& config,
                                       std::size_t repeats) {
  if (data.slides.empty()) throw ConfigError("dataset is empty");
  if (data.slides.front().bag.num_levels() < 2) {
    throw ConfigError("ablate-scales needs bags with at least two levels");
  }
  if (repeats == 0) throw ArgumentError("repeats must be positive");
  std::vector<AblationRow> rows;
  for (LevelMode mode : {LevelMode::Coarse, LevelMode::Fine, LevelMode::All}) {
    std::vector<double> test;
    for (std::size_t r = 0; r < repeats; ++r) {
      TrainConfig c = config;
      c.level_mode = mode;
      c.seed = repeat_seed(config.seed, r);
      const TrainResult res = train(data, c);
      test.push_back(evaluate(res.best, data, Split::Test, mode).selection_metric());
    }
    rows.push_back(AblationRow{mode, summarize(test)});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << "setting,test_mean,test_sd,runs\n";
  for (const auto& r : rows) {
    const char* name = r.mode == LevelMode::All ? "combined"
                       : r.mode == LevelMode::Coarse ? "coarse_only"
                                                     : "fine_only";
    os << name << ',' << r.test.mean << ',' << r.test.sd << ',' << r.test.test_metrics.size() << '\n';
  }
  return os.str();
}

}  // namespace marble
