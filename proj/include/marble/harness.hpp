#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "marble/trainer.hpp"

namespace marble {

// Multi-run experiments built on train(): the drop-fraction sweep and the
// single-scale vs combined ablation. Repeat r trains with repeat_seed(seed, r).

struct SweepRow {
  double alpha = 0.0;
  RepeatSummary val;   // best validation metric per repeat
  RepeatSummary test;  // test metric of the selected checkpoint per repeat
};

// Throws ArgumentError if any grid value lies outside [0, 1).
void check_alpha_grid(const std::vector<double>& grid);
std::vector<SweepRow> sweep_alpha(const Dataset& data, const TrainConfig& config,
                                  const std::vector<double>& grid, std::size_t repeats);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct AblationRow {
  LevelMode mode = LevelMode::All;
  RepeatSummary test;
};

// Coarse-only, fine-only and combined, in that order. Refuses bags with a
// single level.
std::vector<AblationRow> ablate_scales(const Dataset& data, const TrainConfig& config,
                                       std::size_t repeats);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace marble
