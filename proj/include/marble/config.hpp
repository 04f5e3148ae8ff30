#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "marble/bagdata.hpp"
#include "marble/trainer.hpp"

namespace marble {

// Everything a command may need: training, synthesis and run plumbing.
// Text form is one "key = value" per line with '#' comments.
struct RunConfig {
  TrainConfig train;
  SynthSpec synth;
  std::size_t repeats = 1;
};

// Sets one key; ConfigError for unknown keys or unparsable values.
void set_key(RunConfig& cfg, std::string_view key, std::string_view value);

// Applies every line of `text`; `origin` names the source in errors.
void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin);

// Reads `path` (ConfigError naming the path if unreadable), then applies
// "key=value" overrides in order.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

// Fully resolved config, parseable by apply_config_text.
std::string config_text(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace marble
