#include "marble/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "marble/error.hpp"

namespace marble {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("config key '" + std::string(key) + "': expected " + std::string(want) +
                    ", got '" + std::string(value) + "'");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  const char* key;
  Setter set;
  Getter get;
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class M>
Field real(const char* key, M m) {
  return {key, [m](RunConfig& c, std::string_view k, std::string_view v) { m(c) = to_double(k, v); },
          [m](const RunConfig& c) { return num(m(const_cast<RunConfig&>(c))); }};
}

template <class M>
Field count(const char* key, M m) {
  return {key,
          [m](RunConfig& c, std::string_view k, std::string_view v) {
            using T = std::remove_reference_t<decltype(m(c))>;
            m(c) = static_cast<T>(to_u64(k, v));
          },
          [m](const RunConfig& c) { return std::to_string(m(const_cast<RunConfig&>(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      real("base_lr", [](RunConfig& c) -> double& { return c.train.base_lr; }),
      real("beta1", [](RunConfig& c) -> double& { return c.train.beta1; }),
      real("beta2", [](RunConfig& c) -> double& { return c.train.beta2; }),
      real("adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; }),
      real("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }),
      count("epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }),
      count("warmup_epochs", [](RunConfig& c) -> std::size_t& { return c.train.warmup_epochs; }),
      count("early_stop_patience", [](RunConfig& c) -> std::size_t& { return c.train.early_stop_patience; }),
      count("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }),
      real("drop_alpha", [](RunConfig& c) -> double& { return c.train.drop_alpha; }),
      {"shuffle_each_epoch",
       [](RunConfig& c, std::string_view k, std::string_view v) { c.train.shuffle_each_epoch = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.train.shuffle_each_epoch ? "true" : "false"); }},
      real("clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; }),
      count("seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }),
      {"head",
       [](RunConfig& c, std::string_view, std::string_view v) {
         c.train.head = parse_head(v);
         c.synth.task = c.train.head;
       },
       [](const RunConfig& c) { return std::string(head_name(c.train.head)); }},
      real("cox_lambda", [](RunConfig& c) -> double& { return c.train.cox_lambda; }),
      count("cox_group", [](RunConfig& c) -> std::size_t& { return c.train.cox_group; }),
      count("inner", [](RunConfig& c) -> std::size_t& { return c.train.dims.inner; }),
      count("state", [](RunConfig& c) -> std::size_t& { return c.train.dims.state; }),
      count("classes", [](RunConfig& c) -> std::size_t& { return c.train.dims.classes; }),
      {"level_mode",
       [](RunConfig& c, std::string_view, std::string_view v) { c.train.level_mode = parse_level_mode(v); },
       [](const RunConfig& c) { return std::string(level_mode_name(c.train.level_mode)); }},
      count("repeats", [](RunConfig& c) -> std::size_t& { return c.repeats; }),
      count("n_slides", [](RunConfig& c) -> std::size_t& { return c.synth.n_slides; }),
      count("n_val", [](RunConfig& c) -> std::size_t& { return c.synth.n_val; }),
      count("n_test", [](RunConfig& c) -> std::size_t& { return c.synth.n_test; }),
      count("levels", [](RunConfig& c) -> std::size_t& { return c.synth.levels; }),
      count("ratio", [](RunConfig& c) -> std::uint32_t& { return c.synth.ratio; }),
      count("coarse_rows", [](RunConfig& c) -> std::size_t& { return c.synth.coarse_rows; }),
      count("coarse_cols", [](RunConfig& c) -> std::size_t& { return c.synth.coarse_cols; }),
      count("dim", [](RunConfig& c) -> std::size_t& { return c.synth.dim; }),
      real("noise", [](RunConfig& c) -> double& { return c.synth.noise; }),
      real("amplitude", [](RunConfig& c) -> double& { return c.synth.amplitude; }),
      count("signal_tokens", [](RunConfig& c) -> std::size_t& { return c.synth.signal_tokens; }),
      real("background", [](RunConfig& c) -> double& { return c.synth.background; }),
      real("censoring", [](RunConfig& c) -> double& { return c.synth.censoring; }),
      real("hazard_gamma", [](RunConfig& c) -> double& { return c.synth.hazard_gamma; }),
      count("data_seed", [](RunConfig& c) -> std::uint64_t& { return c.synth.seed; }),
  };
  return table;
}

}  // namespace

void set_key(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_key(cfg, trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) apply_config_text(cfg, o, "--set");
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), path);
  }
  apply_overrides(cfg, overrides);
  return cfg;
}

std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

}  // namespace marble
