// marble: data generation, training, evaluation, sweeps and benchmarks.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "marble/config.hpp"
#include "marble/error.hpp"
#include "marble/harness.hpp"
#include "marble/ssm.hpp"

namespace fs = std::filesystem;
using namespace marble;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

// Creates `dir` and drops a ".partial" marker that finish() removes, so an
// interrupted run is recognizable.
class RunDir {
 public:
  explicit RunDir(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw ConfigError("cannot create output directory '" + dir_.string() + "'");
    write_text(dir_ / ".partial", "incomplete\n");
  }
  const fs::path& path() const { return dir_; }
  void finish() { fs::remove(dir_ / ".partial"); }

 private:
  fs::path dir_;
};

std::string manifest_path(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.csv";
  if (!fs::is_regular_file(p)) throw ConfigError("manifest not found: '" + p.string() + "'");
  return p.string();
}

Dataset load_for(const RunConfig& cfg, const std::string& data) {
  const std::size_t classes = cfg.train.head == HeadKind::Classification ? cfg.train.dims.classes : 1;
  return load_dataset(manifest_path(data), cfg.train.head, classes, cfg.train.seed);
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ArgumentError(std::string("bad ") + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw ArgumentError(std::string("empty ") + what);
  return out;
}

std::string metric_line(const EvalReport& ev) {
  std::ostringstream os;
  os.precision(6);
  if (ev.accuracy) os << "accuracy=" << *ev.accuracy << ' ';
  if (ev.auc) os << "auc=" << *ev.auc;
  if (ev.c_index) os << "c_index=" << *ev.c_index;
  return os.str();
}

std::string predictions_csv(const EvalReport& ev) {
  std::ostringstream os;
  os.precision(17);
  os << (ev.head == HeadKind::Classification ? "id,predicted,probabilities\n" : "id,risk\n");
  for (const auto& p : ev.predictions) {
    os << p.id << ',';
    if (ev.head == HeadKind::Survival) {
      os << p.scores.front() << '\n';
      continue;
    }
    os << p.predicted << ',';
    for (std::size_t i = 0; i < p.scores.size(); ++i) os << (i ? ";" : "") << p.scores[i];
    os << '\n';
  }
  return os.str();
}

int cmd_gen_data(const std::string& spec_path, const std::string& out, bool force,
                 const std::vector<std::string>& sets) {
  if (!fs::is_regular_file(spec_path)) throw ConfigError("spec file not found: '" + spec_path + "'");
  RunConfig cfg = load_run_config(spec_path, sets);
  cfg.synth.validate();
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw ConfigError("output directory '" + out + "' exists and is not empty (use --force)");
  }
  if (force && fs::exists(out)) fs::remove_all(out);
  RunDir dir(out);
  const Dataset data = generate_dataset(cfg.synth);
  write_dataset(data, out);
  write_text(dir.path() / "spec.txt", config_text(cfg));
  if (data.task == HeadKind::Survival) {
    std::size_t events = 0;
    for (const auto& s : data.slides) events += s.meta.survival.event ? 1 : 0;
    if (events < 5) {
      std::cerr << "warning: near-degenerate event count (" << events << " events in "
                << data.slides.size() << " slides)\n";
    }
  }
  dir.finish();
  std::cout << "wrote " << data.slides.size() << " slides to " << out << "\n";
  return 0;
}

void train_once(const Dataset& data, const TrainConfig& tc, const RunConfig& cfg, const fs::path& out,
                std::vector<double>& test_metrics) {
  RunDir dir(out);
  write_text(dir.path() / "config.txt", config_text(cfg));
  const TrainResult res = train(data, tc, [](const EpochReport& e) {
    std::printf("epoch %3zu  lr %.3e  loss %.5f  val %.4f  best %.4f%s\n", e.epoch, e.lr, e.train_loss,
                e.val_metric, e.best_so_far, e.stopped ? "  (early stop)" : "");
    std::fflush(stdout);
  });
  write_text(dir.path() / "epochs.csv", epoch_report_csv(res.epochs));
  save_checkpoint(res.best, (dir.path() / "checkpoint.bin").string(), tc.seed);
  const EvalReport ev = evaluate(res.best, data, Split::Test, tc.level_mode);
  write_text(dir.path() / "test_predictions.csv", predictions_csv(ev));
  write_text(dir.path() / "test_metrics.txt", metric_line(ev) + "\n");
  std::cout << "best epoch " << res.best_epoch << "  val " << res.best_metric << "  test " << metric_line(ev) << "\n";
  test_metrics.push_back(ev.selection_metric());
  dir.finish();
}

int cmd_train(const std::string& config, const std::string& data_path, const std::string& out,
              const std::vector<std::string>& sets, std::size_t repeats_flag) {
  RunConfig cfg = load_run_config(config, sets);
  if (repeats_flag) cfg.repeats = repeats_flag;
  cfg.train.validate();
  if (cfg.repeats == 0) throw ConfigError("repeats must be positive");
  const Dataset data = load_for(cfg, data_path);
  std::vector<double> metrics;
  if (cfg.repeats == 1) {
    train_once(data, cfg.train, cfg, out, metrics);
  } else {
    RunDir top(out);
    write_text(top.path() / "config.txt", config_text(cfg));
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      TrainConfig tc = cfg.train;
      tc.seed = repeat_seed(cfg.train.seed, r);
      std::cout << "== repeat " << r << " (seed " << tc.seed << ")\n";
      train_once(data, tc, cfg, top.path() / ("repeat_" + std::to_string(r)), metrics);
    }
    const RepeatSummary s = summarize(metrics);
    std::ostringstream os;
    os << "repeat,test_metric\n";
    for (std::size_t r = 0; r < metrics.size(); ++r) os << r << ',' << metrics[r] << '\n';
    write_text(top.path() / "repeats.csv", os.str());
    std::cout << "test metric mean " << s.mean << " sd " << s.sd << " over " << metrics.size() << " runs\n";
    top.finish();
  }
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_path, const std::string& split,
                 const std::string& mode, const std::string& out) {
  if (!fs::is_regular_file(checkpoint)) throw ConfigError("checkpoint not found: '" + checkpoint + "'");
  const MarbleParams params = load_checkpoint(checkpoint);
  RunConfig cfg;
  cfg.train.head = params.head;
  cfg.train.dims.classes = dims_of(params).classes;
  const Dataset data = load_for(cfg, data_path);
  const EvalReport ev = evaluate(params, data, parse_split(split), parse_level_mode(mode));
  std::cout << split << ": " << metric_line(ev) << "\n";
  if (!out.empty()) write_text(out, predictions_csv(ev));
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& data_path, const std::string& out,
              const std::string& grid_text, const std::vector<std::string>& sets) {
  const std::vector<double> grid = parse_list(grid_text, "alpha grid");
  check_alpha_grid(grid);
  RunConfig cfg = load_run_config(config, sets);
  cfg.train.drop_alpha = 0.0;
  cfg.train.validate();
  const Dataset data = load_for(cfg, data_path);
  RunDir dir(out);
  write_text(dir.path() / "config.txt", config_text(cfg));
  const auto rows = sweep_alpha(data, cfg.train, grid, cfg.repeats);
  const std::string table = sweep_csv(rows);
  write_text(dir.path() / "sweep.csv", table);
  std::cout << table;
  dir.finish();
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data_path, const std::string& out,
               const std::vector<std::string>& sets) {
  RunConfig cfg = load_run_config(config, sets);
  cfg.train.validate();
  const Dataset data = load_for(cfg, data_path);
  if (!data.slides.empty() && data.slides.front().bag.num_levels() < 2) {
    throw ConfigError("ablate-scales needs bags with at least two levels");
  }
  RunDir dir(out);
  write_text(dir.path() / "config.txt", config_text(cfg));
  const auto rows = ablate_scales(data, cfg.train, cfg.repeats);
  const std::string table = ablation_csv(rows);
  write_text(dir.path() / "ablation.csv", table);
  std::cout << table;
  dir.finish();
  return 0;
}

int cmd_bench(const std::string& encoder, const std::string& sizes_text, std::size_t dim, std::size_t state,
              std::size_t reps, std::uint64_t seed) {
  std::vector<std::size_t> sizes;
  for (double v : parse_list(sizes_text, "size list")) {
    if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw ArgumentError("sizes must be positive integers");
    }
    sizes.push_back(static_cast<std::size_t>(v));
  }
  std::vector<EncoderKind> kinds;
  if (encoder == "scan" || encoder == "both") kinds.push_back(EncoderKind::Scan);
  if (encoder == "attention" || encoder == "both") kinds.push_back(EncoderKind::Attention);
  if (kinds.empty()) throw ArgumentError("unknown encoder '" + encoder + "'");
  bool header = true;
  for (EncoderKind k : kinds) {
    std::cout << bench_csv(k, scaling_bench(k, dim, state, sizes, reps, seed), header) << std::flush;
    header = false;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale state-space MIL: data, training and benchmarks"};
  app.require_subcommand(1);

  std::string spec, out, config, data, grid = "0.05,0.1,0.2", split = "test", mode = "all", preds;
  std::string encoder = "scan", sizes = "2048,4096,8192,16384";
  std::vector<std::string> sets;
  bool force = false;
  std::size_t repeats = 0, dim = 32, state = 16, reps = 3;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic cohort");
  gen->add_option("--spec", spec, "key=value synthesis spec")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_flag("--force", force, "replace a non-empty output directory");
  gen->add_option("--set", sets, "key=value override");

  auto* tr = app.add_subcommand("train", "Train and evaluate on the test split");
  tr->add_option("--config", config, "key=value config file");
  tr->add_option("--data", data, "manifest file or dataset directory")->required();
  tr->add_option("--out", out, "run directory")->required();
  tr->add_option("--set", sets, "key=value override");
  tr->add_option("--repeats", repeats, "independent seeded runs");

  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", config, "checkpoint file")->required();
  ev->add_option("--data", data, "manifest file or dataset directory")->required();
  ev->add_option("--split", split, "train|val|test");
  ev->add_option("--level-mode", mode, "all|coarse|fine");
  ev->add_option("--predictions", preds, "write per-slide predictions here");

  auto* sw = app.add_subcommand("sweep-alpha", "Grid over the coarse-branch drop fraction");
  sw->add_option("--config", config, "key=value config file");
  sw->add_option("--data", data, "manifest file or dataset directory")->required();
  sw->add_option("--out", out, "run directory")->required();
  sw->add_option("--grid", grid, "comma-separated alpha values in [0, 1)");
  sw->add_option("--set", sets, "key=value override");

  auto* ab = app.add_subcommand("ablate-scales", "Coarse-only vs fine-only vs combined");
  ab->add_option("--config", config, "key=value config file");
  ab->add_option("--data", data, "manifest file or dataset directory")->required();
  ab->add_option("--out", out, "run directory")->required();
  ab->add_option("--set", sets, "key=value override");

  auto* be = app.add_subcommand("bench", "Encoder time vs token count");
  be->add_option("--encoder", encoder, "scan|attention|both");
  be->add_option("--sizes", sizes, "comma-separated token counts, increasing");
  be->add_option("--dim", dim, "model width");
  be->add_option("--state", state, "state size");
  be->add_option("--reps", reps, "repetitions per size (median)");
  be->add_option("--seed", seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec, out, force, sets);
    if (*tr) return cmd_train(config, data, out, sets, repeats);
    if (*ev) return cmd_evaluate(config, data, split, mode, preds);
    if (*sw) return cmd_sweep(config, data, out, grid, sets);
    if (*ab) return cmd_ablate(config, data, out, sets);
    if (*be) return cmd_bench(encoder, sizes, dim, state, reps, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
  return 0;
}
