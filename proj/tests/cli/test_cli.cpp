// Drives the marble executable end to end through the shell.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "marble_cli_test";

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args) {
  const fs::path log = kWork / "last.log";
  const std::string cmd = std::string(MARBLE_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Relative path -> contents for every file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

const char* kSpec =
    "n_slides = 20\n"
    "n_val = 6\n"
    "n_test = 6\n"
    "dim = 8\n"
    "coarse_rows = 3\n"
    "coarse_cols = 3\n"
    "data_seed = 1\n";

const char* kTrain =
    "inner = 8\n"
    "state = 4\n"
    "epochs = 3\n"
    "warmup_epochs = 1\n"
    "base_lr = 1e-3\n";

struct Fixture {
  Fixture() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    write(kWork / "spec.txt", kSpec);
    write(kWork / "train.cfg", kTrain);
  }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "gen-data is deterministic and refuses to overwrite") {
  const std::string spec = (kWork / "spec.txt").string();
  REQUIRE(run("gen-data --spec " + spec + " --out " + (kWork / "a").string()).code == 0);
  REQUIRE(run("gen-data --spec " + spec + " --out " + (kWork / "b").string()).code == 0);
  const auto a = tree(kWork / "a"), b = tree(kWork / "b");
  CHECK(a.size() == 22);  // 20 bags, manifest, spec echo
  CHECK(a == b);
  CHECK_FALSE(fs::exists(kWork / "a" / ".partial"));

  const Result again = run("gen-data --spec " + spec + " --out " + (kWork / "a").string());
  CHECK(again.code == 2);
  CHECK(again.output.find("not empty") != std::string::npos);
  CHECK(run("gen-data --force --spec " + spec + " --out " + (kWork / "a").string()).code == 0);

  const Result missing = run("gen-data --spec " + (kWork / "nope.txt").string() + " --out " + (kWork / "c").string());
  CHECK(missing.code == 2);
  CHECK(missing.output.find("nope.txt") != std::string::npos);

  const Result warn = run("gen-data --spec " + spec + " --set head=survival --set censoring=0.99 --set n_slides=10 "
                          "--set n_val=1 --set n_test=1 --out " +
                          (kWork / "d").string());
  CHECK(warn.code == 0);
  CHECK(warn.output.find("near-degenerate") != std::string::npos);
}

TEST_CASE_FIXTURE(Fixture, "train writes a complete run directory") {
  REQUIRE(run("gen-data --spec " + (kWork / "spec.txt").string() + " --out " + (kWork / "data").string()).code == 0);
  const std::string base = "train --config " + (kWork / "train.cfg").string() + " --data " + (kWork / "data").string();
  const Result ok = run(base + " --out " + (kWork / "run").string());
  REQUIRE(ok.code == 0);
  for (const char* f : {"config.txt", "epochs.csv", "checkpoint.bin", "checkpoint.bin.manifest",
                        "test_predictions.csv", "test_metrics.txt"}) {
    CHECK(fs::exists(kWork / "run" / f));
  }
  CHECK_FALSE(fs::exists(kWork / "run" / ".partial"));
  CHECK(slurp(kWork / "run" / "config.txt").find("epochs = 3\n") != std::string::npos);

  // Zero learning rate: every epoch reports the same validation metric.
  REQUIRE(run(base + " --set base_lr=0 --set weight_decay=0 --out " + (kWork / "flat").string()).code == 0);
  std::istringstream epochs(slurp(kWork / "flat" / "epochs.csv"));
  std::string line, first_metric;
  std::getline(epochs, line);
  while (std::getline(epochs, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    REQUIRE(f.size() == 6);
    if (first_metric.empty()) first_metric = f[3];
    CHECK(f[3] == first_metric);
  }

  const Result bad_alpha = run(base + " --set drop_alpha=1.0 --out " + (kWork / "bad").string());
  CHECK(bad_alpha.code == 2);
  CHECK_FALSE(fs::exists(kWork / "bad" / "epochs.csv"));

  const Result eval = run("evaluate --checkpoint " + (kWork / "run" / "checkpoint.bin").string() + " --data " +
                          (kWork / "data").string() + " --split test");
  CHECK(eval.code == 0);
  CHECK(eval.output.find("auc=") != std::string::npos);
  write(kWork / "junk.bin", "not a checkpoint");
  CHECK(run("evaluate --checkpoint " + (kWork / "junk.bin").string() + " --data " + (kWork / "data").string()).code == 3);
}

TEST_CASE_FIXTURE(Fixture, "sweep and ablation argument checks") {
  REQUIRE(run("gen-data --spec " + (kWork / "spec.txt").string() + " --out " + (kWork / "data").string()).code == 0);
  const std::string tail = " --config " + (kWork / "train.cfg").string() + " --data " + (kWork / "data").string();
  CHECK(run("sweep-alpha --grid 0.1,1.5" + tail + " --out " + (kWork / "sw").string()).code == 2);
  const Result sw = run("sweep-alpha --grid 0.0" + tail + " --out " + (kWork / "sw0").string());
  CHECK(sw.code == 0);
  CHECK(sw.output.find("alpha,val_mean,val_sd,test_mean,test_sd") != std::string::npos);

  REQUIRE(run("gen-data --spec " + (kWork / "spec.txt").string() + " --set levels=1 --out " +
              (kWork / "flat_data").string())
              .code == 0);
  const Result ab = run("ablate-scales --config " + (kWork / "train.cfg").string() + " --data " +
                        (kWork / "flat_data").string() + " --out " + (kWork / "ab").string());
  CHECK(ab.code == 2);
  CHECK(ab.output.find("two levels") != std::string::npos);

  CHECK(run("bench --encoder scan --sizes 64,32").code == 2);
  CHECK(run("no-such-command").code == 2);
}
