#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace marble {

// Sub-seed for a labeled purpose ("split", "drop", "init", ...). FNV-1a over
// the label folded into a splitmix64 finalizer.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(engine_);
  }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace marble
