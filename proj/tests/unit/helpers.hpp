#pragma once

#include <cstddef>
#include <vector>

#include "marble/pyramid.hpp"
#include "marble/rng.hpp"
#include "marble/tensor.hpp"

namespace marble::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Random aligned pyramid: level 0 is rows0 x cols0 with a random mask, every
// finer level multiplies the grid by `ratio` and drops cells at rate `bg`.
inline TokenBag random_bag(Rng& rng, std::size_t levels, std::size_t rows0, std::size_t cols0,
                           std::uint32_t ratio, std::size_t dim, double bg = 0.2) {
  std::vector<LevelGrid> grids;
  std::size_t rows = rows0, cols = cols0;
  for (std::size_t k = 0; k < levels; ++k) {
    if (k > 0) {
      rows *= ratio;
      cols *= ratio;
    }
    LevelGrid g = LevelGrid::full(k, rows, cols, k == 0 ? 0 : ratio);
    for (std::size_t i = 0; i < g.tissue.size(); ++i) g.tissue[i] = rng.uniform() >= bg;
    if (k == 0) g.tissue[rng.below(g.tissue.size())] = true;
    grids.push_back(std::move(g));
  }
  std::vector<Tensor> emb;
  for (const auto& g : grids) {
    const std::size_t n = g.tissue_count();
    emb.push_back(n ? random_tensor(Shape{n, dim}, rng) : Tensor());
  }
  return build_bag(grids, emb);
}

}  // namespace marble::testing
