#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "marble/tensor.hpp"

namespace marble {

struct GridCoord {
  std::int32_t row = 0;
  std::int32_t col = 0;
  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

// Coarse cell containing `c` when each coarse cell spans ratio x ratio fine
// cells: floor division of both coordinates.
GridCoord parent_index(GridCoord c, std::uint32_t ratio);

// Tile grid of one magnification level. Level 0 is the coarsest.
struct LevelGrid {
  std::size_t level = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint32_t ratio_to_parent = 0;  // unused for level 0
  std::vector<bool> tissue;           // row-major, rows * cols entries

  static LevelGrid full(std::size_t level, std::size_t rows, std::size_t cols,
                        std::uint32_t ratio);
  bool is_tissue(std::size_t r, std::size_t c) const { return tissue[r * cols + c]; }
  std::size_t tissue_count() const;
};

// Tokens of one level. `embeddings` is a default (empty) Tensor when the
// level holds no tokens.
struct BagLevel {
  Tensor embeddings;                 // T_k x D
  std::vector<GridCoord> coords;     // T_k
  std::vector<std::size_t> parents;  // T_k indices into level k-1; empty for k = 0
  std::uint32_t ratio = 0;           // m_k; 0 for k = 0

  std::size_t size() const { return coords.size(); }
  friend bool operator==(const BagLevel&, const BagLevel&) = default;
};

// Multi-level slide representation.
struct TokenBag {
  std::size_t dim = 0;
  std::vector<BagLevel> levels;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t finest() const { return levels.size() - 1; }
  bool empty() const;

  // Throws CountError / AlignmentError / IndexError on any broken invariant:
  // counts, embedding widths, parent range, and parent == coord div ratio.
  void validate() const;

  friend bool operator==(const TokenBag&, const TokenBag&) = default;
};

// Builds a bag from aligned grids and per-level embeddings (one row per
// tissue cell in row-major order). Fine cells whose parent is background or
// was itself skipped are dropped together with their embedding rows.
TokenBag build_bag(const std::vector<LevelGrid>& grids, const std::vector<Tensor>& embeddings);

// Removes ceil(alpha * T_0) level-0 tokens (at least one is always kept),
// sampled without replacement, and prunes all of their descendants.
TokenBag coarse_branch_drop(const TokenBag& bag, double alpha, std::uint64_t seed);

// Number of level-0 tokens coarse_branch_drop removes for a given T_0.
std::size_t drop_count(std::size_t t0, double alpha);

// Independently permutes every level and re-points parent indices.
TokenBag shuffle_within_levels(const TokenBag& bag, std::uint64_t seed);

// One level of `bag` as a standalone single-level bag (no parents).
TokenBag single_level(const TokenBag& bag, std::size_t level);

}  // namespace marble
