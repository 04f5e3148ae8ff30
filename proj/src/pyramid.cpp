#include "marble/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "marble/error.hpp"
#include "marble/rng.hpp"

namespace marble {

namespace {

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Copies the selected rows (in the given order) of a level's data.
BagLevel take(const BagLevel& src, const std::vector<std::size_t>& order, std::size_t dim) {
  BagLevel out;
  out.ratio = src.ratio;
  if (order.empty()) return out;
  std::vector<double> emb;
  emb.reserve(order.size() * dim);
  for (auto i : order) {
    out.coords.push_back(src.coords[i]);
    if (!src.parents.empty()) out.parents.push_back(src.parents[i]);
    auto row = src.embeddings.row(i);
    emb.insert(emb.end(), row.begin(), row.end());
  }
  out.embeddings = Tensor(Shape{order.size(), dim}, std::move(emb));
  return out;
}

}  // namespace

GridCoord parent_index(GridCoord c, std::uint32_t ratio) {
  if (ratio == 0) throw ArgumentError("parent_index: ratio must be >= 1");
  const auto m = static_cast<std::int32_t>(ratio);
  return GridCoord{floor_div(c.row, m), floor_div(c.col, m)};
}

LevelGrid LevelGrid::full(std::size_t level, std::size_t rows, std::size_t cols,
                          std::uint32_t ratio) {
  LevelGrid g;
  g.level = level;
  g.rows = rows;
  g.cols = cols;
  g.ratio_to_parent = ratio;
  g.tissue.assign(rows * cols, true);
  return g;
}

std::size_t LevelGrid::tissue_count() const {
  return static_cast<std::size_t>(std::count(tissue.begin(), tissue.end(), true));
}

bool TokenBag::empty() const {
  if (levels.empty()) return true;
  return std::any_of(levels.begin(), levels.end(), [](const BagLevel& l) { return l.size() == 0; });
}

void TokenBag::validate() const {
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const BagLevel& lv = levels[k];
    const std::string where = "level " + std::to_string(k);
    const std::size_t t = lv.coords.size();
    if (t == 0) {
      if (!lv.embeddings.empty() || !lv.parents.empty()) {
        throw CountError(where + ": data present for an empty level");
      }
      continue;
    }
    if (lv.embeddings.rank() != 2 || lv.embeddings.rows() != t) {
      throw CountError(where + ": " + std::to_string(t) + " coords but embeddings " +
                       shape_str(lv.embeddings.shape()));
    }
    if (lv.embeddings.cols() != dim) {
      throw CountError(where + ": embedding width " + std::to_string(lv.embeddings.cols()) +
                       " != D " + std::to_string(dim));
    }
    if (k == 0) {
      if (!lv.parents.empty()) throw CountError(where + ": level 0 has parents");
      continue;
    }
    if (lv.ratio == 0) throw AlignmentError(where + ": ratio must be >= 1");
    if (lv.parents.size() != t) {
      throw CountError(where + ": " + std::to_string(lv.parents.size()) + " parents for " +
                       std::to_string(t) + " tokens");
    }
    const BagLevel& up = levels[k - 1];
    for (std::size_t i = 0; i < t; ++i) {
      if (lv.parents[i] >= up.size()) {
        throw IndexError(where + ": parent index " + std::to_string(lv.parents[i]) +
                         " out of range for " + std::to_string(up.size()) + " tokens");
      }
      if (parent_index(lv.coords[i], lv.ratio) != up.coords[lv.parents[i]]) {
        throw AlignmentError(where + ": token " + std::to_string(i) +
                             " does not lie inside its parent cell");
      }
    }
  }
}

TokenBag build_bag(const std::vector<LevelGrid>& grids, const std::vector<Tensor>& embeddings) {
  if (grids.empty()) throw ArgumentError("build_bag: no grids");
  if (grids.size() != embeddings.size()) {
    throw CountError("build_bag: " + std::to_string(grids.size()) + " grids but " +
                     std::to_string(embeddings.size()) + " embedding tables");
  }
  TokenBag bag;
  for (const auto& e : embeddings) {
    if (e.empty()) continue;
    if (e.rank() != 2) throw CountError("build_bag: embeddings must be matrices");
    if (bag.dim == 0) bag.dim = e.cols();
    if (e.cols() != bag.dim) throw CountError("build_bag: embedding widths differ across levels");
  }

  // Token index of every grid cell kept in the bag, or npos.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> prev_index;
  for (std::size_t k = 0; k < grids.size(); ++k) {
    const LevelGrid& g = grids[k];
    if (g.tissue.size() != g.rows * g.cols) {
      throw AlignmentError("build_bag: level " + std::to_string(k) + " mask has " +
                           std::to_string(g.tissue.size()) + " cells for a " +
                           std::to_string(g.rows) + "x" + std::to_string(g.cols) + " grid");
    }
    if (k > 0) {
      const LevelGrid& p = grids[k - 1];
      if (g.ratio_to_parent == 0 || g.rows != p.rows * g.ratio_to_parent ||
          g.cols != p.cols * g.ratio_to_parent) {
        throw AlignmentError("build_bag: level " + std::to_string(k) + " grid " +
                             std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                             " is not aligned to parent " + std::to_string(p.rows) + "x" +
                             std::to_string(p.cols) + " with ratio " +
                             std::to_string(g.ratio_to_parent));
      }
    }
    const Tensor& emb = embeddings[k];
    const std::size_t tissue = g.tissue_count();
    const std::size_t rows = emb.empty() ? 0 : emb.rows();
    if (rows != tissue) {
      throw CountError("build_bag: level " + std::to_string(k) + " has " + std::to_string(tissue) +
                       " tissue cells but " + std::to_string(rows) + " embedding rows");
    }

    BagLevel lv;
    lv.ratio = k == 0 ? 0 : g.ratio_to_parent;
    std::vector<std::size_t> index(g.rows * g.cols, npos);
    std::vector<double> kept;
    std::size_t emb_row = 0;
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t c = 0; c < g.cols; ++c) {
        if (!g.is_tissue(r, c)) continue;
        const std::size_t this_row = emb_row++;
        const GridCoord coord{static_cast<std::int32_t>(r), static_cast<std::int32_t>(c)};
        std::size_t parent = npos;
        if (k > 0) {
          const GridCoord pc = parent_index(coord, g.ratio_to_parent);
          parent = prev_index[static_cast<std::size_t>(pc.row) * grids[k - 1].cols +
                              static_cast<std::size_t>(pc.col)];
          if (parent == npos) continue;  // parent is background or skipped
          lv.parents.push_back(parent);
        }
        index[r * g.cols + c] = lv.coords.size();
        lv.coords.push_back(coord);
        auto src = emb.row(this_row);
        kept.insert(kept.end(), src.begin(), src.end());
      }
    }
    if (!lv.coords.empty()) lv.embeddings = Tensor(Shape{lv.coords.size(), bag.dim}, std::move(kept));
    bag.levels.push_back(std::move(lv));
    prev_index = std::move(index);
  }
  return bag;
}

std::size_t drop_count(std::size_t t0, double alpha) {
  if (!(alpha >= 0.0) || alpha >= 1.0) {
    throw ArgumentError("coarse_branch_drop: alpha must lie in [0, 1), got " + std::to_string(alpha));
  }
  if (t0 == 0) return 0;
  // The small slack keeps products such as 0.07 * 100 from rounding up.
  const double raw = std::ceil(alpha * static_cast<double>(t0) - 1e-9);
  const auto n = static_cast<std::size_t>(std::max(0.0, raw));
  return std::min(n, t0 - 1);
}

TokenBag coarse_branch_drop(const TokenBag& bag, double alpha, std::uint64_t seed) {
  const std::size_t t0 = bag.levels.empty() ? 0 : bag.levels[0].size();
  const std::size_t n_drop = drop_count(t0, alpha);
  if (t0 == 0) throw ArgumentError("coarse_branch_drop: level 0 is empty");
  if (n_drop == 0) return bag;

  Rng rng(seed);
  std::vector<std::size_t> idx(t0);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n_drop; ++i) {
    const std::size_t j = i + rng.below(t0 - i);
    std::swap(idx[i], idx[j]);
  }
  std::vector<bool> keep(t0, true);
  for (std::size_t i = 0; i < n_drop; ++i) keep[idx[i]] = false;

  TokenBag out;
  out.dim = bag.dim;
  for (std::size_t k = 0; k < bag.levels.size(); ++k) {
    const BagLevel& src = bag.levels[k];
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (k == 0 ? keep[i] : keep[src.parents[i]]) order.push_back(i);
    }
    BagLevel lv = take(src, order, bag.dim);
    if (k > 0) {
      // Compacted position of every retained token of level k-1.
      std::vector<std::size_t> remap(bag.levels[k - 1].size(), 0);
      std::size_t next = 0;
      for (std::size_t i = 0; i < remap.size(); ++i) {
        if (keep[i]) remap[i] = next++;
      }
      for (auto& p : lv.parents) p = remap[p];
    }
    std::vector<bool> next_keep(src.size(), false);
    for (auto i : order) next_keep[i] = true;
    keep = std::move(next_keep);
    out.levels.push_back(std::move(lv));
  }
  return out;
}

TokenBag shuffle_within_levels(const TokenBag& bag, std::uint64_t seed) {
  Rng rng(seed);
  TokenBag out;
  out.dim = bag.dim;
  std::vector<std::size_t> prev_inverse;
  for (std::size_t k = 0; k < bag.levels.size(); ++k) {
    const BagLevel& src = bag.levels[k];
    std::vector<std::size_t> perm(src.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::swap(perm[i - 1], perm[rng.below(i)]);
    }
    BagLevel lv = take(src, perm, bag.dim);
    for (auto& p : lv.parents) p = prev_inverse[p];
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t j = 0; j < perm.size(); ++j) inverse[perm[j]] = j;
    prev_inverse = std::move(inverse);
    out.levels.push_back(std::move(lv));
  }
  return out;
}

TokenBag single_level(const TokenBag& bag, std::size_t level) {
  if (level >= bag.levels.size()) {
    throw ArgumentError("single_level: bag has " + std::to_string(bag.levels.size()) +
                        " levels, asked for " + std::to_string(level));
  }
  TokenBag out;
  out.dim = bag.dim;
  BagLevel lv = bag.levels[level];
  lv.parents.clear();
  lv.ratio = 0;
  out.levels.push_back(std::move(lv));
  return out;
}

}  // namespace marble
