#pragma once

// Dense linear assignment by shortest augmenting paths with dual potentials
// (the Jonker-Volgenant augmentation scheme without the auction-style
// initialization). O(n^3). Ties on reduced cost go to the lowest column
// index, so the returned permutation is deterministic.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "mvlab/core.hpp"

namespace mvlab {

struct AssignmentResult {
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;
};

// `cost` is n x n, row-major.
inline AssignmentResult solve_assignment(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw DimensionError("assignment cost matrix must be square");
  AssignmentResult r;
  if (n == 0) return r;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based rows/cols; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = cost.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double reduced = row[j - 1] - u[i0] - v[j];
        if (reduced < minv[j]) {
          minv[j] = reduced;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      if (j1 == 0) throw Error("assignment solver: non-finite costs");
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  r.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) r.row_to_col[match[j] - 1] = j - 1;
  CompensatedSum total;
  for (std::size_t i = 0; i < n; ++i) total.add(cost[i * n + r.row_to_col[i]]);
  r.cost = total.value();
  return r;
}

}  // namespace mvlab
