#pragma once

#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "kplora/error.hpp"

namespace kplora {

struct Assignment {
  // (row, column) pairs sorted by row.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> unmatched_rows;
  std::vector<std::size_t> unmatched_cols;
  double total_cost = 0.0;
};

namespace hungarian_detail {

// Shortest augmenting path Kuhn-Munkres with potentials, O(n^2 m) for an
// n x m matrix with n <= m. Rows are inserted in index order and the first
// column of minimal reduced cost wins, so ties resolve towards low indices.
// Returns the column assigned to each row.
inline std::vector<std::size_t> solve_wide(const std::vector<std::vector<double>>& cost,
                                           std::size_t n, std::size_t m) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace hungarian_detail

// Minimum-cost one-to-one assignment on a rectangular cost matrix. Every
// row of `cost` must have the same length and hold finite values.
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  Assignment out;
  const std::size_t rows = cost.size();
  const std::size_t cols = rows ? cost[0].size() : 0;
  for (const auto& r : cost) require(r.size() == cols, "hungarian: ragged cost matrix");
  if (rows == 0 || cols == 0) {
    for (std::size_t i = 0; i < rows; ++i) out.unmatched_rows.push_back(i);
    for (std::size_t j = 0; j < cols; ++j) out.unmatched_cols.push_back(j);
    return out;
  }

  std::vector<std::size_t> row_to_col(rows, SIZE_MAX);
  if (rows <= cols) {
    row_to_col = hungarian_detail::solve_wide(cost, rows, cols);
  } else {
    std::vector<std::vector<double>> t(cols, std::vector<double>(rows));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t[j][i] = cost[i][j];
    const auto col_to_row = hungarian_detail::solve_wide(t, cols, rows);
    for (std::size_t j = 0; j < cols; ++j) row_to_col[col_to_row[j]] = j;
  }

  std::vector<char> col_used(cols, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (row_to_col[i] == SIZE_MAX) {
      out.unmatched_rows.push_back(i);
      continue;
    }
    out.pairs.emplace_back(i, row_to_col[i]);
    col_used[row_to_col[i]] = 1;
    out.total_cost += cost[i][row_to_col[i]];
  }
  for (std::size_t j = 0; j < cols; ++j)
    if (!col_used[j]) out.unmatched_cols.push_back(j);
  return out;
}

}  // namespace kplora
