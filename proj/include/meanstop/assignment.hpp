#pragma once

#include <limits>
#include <vector>

#include "meanstop/errors.hpp"

namespace meanstop {

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
/// Returns the optimal cost; `match[i]` receives the column of row i.
inline double min_cost_assignment(const std::vector<std::vector<double>>& cost, std::vector<int>* match = nullptr) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) {
        if (match) match->clear();
        return 0.0;
    }
    const int m = static_cast<int>(cost[0].size());
    if (m < n) throw DomainError("min_cost_assignment: more rows than columns");
    const double inf = std::numeric_limits<double>::infinity();
    // Potentials-based Hungarian method, 1-indexed with a virtual column 0.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
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
            for (int j = 0; j <= m; ++j) {
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
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost[i][row_to_col[i]];
    if (match) *match = std::move(row_to_col);
    return total;
}

}  // namespace meanstop
