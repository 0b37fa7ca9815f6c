#include "lodet/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lodet/common.hpp"

namespace lodet::det {

namespace {

// Potentials-based shortest augmenting path formulation, O(n^2 * m),
// requires n <= m. Double accumulation keeps reduced costs exact enough for
// the small matrices this project sees.
std::vector<int> solve_rows_le_cols(const std::vector<double>& cost, int n, int m) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
    std::vector<int> way(static_cast<size_t>(m) + 1, 0);
    std::vector<int> match(static_cast<size_t>(m) + 1, 0);  // 1-based row matched to column

    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int i0 = match[static_cast<size_t>(j0)], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = cost[static_cast<size_t>(i0 - 1) * m + (j - 1)] -
                             u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    std::vector<int> row_to_col(static_cast<size_t>(n), -1);
    for (int j = 1; j <= m; ++j) {
        if (match[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(match[static_cast<size_t>(j)] - 1)] = j - 1;
    }
    return row_to_col;
}

}  // namespace

std::vector<std::pair<int, int>> hungarian_match(const std::vector<float>& cost, int n, int m) {
    if (n < 0 || m < 0 || static_cast<int64_t>(cost.size()) != static_cast<int64_t>(n) * m) {
        throw ContractError("hungarian_match: cost size does not match " + std::to_string(n) +
                            "x" + std::to_string(m));
    }
    if (n == 0 || m == 0) return {};
    for (float c : cost) {
        if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost");
    }

    bool transposed = n > m;
    int rn = transposed ? m : n;
    int rm = transposed ? n : m;
    std::vector<double> c(static_cast<size_t>(rn) * rm);
    for (int i = 0; i < rn; ++i) {
        for (int j = 0; j < rm; ++j) {
            c[static_cast<size_t>(i) * rm + j] = transposed
                                                     ? cost[static_cast<size_t>(j) * m + i]
                                                     : cost[static_cast<size_t>(i) * m + j];
        }
    }
    std::vector<int> row_to_col = solve_rows_le_cols(c, rn, rm);

    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<size_t>(rn));
    for (int i = 0; i < rn; ++i) {
        int j = row_to_col[static_cast<size_t>(i)];
        if (j >= 0) out.emplace_back(transposed ? j : i, transposed ? i : j);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace lodet::det
