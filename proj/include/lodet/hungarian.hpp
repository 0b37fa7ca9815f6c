#pragma once

#include <utility>
#include <vector>

namespace lodet::det {

// Min-cost injective assignment (Kuhn-Munkres) over an n x m cost matrix,
// row-major. Returns min(n, m) (row, column) pairs minimizing total cost;
// empty input yields an empty assignment. Costs must be finite.
std::vector<std::pair<int, int>> hungarian_match(const std::vector<float>& cost, int n, int m);

}  // namespace lodet::det
