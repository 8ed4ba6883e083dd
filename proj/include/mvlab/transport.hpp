#pragma once

#include <functional>
#include <utility>
#include <vector>

namespace mvlab::detail {

// Exact dense transportation solve (min-cost flow by successive shortest
// augmenting paths with Johnson potentials). Supplies and demands are
// positive reals summing to the same total; cost(i,j) must be finite and
// nonnegative. Returns the optimal total cost.
double transport_cost(const std::vector<double>& supply, const std::vector<double>& demand,
                      const std::function<double(int, int)>& cost);

// Exact 1-D optimal transport with cost |x-y|^theta (theta >= 1) by the
// monotone (quantile) coupling. Entries are (position, weight).
double quantile_ot_cost(std::vector<std::pair<double, double>> a,
                        std::vector<std::pair<double, double>> b, double theta);

} // namespace mvlab::detail
