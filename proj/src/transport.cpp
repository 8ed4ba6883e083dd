#include "mvlab/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mvlab/errors.hpp"

namespace mvlab::detail {

namespace {
constexpr double kMassEps = 1e-15;
}

double transport_cost(const std::vector<double>& supply, const std::vector<double>& demand,
                      const std::function<double(int, int)>& cost) {
    const int n = static_cast<int>(supply.size());
    const int m = static_cast<int>(demand.size());
    require(n > 0 && m > 0, "invalid-parameter", "transport needs nonempty marginals");

    // Cost matrix evaluated once; instances are capped by the caller.
    std::vector<double> c(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) c[static_cast<std::size_t>(i) * m + j] = cost(i, j);

    std::vector<double> flow(static_cast<std::size_t>(n) * m, 0.0);
    std::vector<double> rs = supply, rd = demand;
    std::vector<double> pot(n + m, 0.0); // node potentials, sources then sinks

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(n + m);
    std::vector<int> parent(n + m);
    std::vector<char> done(n + m);

    double remaining = 0.0;
    for (double s : rs) remaining += s;

    const long max_augmentations = 50L * (n + m) + 1000;
    long augmentations = 0;

    while (remaining > kMassEps) {
        require(++augmentations <= max_augmentations, "invalid-parameter",
                "transport solve failed to terminate (degenerate instance)");

        std::fill(dist.begin(), dist.end(), inf);
        std::fill(parent.begin(), parent.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        for (int i = 0; i < n; ++i)
            if (rs[i] > kMassEps) dist[i] = 0.0;

        // Dense Dijkstra over the bipartite residual graph.
        int best_sink = -1;
        for (int it = 0; it < n + m; ++it) {
            int u = -1;
            double du = inf;
            for (int v = 0; v < n + m; ++v)
                if (!done[v] && dist[v] < du) {
                    du = dist[v];
                    u = v;
                }
            if (u < 0) break;
            done[u] = 1;
            if (u >= n && rd[u - n] > kMassEps) {
                best_sink = u;
                break;
            }
            if (u < n) {
                // forward arcs u -> sinks
                for (int j = 0; j < m; ++j) {
                    const double rc =
                        std::max(0.0, c[static_cast<std::size_t>(u) * m + j] + pot[u] - pot[n + j]);
                    if (du + rc < dist[n + j]) {
                        dist[n + j] = du + rc;
                        parent[n + j] = u;
                    }
                }
            } else {
                // backward arcs sink -> sources carrying positive flow
                const int j = u - n;
                for (int i = 0; i < n; ++i) {
                    if (flow[static_cast<std::size_t>(i) * m + j] <= kMassEps) continue;
                    const double rc = std::max(
                        0.0, -c[static_cast<std::size_t>(i) * m + j] - pot[i] + pot[u]);
                    if (du + rc < dist[i]) {
                        dist[i] = du + rc;
                        parent[i] = u;
                    }
                }
            }
        }
        require(best_sink >= 0, "invalid-parameter", "transport: no augmenting path found");

        const double dt = dist[best_sink];
        for (int v = 0; v < n + m; ++v) pot[v] += std::min(dist[v], dt);

        // Walk parents to find the bottleneck, then augment.
        double bottleneck = rd[best_sink - n];
        for (int v = best_sink; parent[v] >= 0; v = parent[v]) {
            const int u = parent[v];
            if (u < n && v >= n) {
                // forward arc: no capacity bound
            } else {
                bottleneck = std::min(bottleneck, flow[static_cast<std::size_t>(v) * m + (u - n)]);
            }
            if (parent[u] < 0 && u < n) bottleneck = std::min(bottleneck, rs[u]);
        }
        for (int v = best_sink; parent[v] >= 0; v = parent[v]) {
            const int u = parent[v];
            if (u < n && v >= n)
                flow[static_cast<std::size_t>(u) * m + (v - n)] += bottleneck;
            else
                flow[static_cast<std::size_t>(v) * m + (u - n)] -= bottleneck;
        }
        int origin = best_sink;
        while (parent[origin] >= 0) origin = parent[origin];
        rs[origin] -= bottleneck;
        rd[best_sink - n] -= bottleneck;
        remaining -= bottleneck;
    }

    double total = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            total += flow[static_cast<std::size_t>(i) * m + j] * c[static_cast<std::size_t>(i) * m + j];
    return total;
}

double quantile_ot_cost(std::vector<std::pair<double, double>> a,
                        std::vector<std::pair<double, double>> b, double theta) {
    auto by_pos = [](const std::pair<double, double>& u, const std::pair<double, double>& v) {
        return u.first < v.first;
    };
    std::sort(a.begin(), a.end(), by_pos);
    std::sort(b.begin(), b.end(), by_pos);
    std::size_t i = 0, j = 0;
    double wa = a.empty() ? 0.0 : a[0].second;
    double wb = b.empty() ? 0.0 : b[0].second;
    double total = 0.0;
    while (i < a.size() && j < b.size()) {
        const double m = std::min(wa, wb);
        if (m > 0.0) total += m * std::pow(std::abs(a[i].first - b[j].first), theta);
        wa -= m;
        wb -= m;
        if (wa <= kMassEps) {
            ++i;
            if (i < a.size()) wa = a[i].second;
        }
        if (wb <= kMassEps) {
            ++j;
            if (j < b.size()) wb = b[j].second;
        }
    }
    return total;
}

} // namespace mvlab::detail
