#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mvlab/errors.hpp"

namespace mvlab {

struct Quadrature {
    std::vector<double> nodes;
    std::vector<double> weights;
    std::size_t size() const { return nodes.size(); }
};

// Gauss-Legendre nodes/weights on [-1,1], Newton iteration on the Legendre
// recurrence.
inline Quadrature gauss_legendre(int n) {
    require(n >= 1, "invalid-parameter", "gauss_legendre needs n >= 1");
    Quadrature q;
    q.nodes.resize(n);
    q.weights.resize(n);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        q.nodes[i] = -x;
        q.nodes[n - 1 - i] = x;
        q.weights[i] = q.weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * pp * pp);
    }
    return q;
}

inline Quadrature gauss_legendre_on(int n, double a, double b) {
    Quadrature q = gauss_legendre(n);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    for (int i = 0; i < n; ++i) {
        q.nodes[i] = mid + half * q.nodes[i];
        q.weights[i] *= half;
    }
    return q;
}

// Nodes/weights for \int_s^t g(r) dr under r = s + (t-s) sin^2(pi v / 2),
// which absorbs inverse-square-root singularities at both endpoints
// (dr = (t-s) (pi/2) sin(pi v) dv vanishes linearly there).
inline Quadrature endpoint_absorbing(int n, double s, double t) {
    Quadrature v = gauss_legendre_on(n, 0.0, 1.0);
    Quadrature q;
    q.nodes.resize(v.size());
    q.weights.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double sv = std::sin(0.5 * M_PI * v.nodes[i]);
        q.nodes[i] = s + (t - s) * sv * sv;
        q.weights[i] = v.weights[i] * (t - s) * 0.5 * M_PI * std::sin(M_PI * v.nodes[i]);
    }
    return q;
}

// Composite rule with 2-point Gauss per panel; exact for cubics on each
// panel, which the covariance-accumulation example requires.
template <class F>
double panel_integrate(F&& f, double a, double b, int panels) {
    require(panels >= 1, "invalid-parameter", "panel_integrate needs panels >= 1");
    const double h = (b - a) / panels;
    const double off = 0.5 * h / std::sqrt(3.0);
    double acc = 0.0;
    for (int k = 0; k < panels; ++k) {
        const double c = a + (k + 0.5) * h;
        acc += 0.5 * h * (f(c - off) + f(c + off));
    }
    return acc;
}

} // namespace mvlab
