#include "mvlab/zvonkin.hpp"

#include <algorithm>
#include <cmath>

#include "mvlab/io.hpp"

namespace mvlab {

namespace {

// Thomas solve of a tridiagonal system; diagonals (lo, di, up) are clobbered.
void tridiag_solve(std::vector<double>& lo, std::vector<double>& di, std::vector<double>& up,
                   std::vector<double>& rhs) {
    const std::size_t n = di.size();
    for (std::size_t i = 1; i < n; ++i) {
        require(std::abs(di[i - 1]) > 1e-300, "solver-diverged", "singular tridiagonal pivot");
        const double m = lo[i] / di[i - 1];
        di[i] -= m * up[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    rhs[n - 1] /= di[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) rhs[i] = (rhs[i] - up[i] * rhs[i + 1]) / di[i];
}

double sup_abs(const std::vector<double>& v, std::size_t off, std::size_t n) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(v[off + i]));
    return m;
}

} // namespace

ZvonkinSolution solve_backward_pde(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                                   const MeasureFlow& phi_flow, double lambda,
                                   const GridSpec& grid) {
    coeffs.validate();
    require(coeffs.dim == 1, "invalid-parameter", "the backward PDE solver is 1-D");
    require(lambda >= 0.0, "invalid-parameter", "lambda must be >= 0");
    require(grid.space_nodes >= 5 && grid.time_steps >= 1, "invalid-parameter",
            "grid too small");

    const double T = coeffs.horizon;
    const double s = phi_flow.times().front();
    const double R =
        grid.space_radius > 0.0 ? grid.space_radius : 10.0 + 8.0 * std::sqrt(coeffs.K * T);
    const int nx = grid.space_nodes;
    const int nt = grid.time_steps;
    const double dx = 2.0 * R / (nx - 1);
    const double dt = (T - s) / nt;

    ZvonkinSolution sol;
    sol.lambda = lambda;
    sol.xs.resize(nx);
    for (int i = 0; i < nx; ++i) sol.xs[i] = -R + i * dx;
    sol.ts.resize(nt + 1);
    for (int k = 0; k <= nt; ++k) sol.ts[k] = s + k * dt;
    sol.u.assign(static_cast<std::size_t>(nt + 1) * nx, 0.0); // u(T, .) = 0 exactly

    std::vector<double> lo(nx), di(nx), up(nx), rhs(nx);
    std::vector<double> a_coef(nx), b_coef(nx);

    for (int k = nt - 1; k >= 0; --k) {
        const double t = sol.ts[k];
        const EmpiricalMeasure& mu_t = mu_flow.at_left(t);
        const EmpiricalMeasure& phi_t = phi_flow.at_left(t);
        double bmax = 0.0;
        std::vector<double> row(coeffs.brownian_dim);
        for (int i = 0; i < nx; ++i) {
            const double x = sol.xs[i];
            const std::span<const double> xs{&x, 1};
            double b = 0.0;
            coeffs.drift(t, xs, mu_t, {&b, 1});
            coeffs.diffusion(t, xs, phi_t, MatView{row.data(), 1, coeffs.brownian_dim});
            double sig2 = 0.0; // sigma sigma* = squared row norm at d = 1
            for (double v : row) sig2 += v * v;
            a_coef[i] = 0.5 * sig2;
            b_coef[i] = b;
            bmax = std::max(bmax, std::abs(b));
        }

        // ((1/dt) + lambda) u_k - L u_k = u_{k+1}/dt + b
        for (int i = 0; i < nx; ++i) {
            const double ax = a_coef[i] / (dx * dx);
            const double bx = b_coef[i] / (2.0 * dx);
            lo[i] = -(ax - bx);
            di[i] = 1.0 / dt + lambda + 2.0 * ax;
            up[i] = -(ax + bx);
            rhs[i] = sol.u[static_cast<std::size_t>(k + 1) * nx + i] / dt + b_coef[i];
        }
        // Neumann (mirror ghost): u_{-1} = u_1, u_{nx} = u_{nx-2}
        up[0] += lo[0];
        lo[0] = 0.0;
        lo[nx - 1] += up[nx - 1];
        up[nx - 1] = 0.0;

        tridiag_solve(lo, di, up, rhs);
        for (int i = 0; i < nx; ++i) sol.u[static_cast<std::size_t>(k) * nx + i] = rhs[i];

        const double sup_new = sup_abs(sol.u, static_cast<std::size_t>(k) * nx, nx);
        const double sup_old = sup_abs(sol.u, static_cast<std::size_t>(k + 1) * nx, nx);
        const double scale = std::max(sup_old, dt * (bmax + 1.0));
        if (sup_new > 10.0 * scale)
            fail("solver-diverged", "sup|u| grew from " + fmt17(sup_old) + " to " +
                                        fmt17(sup_new) + " in one backward step");
    }

    // norms
    sol.sup_u = sup_abs(sol.u, 0, sol.u.size());
    double sdu = 0.0;
    std::vector<double> d2(static_cast<std::size_t>(nt + 1) * nx, 0.0);
    for (int k = 0; k <= nt; ++k) {
        const std::size_t off = static_cast<std::size_t>(k) * nx;
        for (int i = 0; i < nx; ++i) {
            double du;
            if (i == 0)
                du = (sol.u[off + 1] - sol.u[off]) / dx;
            else if (i == nx - 1)
                du = (sol.u[off + nx - 1] - sol.u[off + nx - 2]) / dx;
            else
                du = (sol.u[off + i + 1] - sol.u[off + i - 1]) / (2.0 * dx);
            sdu = std::max(sdu, std::abs(du));
            if (i > 0 && i < nx - 1)
                d2[off + i] =
                    (sol.u[off + i + 1] - 2.0 * sol.u[off + i] + sol.u[off + i - 1]) / (dx * dx);
        }
    }
    sol.sup_du = sdu;

    // Discrete localized-norm surrogate of u_xx: sup over grid centers of the
    // time-L^q of the ball-L^p norm, unit balls, trapezoid-in-space.
    {
        const double p = coeffs.p, q = coeffs.q;
        double sup = 0.0;
        const int stride = std::max(1, nx / 32);
        for (int c = 0; c < nx; c += stride) {
            double tint = 0.0;
            for (int k = 0; k < nt; ++k) {
                double ball = 0.0;
                for (int i = 0; i < nx; ++i)
                    if (std::abs(sol.xs[i] - sol.xs[c]) <= 1.0)
                        ball += std::pow(std::abs(d2[static_cast<std::size_t>(k) * nx + i]), p) * dx;
                tint += std::pow(ball, q / p) * dt;
            }
            sup = std::max(sup, std::pow(tint, 1.0 / q));
        }
        sol.sup_d2u_norm = sup;
    }
    return sol;
}

GateReport regularity_gate(const ZvonkinSolution& sol) {
    GateReport r;
    r.sup_u = sol.sup_u;
    r.sup_du = sol.sup_du;
    r.sup_d2u_norm = sol.sup_d2u_norm;
    r.lambda = sol.lambda;
    r.pass = sol.sup_u + sol.sup_du <= 0.2 + 1e-9;
    return r;
}

double lambda_search(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                     const MeasureFlow& phi_flow, const GridSpec& grid, double lambda_max) {
    require(std::isfinite(lambda_max) && lambda_max >= 0.0, "invalid-parameter",
            "lambda_max must be finite and nonnegative");
    auto passes = [&](double lam) {
        return regularity_gate(solve_backward_pde(coeffs, mu_flow, phi_flow, lam, grid)).pass;
    };
    if (passes(0.0)) return 0.0;

    double lo = 0.0, hi = 1.0;
    bool found = false;
    while (hi <= lambda_max) {
        if (passes(hi)) {
            found = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if (!found) {
        if (hi / 2.0 < lambda_max && passes(lambda_max)) {
            lo = hi / 2.0;
            hi = lambda_max;
        } else {
            fail("no-admissible-lambda",
                 "regularity gate fails for every lambda <= " + fmt17(lambda_max));
        }
    }
    while ((hi - lo) / std::max(hi, 1e-12) > 5e-3) {
        const double mid = 0.5 * (lo + hi);
        if (passes(mid))
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

double theta_transform(const ZvonkinSolution& sol, double t, double x) {
    require(t >= sol.ts.front() - 1e-12 && t <= sol.ts.back() + 1e-12, "extrapolation-refused",
            "time outside the solution grid");
    require(x >= sol.xs.front() - 1e-12 && x <= sol.xs.back() + 1e-12, "extrapolation-refused",
            "point outside the truncation box");
    const double dt = sol.ts[1] - sol.ts[0];
    const double dx = sol.xs[1] - sol.xs[0];
    const double kf = std::clamp((t - sol.ts.front()) / dt, 0.0,
                                 static_cast<double>(sol.ts.size() - 1));
    const double jf = std::clamp((x - sol.xs.front()) / dx, 0.0,
                                 static_cast<double>(sol.xs.size() - 1));
    const std::size_t k0 = std::min(static_cast<std::size_t>(kf), sol.ts.size() - 2);
    const std::size_t j0 = std::min(static_cast<std::size_t>(jf), sol.xs.size() - 2);
    const double fk = kf - k0, fj = jf - j0;
    const double u00 = sol.value(k0, j0), u01 = sol.value(k0, j0 + 1);
    const double u10 = sol.value(k0 + 1, j0), u11 = sol.value(k0 + 1, j0 + 1);
    const double u = (1 - fk) * ((1 - fj) * u00 + fj * u01) + fk * ((1 - fj) * u10 + fj * u11);
    return x + u;
}

} // namespace mvlab
