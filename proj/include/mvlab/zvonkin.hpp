#pragma once

#include <vector>

#include "mvlab/coefficients.hpp"
#include "mvlab/measures.hpp"

namespace mvlab {

struct GridSpec {
    int space_nodes = 401;
    // 0 = automatic truncation at 10 + 8 sqrt(K T)
    double space_radius = 0.0;
    int time_steps = 200;
};

struct ZvonkinSolution {
    std::vector<double> xs;     // space grid
    std::vector<double> ts;     // time grid on [s, T]
    std::vector<double> u;      // time-major: u[k * xs.size() + i]
    double lambda = 0.0;
    double sup_u = 0.0;
    double sup_du = 0.0;
    double sup_d2u_norm = 0.0;  // discrete localized-norm surrogate of u_xx

    double value(std::size_t k, std::size_t i) const { return u[k * xs.size() + i]; }
};

// Backward solve of u_t + 1/2 (sigma sigma*) u_xx + b u_x + b = lambda u,
// u(T) = 0, implicit Euler in time, centered differences in space, Neumann
// boundaries. d = 1 only; b reads mu_flow, sigma reads phi_flow.
ZvonkinSolution solve_backward_pde(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                                   const MeasureFlow& phi_flow, double lambda,
                                   const GridSpec& grid);

struct GateReport {
    bool pass = false;
    double sup_u = 0.0;
    double sup_du = 0.0;
    double sup_d2u_norm = 0.0;
    double lambda = 0.0;
};

// The 1/5 regularity gate: sup|u| + sup|u_x| <= 0.2 (1e-9 slack).
GateReport regularity_gate(const ZvonkinSolution& sol);

// Smallest lambda (doubling then bisection) whose solution passes the gate;
// "no-admissible-lambda" if none <= lambda_max.
double lambda_search(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                     const MeasureFlow& phi_flow, const GridSpec& grid, double lambda_max);

// Theta_t(x) = x + u_t(x), bilinear interpolation; strictly increasing in x
// whenever the gate passes. Out-of-grid points raise "extrapolation-refused".
double theta_transform(const ZvonkinSolution& sol, double t, double x);

} // namespace mvlab
