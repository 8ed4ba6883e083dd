#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvlab/coefficients.hpp"
#include "mvlab/measures.hpp"

namespace mvlab {

enum class Scheme { euler_maruyama };

struct SimulationPlan {
    int n_particles = 1000;
    std::vector<double> time_grid;
    std::uint64_t seed = 1;
    Scheme scheme = Scheme::euler_maruyama;
    // Per-step taming: |b| dt <= multiplier * sqrt(K dt); <= 0 disables.
    double drift_cap_multiplier = 10.0;

    void validate() const;
    static std::vector<double> uniform_grid(double s, double t, int steps);
};

struct ParticleEnsemble {
    SimulationPlan plan;
    int dim = 1;
    // particle-major: paths[(i * n_times + k) * dim + c]
    std::vector<double> paths;
    long capped_evaluations = 0;

    std::size_t n_particles() const { return static_cast<std::size_t>(plan.n_particles); }
    std::size_t n_times() const { return plan.time_grid.size(); }
    std::span<const double> at(std::size_t particle, std::size_t k) const {
        return {paths.data() + (particle * n_times() + k) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
    EmpiricalMeasure law_at(std::size_t k) const;
    MeasureFlow law_flow() const;
};

// Euler-Maruyama paths of the frozen equation: the drift reads the supplied
// measure flow (left-nearest in time), the diffusion reads the ensemble's
// own empirical law. Deterministic given the seed.
ParticleEnsemble simulate_frozen(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                                 const EmpiricalMeasure& gamma, const SimulationPlan& plan);

// Time-indexed empirical laws of simulate_frozen output; the first measure
// is the empirical draw from gamma.
MeasureFlow phi_map(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                    const MeasureFlow& mu_flow, const SimulationPlan& plan);

// Interacting-particle discretization of the distribution-dependent SDE:
// the live empirical law feeds both coefficient slots.
ParticleEnsemble simulate_mckean_vlasov(const CoefficientSet& coeffs,
                                        const EmpiricalMeasure& gamma,
                                        const SimulationPlan& plan);

// Memory-light variant returning only terminal positions (flat n*d); used
// for large Monte Carlo reference runs.
Vec simulate_frozen_terminal(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                             const EmpiricalMeasure& gamma, const SimulationPlan& plan);
Vec simulate_mckean_vlasov_terminal(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                                    const SimulationPlan& plan);

struct PicardOptions {
    // 0 = Silverman from the first iterate flow, floored at 1e-3; frozen for
    // the whole solve.
    double smoothing_bandwidth = 0.0;
};

struct PicardResult {
    MeasureFlow flow; // the fixed-point approximant over the full grid
    // Per-iteration distances d_k between consecutive iterates (smoothed
    // weighted-TV estimator of the law metric), segments concatenated.
    std::vector<double> iterates;
    // d_{k+1}/d_k within segments, where defined.
    std::vector<double> contraction_ratios;
    std::vector<int> segment_iterations;
    double t0_used = 0.0;
    int segments = 0;
    bool converged = false;
    double bandwidth_used = 0.0;

    PicardResult(MeasureFlow f) : flow(std::move(f)) {}
};

// Picard driver: partitions the grid into windows of length <= t0, iterates
// mu -> Phi(mu) from the constant-in-time initial law with common random
// numbers (the same Brownian increments across iterates), stops when the
// iterate distance drops below tol. Three consecutive ratios >= 1 raise
// "no-contraction-detected".
PicardResult picard_solve(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                          const SimulationPlan& plan, double tol, int max_iter, double t0,
                          const PicardOptions& opts = {});

struct MomentReport {
    double sup_moment_theta = 0.0;
    double sup_moment_se = 0.0;
    // running-max moments E[ sup_{r<=t_k} (1+|X_r|^2)^{theta/2} ]
    std::vector<double> per_time_moments;
    double fitted_growth_rate = 0.0;
};

MomentReport moment_report(const ParticleEnsemble& ensemble, double theta);

// Lemma-2.2 class membership on the grid:
// sup_r (1+||mu_r||_theta) e^{-N(r-s)} <= 2 (1+||gamma||_theta).
bool invariant_class_check(const MeasureFlow& flow, const EmpiricalMeasure& gamma, double N,
                           double theta);

// Smallest rate N making the check pass (closed form on the grid); +inf when
// the time-s measure already violates the bound.
double min_invariant_rate(const MeasureFlow& flow, const EmpiricalMeasure& gamma, double theta);

// Binary path dump: 32-byte header (magic "MVLPATHS", u32 version,
// n_particles, n_times, dim, u64 reserved), then little-endian doubles in
// particle x time x dim row-major order.
void save_paths(const std::string& path, const ParticleEnsemble& ensemble);
struct PathDump {
    std::uint32_t n_particles = 0, n_times = 0, dim = 0;
    std::vector<double> data;
};
PathDump load_paths(const std::string& path);

} // namespace mvlab
