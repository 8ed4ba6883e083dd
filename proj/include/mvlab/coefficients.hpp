#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mvlab/linalg.hpp"
#include "mvlab/measures.hpp"

namespace mvlab {

// Coefficient callables write into caller-owned buffers so the particle loop
// does not allocate. They must be pure and safe for concurrent invocation
// (documented contract; the library never mutates the measure it passes).
using DriftFn =
    std::function<void(double t, std::span<const double> x, const EmpiricalMeasure& mu,
                       std::span<double> out)>;
using DiffusionFn =
    std::function<void(double t, std::span<const double> x, const EmpiricalMeasure& mu,
                       MatView out)>;
using EnvelopeFn = std::function<double(double t, std::span<const double> x)>;

// The problem data: drift b, diffusion sigma, singular envelope f and the
// constants (theta, K, p, q, T).
struct CoefficientSet {
    std::string name = "custom";
    int dim = 1;
    int brownian_dim = 1;
    double theta = 1.0;
    double K = 1.0;
    double p = 4.0;
    double q = 8.0;
    double horizon = 1.0;
    DriftFn drift;
    DiffusionFn diffusion;
    EnvelopeFn envelope;
    // Declared singular points of the envelope; quadrature nodes are nudged
    // 1e-8 away from them.
    std::vector<Vec> singular_points;
    // Preset metadata: sigma ignores its state argument (enables the fast
    // covariance-accumulation path in the parametrix module).
    bool sigma_state_independent = false;

    void validate() const;

    Vec eval_drift(double t, std::span<const double> x, const EmpiricalMeasure& mu) const;
    Mat eval_diffusion(double t, std::span<const double> x, const EmpiricalMeasure& mu) const;
};

// Membership in the class of exponents controlling the singular drift:
// p, q > 1 and d/p + 2/q < 1.
bool kato_class_check(double p, double q, int d);

struct QuadratureSpec {
    int nodes_per_axis = 24;
    int time_panels = 32;
    int refine_levels = 3;
};

// sup over centers z of ( int_s^t ( int_{B(z,1)} |f(u,x)|^p dx )^{q/p} du )^{1/q}
// by tensor Gauss-Legendre over the bounding box of B(z,1), indicator-masked,
// refined refine_levels times. Throws "divergent-norm" when refinement keeps
// growing without stabilizing (non-integrable blow-up).
double tilde_lpq_norm(const EnvelopeFn& f, double p, double q, double s, double t,
                      const std::vector<Vec>& center_grid, const QuadratureSpec& spec,
                      const std::vector<Vec>& singular_points = {}, Vec* best_center = nullptr);

// Deterministic probe family for the assumption checkers.
struct SamplePlan {
    int n_probes = 64;
    std::uint64_t seed = 1;
    double space_radius = 3.0;
    int measure_atoms = 16;
    double measure_radius = 2.0;
};

struct AssumptionReport {
    double max_sigma_norm_sq = 0.0;
    double max_inv_norm = 0.0;
    double lipschitz_x_ratio = 0.0;
    double lipschitz_measure_ratio = 0.0;
    double mixed_ratio = 0.0;
    double drift_envelope_ratio = 0.0;
    double drift_tv_lipschitz_ratio = 0.0;
    std::map<std::string, bool> pass;

    bool all_pass() const {
        for (const auto& [k, v] : pass)
            if (!v) return false;
        return true;
    }
};

// Empirical worst ratios of each diffusion clause over the probe family;
// pass iff each stays within K (1e-9 slack).
AssumptionReport verify_A1(const CoefficientSet& coeffs, const SamplePlan& plan);

// Same for the drift clauses: |b| <= (1+||mu||_theta) f and the theta-TV
// Lipschitz bound; pass iff ratios <= 1 within slack.
AssumptionReport verify_A2(const CoefficientSet& coeffs, const SamplePlan& plan);

// Built-in coefficient families, addressable by name.
CoefficientSet preset(const std::string& name);
std::vector<std::pair<std::string, std::string>> preset_catalog();

// Deterministic probe measures shared by the checkers and tests.
EmpiricalMeasure random_measure(int dim, int atoms, double radius, std::uint64_t seed,
                                std::uint64_t stream);

} // namespace mvlab
