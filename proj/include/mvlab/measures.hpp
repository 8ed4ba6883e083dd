#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/errors.hpp"
#include "mvlab/linalg.hpp"

namespace mvlab {

// Weighted atoms in R^d. Immutable after construction; the constructor
// enforces the invariants (weights sum to 1, nonnegative, finite atoms).
// Derived functionals (theta-moments, user integrals) are memoized so that
// coefficient callables invoked once per particle stay O(1).
class EmpiricalMeasure {
public:
    EmpiricalMeasure(int dim, std::vector<double> atoms_flat, std::vector<double> weights);

    static EmpiricalMeasure dirac(const Vec& x);
    static EmpiricalMeasure uniform(int dim, std::vector<double> atoms_flat);

    int dim() const { return dim_; }
    std::size_t size() const { return weights_.size(); }
    std::span<const double> atom(std::size_t i) const {
        return {atoms_.data() + i * static_cast<std::size_t>(dim_),
                static_cast<std::size_t>(dim_)};
    }
    double weight(std::size_t i) const { return weights_[i]; }
    const std::vector<double>& atoms_flat() const { return atoms_; }
    const std::vector<double>& weights() const { return weights_; }

    // ( sum_i w_i |x_i|^theta )^{1/theta}; cached per theta, thread-safe.
    double theta_moment(double theta) const;

    // Memoized integral of g against the measure, keyed by the caller's
    // label. g must be a pure function; concurrent first calls are safe.
    double cached_integral(const std::string& key,
                           const std::function<double(std::span<const double>)>& g) const;

private:
    int dim_;
    std::vector<double> atoms_;   // row-major, size() * dim_
    std::vector<double> weights_;

    struct Cache {
        std::mutex m;
        std::vector<std::pair<double, double>> moments;
        std::vector<std::pair<std::string, double>> integrals;
    };
    std::shared_ptr<Cache> cache_;
};

// Time-indexed family of measures on a strictly increasing grid.
class MeasureFlow {
public:
    MeasureFlow(std::vector<double> times, std::vector<EmpiricalMeasure> measures);

    // Constant-in-time flow (the Picard initial guess).
    static MeasureFlow constant(std::vector<double> times, const EmpiricalMeasure& mu);

    std::size_t size() const { return times_.size(); }
    int dim() const { return measures_.front().dim(); }
    const std::vector<double>& times() const { return times_; }
    const EmpiricalMeasure& measure(std::size_t i) const { return measures_[i]; }

    // Left-nearest lookup: the measure at the largest grid time <= t.
    // Adapted (non-anticipating) evaluation for the simulator.
    const EmpiricalMeasure& at_left(double t) const;
    std::size_t index_left(double t) const;

private:
    std::vector<double> times_;
    std::vector<EmpiricalMeasure> measures_;
};

struct MetricReport {
    double tv = 0.0;
    double weighted_tv = 0.0;
    double wasserstein_theta = 0.0;
    double theta = 1.0;
};

struct TransportOptions {
    // wasserstein refuses instances with size(mu)*size(nu) beyond this
    // product; the default corresponds to the 2048-atom support cap.
    std::size_t max_support_product = std::size_t(2048) * 2048;
    // Opt-in sliced approximation beyond the cap. Results computed this way
    // are approximate and flagged through wasserstein_is_exact().
    bool allow_sliced = false;
    int sliced_directions = 64;
    std::uint64_t sliced_seed = 0x5eed;
};

double theta_moment(const EmpiricalMeasure& mu, double theta);

// Exact L^theta optimal-transport cost^(1/theta) between atomic measures
// (min-cost flow over the coupling polytope). Symmetric by construction.
double wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta,
                   const TransportOptions& opt = {});

// True when the given pair would be solved exactly under the options.
bool wasserstein_is_exact(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                          const TransportOptions& opt = {});

// Sliced approximation (random 1-D projections); clearly approximate.
double sliced_wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta,
                          int directions = 64, std::uint64_t seed = 0x5eed);

// ||mu - nu||_{theta,TV} = sum over the union of atom sites of
// (1+|x|^theta) |mu({x}) - nu({x})|; sites identified within 1e-12.
double weighted_tv(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta);

// Plain variation distance sup_{|f|<=1} |mu(f)-nu(f)| on atom sites.
double total_variation(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

enum class FlowMetric { weighted_tv, wasserstein };

// sup over shared grid times of the chosen per-time metric.
double flow_distance(const MeasureFlow& mu, const MeasureFlow& nu, double theta,
                     FlowMetric kind, const TransportOptions& opt = {});

MetricReport gpp_report(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta);

// Smoothed weighted-TV estimator for laws known through particle clouds:
// both measures are mollified with a Gaussian of the given bandwidth on a
// fixed grid and integral (1+|x|^theta)|p_mu - p_nu| is taken. This is the
// observable the Picard driver contracts; the exact atomic formula above
// saturates once two clouds have disjoint supports. 1-D only.
struct SmoothingGrid {
    double lo = 0.0, hi = 0.0;
    double bandwidth = 0.0;
    int points = 1024;
};
double weighted_tv_smoothed(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                            double theta, const SmoothingGrid& grid);

// --- serialization -------------------------------------------------------
// Measure files: header "dim,theta", then one row "w,x1,...,xd" per atom.
// Flow files: one measure file per grid time plus an index of "t,filename".
void save_measure(const std::string& path, const EmpiricalMeasure& mu, double theta);
std::pair<EmpiricalMeasure, double> load_measure(const std::string& path);
// Writes dir/<basename>_<k>.csv per grid time plus dir/<basename>_index.csv;
// returns the index path. load_flow takes the index path.
std::string save_flow(const std::string& dir, const std::string& basename,
                      const MeasureFlow& flow, double theta);
MeasureFlow load_flow(const std::string& index_path);

} // namespace mvlab
