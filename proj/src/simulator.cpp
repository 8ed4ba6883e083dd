#include "mvlab/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "mvlab/io.hpp"
#include "mvlab/kernels.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"

namespace mvlab {

void SimulationPlan::validate() const {
    require(n_particles >= 1, "invalid-parameter", "need at least one particle");
    require(time_grid.size() >= 2, "invalid-parameter", "time grid needs >= 2 points");
    for (std::size_t i = 1; i < time_grid.size(); ++i)
        require(time_grid[i] > time_grid[i - 1], "invalid-parameter",
                "time grid must be strictly increasing");
    require(seed != 0 || true, "invalid-parameter", "");
}

std::vector<double> SimulationPlan::uniform_grid(double s, double t, int steps) {
    require(steps >= 1 && t > s, "invalid-parameter", "bad grid request");
    std::vector<double> g(steps + 1);
    for (int k = 0; k <= steps; ++k)
        g[k] = s + (t - s) * static_cast<double>(k) / static_cast<double>(steps);
    return g;
}

EmpiricalMeasure ParticleEnsemble::law_at(std::size_t k) const {
    std::vector<double> atoms(n_particles() * static_cast<std::size_t>(dim));
    for (std::size_t i = 0; i < n_particles(); ++i) {
        const auto x = at(i, k);
        std::copy(x.begin(), x.end(), atoms.begin() + i * static_cast<std::size_t>(dim));
    }
    return EmpiricalMeasure::uniform(dim, std::move(atoms));
}

MeasureFlow ParticleEnsemble::law_flow() const {
    std::vector<EmpiricalMeasure> ms;
    ms.reserve(n_times());
    for (std::size_t k = 0; k < n_times(); ++k) ms.push_back(law_at(k));
    return MeasureFlow(plan.time_grid, std::move(ms));
}

namespace {

// i.i.d. initial positions from gamma via inverse-CDF on the atom weights,
// one counter substream per particle.
Vec draw_initial(const EmpiricalMeasure& gamma, int n, std::uint64_t seed) {
    const int d = gamma.dim();
    std::vector<double> cdf(gamma.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < gamma.size(); ++j) {
        acc += gamma.weight(j);
        cdf[j] = acc;
    }
    cdf.back() = 1.0;
    Vec out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        CounterRng rng = init_rng(seed, static_cast<std::uint64_t>(i));
        const double u = rng.uniform();
        const std::size_t j = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const auto a = gamma.atom(std::min(j, gamma.size() - 1));
        std::copy(a.begin(), a.end(), out.begin() + static_cast<std::size_t>(i) * d);
    }
    return out;
}

enum class LawMode { frozen, mckean_vlasov };

// Shared stepping core. init holds the particle positions at time_grid[0];
// step_offset is the absolute step index of that time (the RNG substream),
// which is what makes Picard segments reuse identical increments.
ParticleEnsemble simulate_core(const CoefficientSet& coeffs, const MeasureFlow* drift_flow,
                               LawMode mode, Vec init, const SimulationPlan& plan,
                               std::size_t step_offset) {
    coeffs.validate();
    plan.validate();
    const int n = plan.n_particles;
    const int d = coeffs.dim;
    require(init.size() == static_cast<std::size_t>(n) * d, "invalid-parameter",
            "initial positions have the wrong size");
    if (mode == LawMode::frozen) {
        require(drift_flow != nullptr, "incompatible-flows", "frozen mode needs a flow");
        require(drift_flow->dim() == d, "incompatible-flows", "flow dimension mismatch");
        require(drift_flow->times().front() <= plan.time_grid.front() + 1e-12,
                "incompatible-flows", "measure flow does not cover the plan grid");
    }

    ParticleEnsemble ens{plan, d, {}, 0};
    const std::size_t nt = plan.time_grid.size();
    ens.paths.assign(static_cast<std::size_t>(n) * nt * d, 0.0);
    for (int i = 0; i < n; ++i)
        std::copy(init.begin() + static_cast<std::size_t>(i) * d,
                  init.begin() + static_cast<std::size_t>(i + 1) * d,
                  ens.paths.begin() + (static_cast<std::size_t>(i) * nt + 0) * d);

    Vec cur = std::move(init);
    Vec next(cur.size());
    std::vector<unsigned char> capped(n);

    for (std::size_t k = 0; k + 1 < nt; ++k) {
        const double t = plan.time_grid[k];
        const double dt = plan.time_grid[k + 1] - t;
        const EmpiricalMeasure self_law = EmpiricalMeasure::uniform(d, cur);
        const EmpiricalMeasure& drift_law =
            mode == LawMode::frozen ? drift_flow->at_left(t) : self_law;

        kernels::EmStepArgs args;
        args.coeffs = &coeffs;
        args.t = t;
        args.dt = dt;
        args.drift_measure = &drift_law;
        args.diffusion_measure = &self_law;
        args.seed = plan.seed;
        args.step = step_offset + k;
        args.drift_cap = plan.drift_cap_multiplier > 0.0
                             ? plan.drift_cap_multiplier * std::sqrt(coeffs.K * dt)
                             : 0.0;

        std::int64_t first_bad = -1;
        kernels::em_step(args, cur.data(), next.data(), n, capped.data(), &first_bad);
        if (first_bad >= 0)
            fail("simulation-diverged", "non-finite state at step " + std::to_string(k) +
                                            ", particle " + std::to_string(first_bad));
        for (int i = 0; i < n; ++i) ens.capped_evaluations += capped[i];

        for (int i = 0; i < n; ++i)
            std::copy(next.begin() + static_cast<std::size_t>(i) * d,
                      next.begin() + static_cast<std::size_t>(i + 1) * d,
                      ens.paths.begin() + (static_cast<std::size_t>(i) * nt + k + 1) * d);
        std::swap(cur, next);
    }
    return ens;
}

// Terminal-only variant with ping-pong buffers.
Vec simulate_terminal_core(const CoefficientSet& coeffs, const MeasureFlow* drift_flow,
                           LawMode mode, const EmpiricalMeasure& gamma,
                           const SimulationPlan& plan) {
    coeffs.validate();
    plan.validate();
    const int n = plan.n_particles;
    const int d = coeffs.dim;
    Vec cur = draw_initial(gamma, n, plan.seed);
    Vec next(cur.size());
    std::vector<unsigned char> capped(n);
    for (std::size_t k = 0; k + 1 < plan.time_grid.size(); ++k) {
        const double t = plan.time_grid[k];
        const double dt = plan.time_grid[k + 1] - t;
        const EmpiricalMeasure self_law = EmpiricalMeasure::uniform(d, cur);
        const EmpiricalMeasure& drift_law =
            mode == LawMode::frozen ? drift_flow->at_left(t) : self_law;
        kernels::EmStepArgs args;
        args.coeffs = &coeffs;
        args.t = t;
        args.dt = dt;
        args.drift_measure = &drift_law;
        args.diffusion_measure = &self_law;
        args.seed = plan.seed;
        args.step = k;
        args.drift_cap = plan.drift_cap_multiplier > 0.0
                             ? plan.drift_cap_multiplier * std::sqrt(coeffs.K * dt)
                             : 0.0;
        std::int64_t first_bad = -1;
        kernels::em_step(args, cur.data(), next.data(), n, capped.data(), &first_bad);
        if (first_bad >= 0)
            fail("simulation-diverged", "non-finite state at step " + std::to_string(k) +
                                            ", particle " + std::to_string(first_bad));
        std::swap(cur, next);
    }
    return cur;
}

} // namespace

ParticleEnsemble simulate_frozen(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                                 const EmpiricalMeasure& gamma, const SimulationPlan& plan) {
    require(gamma.dim() == coeffs.dim, "invalid-parameter", "gamma dimension mismatch");
    return simulate_core(coeffs, &mu_flow, LawMode::frozen,
                         draw_initial(gamma, plan.n_particles, plan.seed), plan, 0);
}

MeasureFlow phi_map(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                    const MeasureFlow& mu_flow, const SimulationPlan& plan) {
    return simulate_frozen(coeffs, mu_flow, gamma, plan).law_flow();
}

ParticleEnsemble simulate_mckean_vlasov(const CoefficientSet& coeffs,
                                        const EmpiricalMeasure& gamma,
                                        const SimulationPlan& plan) {
    require(gamma.dim() == coeffs.dim, "invalid-parameter", "gamma dimension mismatch");
    return simulate_core(coeffs, nullptr, LawMode::mckean_vlasov,
                         draw_initial(gamma, plan.n_particles, plan.seed), plan, 0);
}

Vec simulate_frozen_terminal(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                             const EmpiricalMeasure& gamma, const SimulationPlan& plan) {
    return simulate_terminal_core(coeffs, &mu_flow, LawMode::frozen, gamma, plan);
}

Vec simulate_mckean_vlasov_terminal(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                                    const SimulationPlan& plan) {
    return simulate_terminal_core(coeffs, nullptr, LawMode::mckean_vlasov, gamma, plan);
}

// ---------------------------------------------------------------------------
// Picard driver

namespace {

SmoothingGrid pair_grid(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double h) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < a.size(); ++i) {
        lo = std::min(lo, a.atom(i)[0]);
        hi = std::max(hi, a.atom(i)[0]);
    }
    for (std::size_t i = 0; i < b.size(); ++i) {
        lo = std::min(lo, b.atom(i)[0]);
        hi = std::max(hi, b.atom(i)[0]);
    }
    SmoothingGrid g;
    g.bandwidth = h;
    g.lo = lo - 6.0 * h;
    g.hi = hi + 6.0 * h;
    const int pts = static_cast<int>(std::ceil((g.hi - g.lo) / (h / 3.0))) + 1;
    g.points = std::clamp(pts, 129, 4097);
    return g;
}

double smoothed_flow_distance(const MeasureFlow& a, const MeasureFlow& b, double theta,
                              double h) {
    double sup = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d =
            weighted_tv_smoothed(a.measure(i), b.measure(i), theta, pair_grid(a.measure(i), b.measure(i), h));
        sup = std::max(sup, d);
    }
    return sup;
}

double silverman_over_flow(const MeasureFlow& flow) {
    double h = 0.0;
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const auto& m = flow.measure(i);
        std::vector<double> xs(m.size());
        for (std::size_t j = 0; j < m.size(); ++j) xs[j] = m.atom(j)[0];
        h = std::max(h, silverman_bandwidth(xs));
    }
    return std::max(h, 1e-3);
}

} // namespace

PicardResult picard_solve(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                          const SimulationPlan& plan, double tol, int max_iter, double t0,
                          const PicardOptions& opts) {
    coeffs.validate();
    plan.validate();
    require(t0 > 0.0, "invalid-parameter", "t0 must be positive");
    require(tol > 0.0, "invalid-parameter", "tol must be positive");
    require(max_iter >= 1, "invalid-parameter", "max_iter must be >= 1");
    require(coeffs.dim == 1, "invalid-parameter",
            "picard_solve's smoothed iterate metric is implemented for d=1");

    const auto& grid = plan.time_grid;
    const int n = plan.n_particles;
    const int d = coeffs.dim;

    // Window boundaries: maximal runs with t_end - t_start <= t0.
    std::vector<std::size_t> starts{0};
    for (std::size_t i = 0; i + 1 < grid.size();) {
        std::size_t j = i + 1;
        while (j + 1 < grid.size() && grid[j + 1] - grid[i] <= t0) ++j;
        if (j + 1 < grid.size()) starts.push_back(j);
        i = j;
    }

    Vec positions = draw_initial(gamma, n, plan.seed);
    std::vector<double> full_times{grid.front()};
    std::vector<EmpiricalMeasure> full_measures{EmpiricalMeasure::uniform(d, positions)};

    PicardResult res(MeasureFlow::constant({grid.front(), grid.back()}, full_measures[0]));
    res.t0_used = t0;
    res.segments = static_cast<int>(starts.size());
    res.converged = true;
    double bandwidth = opts.smoothing_bandwidth;

    for (std::size_t si = 0; si < starts.size(); ++si) {
        const std::size_t i0 = starts[si];
        const std::size_t i1 = (si + 1 < starts.size()) ? starts[si + 1] : grid.size() - 1;
        SimulationPlan seg_plan = plan;
        seg_plan.time_grid.assign(grid.begin() + i0, grid.begin() + i1 + 1);

        const EmpiricalMeasure start_law = EmpiricalMeasure::uniform(d, positions);
        MeasureFlow mu_prev = MeasureFlow::constant(seg_plan.time_grid, start_law);

        bool seg_converged = false;
        int iterations = 0;
        int bad_streak = 0;
        double last_d = -1.0;
        ParticleEnsemble last_ens{seg_plan, d, {}, 0};

        for (int it = 1; it <= max_iter; ++it) {
            ++iterations;
            ParticleEnsemble ens =
                simulate_core(coeffs, &mu_prev, LawMode::frozen, positions, seg_plan, i0);
            MeasureFlow mu_next = ens.law_flow();
            if (bandwidth <= 0.0) bandwidth = silverman_over_flow(mu_next);

            const double dist = smoothed_flow_distance(mu_next, mu_prev, coeffs.theta, bandwidth);
            res.iterates.push_back(dist);
            if (last_d > 0.0) {
                const double ratio = dist / last_d;
                res.contraction_ratios.push_back(ratio);
                bad_streak = (ratio >= 1.0) ? bad_streak + 1 : 0;
                if (bad_streak >= 3)
                    fail("no-contraction-detected",
                         "iterate distances are not contracting on segment " +
                             std::to_string(si) + "; try a smaller t0 (current " + fmt17(t0) +
                             ")");
            }
            last_d = dist;
            last_ens = std::move(ens);
            mu_prev = std::move(mu_next);
            if (dist < tol) {
                seg_converged = true;
                break;
            }
        }
        res.segment_iterations.push_back(iterations);
        res.converged = res.converged && seg_converged;

        // Advance: terminal positions of the last iterate start the next
        // segment; its flow extends the global one.
        const std::size_t nt = seg_plan.time_grid.size();
        for (int i = 0; i < n; ++i) {
            const auto x = last_ens.at(static_cast<std::size_t>(i), nt - 1);
            std::copy(x.begin(), x.end(), positions.begin() + static_cast<std::size_t>(i) * d);
        }
        for (std::size_t k = 1; k < nt; ++k) {
            full_times.push_back(seg_plan.time_grid[k]);
            full_measures.push_back(last_ens.law_at(k));
        }
    }

    res.flow = MeasureFlow(std::move(full_times), std::move(full_measures));
    res.bandwidth_used = bandwidth;
    return res;
}

// ---------------------------------------------------------------------------
// diagnostics

MomentReport moment_report(const ParticleEnsemble& ensemble, double theta) {
    require(theta >= 1.0, "invalid-parameter", "theta must be >= 1");
    const std::size_t n = ensemble.n_particles();
    const std::size_t nt = ensemble.n_times();
    MomentReport rep;
    rep.per_time_moments.resize(nt);
    std::vector<double> runmax(n, 0.0);
    for (std::size_t k = 0; k < nt; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = ensemble.at(i, k);
            double r2 = 0.0;
            for (double c : x) r2 += c * c;
            const double v = std::pow(1.0 + r2, 0.5 * theta);
            if (v > runmax[i]) runmax[i] = v;
            acc += runmax[i];
        }
        rep.per_time_moments[k] = acc / static_cast<double>(n);
    }
    rep.sup_moment_theta = rep.per_time_moments.back();
    rep.sup_moment_se = standard_error(runmax);

    std::vector<double> ts(nt), logm(nt);
    for (std::size_t k = 0; k < nt; ++k) {
        ts[k] = ensemble.plan.time_grid[k] - ensemble.plan.time_grid.front();
        logm[k] = std::log(rep.per_time_moments[k]);
    }
    rep.fitted_growth_rate = linear_fit(ts, logm).slope;
    return rep;
}

bool invariant_class_check(const MeasureFlow& flow, const EmpiricalMeasure& gamma, double N,
                           double theta) {
    const double bound = 2.0 * (1.0 + gamma.theta_moment(theta));
    const double s = flow.times().front();
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const double lhs = (1.0 + flow.measure(i).theta_moment(theta)) *
                           std::exp(-N * (flow.times()[i] - s));
        if (lhs > bound) return false;
    }
    return true;
}

double min_invariant_rate(const MeasureFlow& flow, const EmpiricalMeasure& gamma, double theta) {
    const double bound = 2.0 * (1.0 + gamma.theta_moment(theta));
    const double s = flow.times().front();
    double rate = 0.0;
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const double num = 1.0 + flow.measure(i).theta_moment(theta);
        const double dt = flow.times()[i] - s;
        if (dt <= 0.0) {
            if (num > bound) return std::numeric_limits<double>::infinity();
            continue;
        }
        if (num > bound) rate = std::max(rate, std::log(num / bound) / dt);
    }
    return rate;
}

// ---------------------------------------------------------------------------
// binary path dump

void save_paths(const std::string& path, const ParticleEnsemble& ensemble) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "io-error", "cannot open " + path);
    char header[32] = {0};
    std::memcpy(header, "MVLPATHS", 8);
    const std::uint32_t version = 1;
    const std::uint32_t np = static_cast<std::uint32_t>(ensemble.n_particles());
    const std::uint32_t nt = static_cast<std::uint32_t>(ensemble.n_times());
    const std::uint32_t dm = static_cast<std::uint32_t>(ensemble.dim);
    std::memcpy(header + 8, &version, 4);
    std::memcpy(header + 12, &np, 4);
    std::memcpy(header + 16, &nt, 4);
    std::memcpy(header + 20, &dm, 4);
    out.write(header, 32);
    out.write(reinterpret_cast<const char*>(ensemble.paths.data()),
              static_cast<std::streamsize>(ensemble.paths.size() * sizeof(double)));
    require(out.good(), "io-error", "write failed: " + path);
}

PathDump load_paths(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "io-error", "cannot open " + path);
    char header[32];
    in.read(header, 32);
    require(in.good() && std::memcmp(header, "MVLPATHS", 8) == 0, "io-error",
            "bad path dump header in " + path);
    PathDump d;
    std::uint32_t version = 0;
    std::memcpy(&version, header + 8, 4);
    require(version == 1, "io-error", "unsupported path dump version");
    std::memcpy(&d.n_particles, header + 12, 4);
    std::memcpy(&d.n_times, header + 16, 4);
    std::memcpy(&d.dim, header + 20, 4);
    d.data.resize(static_cast<std::size_t>(d.n_particles) * d.n_times * d.dim);
    in.read(reinterpret_cast<char*>(d.data.data()),
            static_cast<std::streamsize>(d.data.size() * sizeof(double)));
    require(in.good(), "io-error", "truncated path dump " + path);
    return d;
}

} // namespace mvlab
