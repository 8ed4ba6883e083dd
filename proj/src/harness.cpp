#include "mvlab/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "mvlab/coefficients.hpp"
#include "mvlab/errors.hpp"
#include "mvlab/io.hpp"
#include "mvlab/kernels.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/parametrix.hpp"
#include "mvlab/simulator.hpp"
#include "mvlab/stats.hpp"
#include "mvlab/zvonkin.hpp"

namespace mvlab {

namespace {

const std::vector<std::string> kExperiments = {"contraction", "density_compare", "bounds",
                                               "moments",     "zvonkin_gate",    "assumptions"};

void check_range(bool ok, const std::string& key) {
    require(ok, "invalid-config", "config key '" + key + "' is out of range");
}

} // namespace

ExperimentConfig parse_config(const nlohmann::json& j) {
    require(j.is_object(), "invalid-config", "config must be a JSON object");
    static const std::vector<std::string> known = {
        "experiment", "preset",     "particles",    "steps",       "seed",
        "t0",         "tol",        "max_iter",     "M",           "workers",
        "mc_particles", "lambda_max", "grid",       "budget",      "out_dir",
        "coefficients"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            fail("invalid-config", "unknown config key '" + key + "'");
    }

    ExperimentConfig c;
    c.echo = j;
    require(j.contains("experiment") && j["experiment"].is_string(), "invalid-config",
            "config key 'experiment' is required");
    c.experiment = j["experiment"].get<std::string>();
    require(std::find(kExperiments.begin(), kExperiments.end(), c.experiment) !=
                kExperiments.end(),
            "invalid-config", "unknown experiment '" + c.experiment + "'");

    auto get_int = [&](const char* key, int& slot, long lo, long hi) {
        if (!j.contains(key)) return;
        require(j[key].is_number_integer(), "invalid-config",
                std::string("config key '") + key + "' must be an integer");
        const long v = j[key].get<long>();
        check_range(v >= lo && v <= hi, key);
        slot = static_cast<int>(v);
    };
    auto get_num = [&](const char* key, double& slot, double lo, double hi) {
        if (!j.contains(key)) return;
        require(j[key].is_number(), "invalid-config",
                std::string("config key '") + key + "' must be a number");
        const double v = j[key].get<double>();
        check_range(std::isfinite(v) && v >= lo && v <= hi, key);
        slot = v;
    };

    if (j.contains("preset")) c.preset = j["preset"].get<std::string>();
    get_int("particles", c.particles, 1, 100000000L);
    get_int("steps", c.steps, 1, 10000000L);
    if (j.contains("seed")) {
        require(j["seed"].is_number_integer(), "invalid-config", "'seed' must be an integer");
        c.seed = j["seed"].get<std::uint64_t>();
    }
    get_num("t0", c.t0, 1e-9, 1e9);
    get_num("tol", c.tol, 0.0, 1e9);
    check_range(c.tol > 0.0, "tol");
    get_int("max_iter", c.max_iter, 1, 10000);
    get_int("M", c.M, 0, 8);
    get_int("workers", c.workers, 0, 256);
    if (j.contains("mc_particles")) {
        require(j["mc_particles"].is_number_integer(), "invalid-config",
                "'mc_particles' must be an integer");
        const long v = j["mc_particles"].get<long>();
        check_range(v >= 100 && v <= 200000000L, "mc_particles");
        c.mc_particles = v;
    }
    get_num("lambda_max", c.lambda_max, 0.0, 1e12);
    get_num("budget", c.budget, 0.0, 1e12);
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();

    if (j.contains("grid")) {
        const auto& g = j["grid"];
        require(g.is_object(), "invalid-config", "'grid' must be an object");
        for (const auto& [key, _] : g.items())
            require(key == "space_nodes" || key == "time_steps", "invalid-config",
                    "unknown config key 'grid." + key + "'");
        if (g.contains("space_nodes")) {
            const long v = g["space_nodes"].get<long>();
            check_range(v >= 11 && v <= 100001, "grid.space_nodes");
            c.grid_space_nodes = static_cast<int>(v);
        }
        if (g.contains("time_steps")) {
            const long v = g["time_steps"].get<long>();
            check_range(v >= 2 && v <= 1000000, "grid.time_steps");
            c.grid_time_steps = static_cast<int>(v);
        }
    }
    if (j.contains("coefficients")) {
        const auto& o = j["coefficients"];
        require(o.is_object(), "invalid-config", "'coefficients' must be an object");
        for (const auto& [key, _] : o.items())
            require(key == "K" || key == "p" || key == "q" || key == "horizon",
                    "invalid-config",
                    "unknown config key 'coefficients." + key +
                        "' (theta is preset-fixed: the callables close over it)");
        if (o.contains("K")) c.override_K = o["K"].get<double>();
        if (o.contains("p")) c.override_p = o["p"].get<double>();
        if (o.contains("q")) c.override_q = o["q"].get<double>();
        if (o.contains("horizon")) c.override_horizon = o["horizon"].get<double>();
    }
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail("invalid-config", std::string("cannot parse config: ") + e.what());
    }
    return parse_config(j);
}

std::vector<std::pair<std::string, std::string>> list_presets() { return preset_catalog(); }

// ---------------------------------------------------------------------------
// experiment bodies

namespace {

CoefficientSet configured_coeffs(const ExperimentConfig& c) {
    CoefficientSet coeffs = preset(c.preset);
    if (c.override_K > 0.0) coeffs.K = c.override_K;
    if (c.override_p > 0.0) coeffs.p = c.override_p;
    if (c.override_q > 0.0) coeffs.q = c.override_q;
    if (c.override_horizon > 0.0) coeffs.horizon = c.override_horizon;
    coeffs.validate();
    return coeffs;
}

EmpiricalMeasure default_gamma(const CoefficientSet& coeffs) {
    return EmpiricalMeasure::dirac(Vec(static_cast<std::size_t>(coeffs.dim), 0.0));
}

SimulationPlan make_plan(const ExperimentConfig& c, const CoefficientSet& coeffs) {
    SimulationPlan plan;
    plan.n_particles = c.particles;
    plan.time_grid = SimulationPlan::uniform_grid(0.0, coeffs.horizon, c.steps);
    plan.seed = c.seed;
    return plan;
}

std::string csv_path(const ExperimentConfig& c, const std::string& name) {
    return (std::filesystem::path(c.out_dir) / name).string();
}

void experiment_contraction(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    const SimulationPlan plan = make_plan(c, coeffs);
    bool contraction_failed = false;
    std::string failure;
    try {
        const PicardResult res =
            picard_solve(coeffs, default_gamma(coeffs), plan, c.tol, c.max_iter, c.t0);
        std::ostringstream csv;
        csv << "iteration,distance,ratio\n";
        for (std::size_t i = 0; i < res.iterates.size(); ++i) {
            csv << i << "," << fmt17(res.iterates[i]) << ",";
            if (i > 0 && i - 1 < res.contraction_ratios.size())
                csv << fmt17(res.contraction_ratios[i - 1]);
            csv << "\n";
        }
        const std::string path = csv_path(c, "iterates.csv");
        write_text_file(path, csv.str());
        rep.artifacts.push_back(path);

        rep.metrics["converged"] = res.converged;
        rep.metrics["segments"] = res.segments;
        rep.metrics["t0_used"] = res.t0_used;
        rep.metrics["bandwidth"] = res.bandwidth_used;
        rep.metrics["iterations_per_segment"] = res.segment_iterations;
        rep.metrics["iterate_distances"] = res.iterates;
        rep.metrics["contraction_ratios"] = res.contraction_ratios;
        if (!res.converged) rep.exit_code = 2;
    } catch (const Error& e) {
        if (e.code() != "no-contraction-detected") throw;
        contraction_failed = true;
        failure = e.what();
    }
    if (contraction_failed) {
        rep.metrics["converged"] = false;
        rep.metrics["failure"] = failure;
        rep.exit_code = 2;
    }
}

void experiment_density_compare(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    require(coeffs.dim == 1, "invalid-config", "density_compare presets must be 1-D");
    const EmpiricalMeasure gamma = default_gamma(coeffs);
    const double s = 0.0, t = coeffs.horizon;

    // Flows for the kernel: the Picard fixed point for measure-dependent
    // presets, a constant flow otherwise.
    SimulationPlan plan = make_plan(c, coeffs);
    const MeasureFlow flow = [&] {
        if (c.preset == "brownian" || c.preset == "constant_drift")
            return MeasureFlow::constant(plan.time_grid, gamma);
        return picard_solve(coeffs, gamma, plan, c.tol, c.max_iter, c.t0).flow;
    }();

    const Vec x0{0.0};
    const double spread = std::sqrt(coeffs.K * (t - s));
    const int n_probe = 20;
    const KernelGrid grid = KernelGrid::for_dim(1);

    std::vector<double> zs(n_probe), series(n_probe), refvals(n_probe), ses(n_probe);
    const bool exact_mode = (c.preset == "brownian" || c.preset == "constant_drift");

    Vec terminal;
    double kde_h = 0.0;
    if (!exact_mode) {
        SimulationPlan mc_plan = plan;
        mc_plan.n_particles = static_cast<int>(c.mc_particles);
        terminal = simulate_frozen_terminal(coeffs, flow, gamma, mc_plan);
        kde_h = 0.01 * std::max(1.0, spread);
    }

    for (int i = 0; i < n_probe; ++i) {
        // probe grid: drift-shifted center plus +-2.5 widths
        const double center = (c.preset == "constant_drift") ? (t - s) : 0.0;
        zs[i] = center - 2.5 * spread + 5.0 * spread * i / (n_probe - 1);
        const ParametrixResult pr =
            parametrix_density(coeffs, flow, flow, x0, Vec{zs[i]}, s, t, c.M, grid);
        series[i] = pr.value;
    }
    if (exact_mode) {
        for (int i = 0; i < n_probe; ++i) {
            const double drift = (c.preset == "constant_drift") ? (t - s) : 0.0;
            const double var = t - s;
            const double w = zs[i] - drift;
            refvals[i] = std::exp(-0.5 * w * w / var) / std::sqrt(2.0 * M_PI * var);
            ses[i] = 0.0;
        }
    } else {
        std::vector<double> out(n_probe);
        kernels::kde_eval(terminal, kde_h, zs, out);
        for (int i = 0; i < n_probe; ++i) {
            refvals[i] = out[i];
            // Gaussian-kernel KDE variance: p(x) R(K) / (n h), R(K)=1/(2 sqrt(pi))
            ses[i] = std::sqrt(std::max(out[i], 1e-12) / (2.0 * std::sqrt(M_PI) *
                                                          static_cast<double>(terminal.size()) *
                                                          kde_h));
        }
    }

    std::ostringstream csv;
    csv << "z,series,reference,abs_error,reference_se\n";
    double max_rel = 0.0;
    int within = 0;
    for (int i = 0; i < n_probe; ++i) {
        const double err = std::abs(series[i] - refvals[i]);
        if (refvals[i] > 1e-12) max_rel = std::max(max_rel, err / refvals[i]);
        if (!exact_mode && err <= 3.0 * ses[i]) ++within;
        csv << fmt17(zs[i]) << "," << fmt17(series[i]) << "," << fmt17(refvals[i]) << ","
            << fmt17(err) << "," << fmt17(ses[i]) << "\n";
    }
    const std::string path = csv_path(c, "density.csv");
    write_text_file(path, csv.str());
    rep.artifacts.push_back(path);

    if (exact_mode) {
        const double budget = c.budget > 0.0 ? c.budget : 1e-3;
        rep.metrics["max_relative_error"] = max_rel;
        rep.metrics["budget"] = budget;
        if (max_rel > budget) rep.exit_code = 2;
    } else {
        const double budget = c.budget > 0.0 ? c.budget : 0.9;
        rep.metrics["fraction_within_3se"] =
            static_cast<double>(within) / static_cast<double>(n_probe);
        rep.metrics["budget"] = budget;
        if (within < budget * n_probe) rep.exit_code = 2;
    }
    rep.metrics["probes"] = n_probe;
    rep.metrics["M"] = c.M;
}

void experiment_bounds(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    SimulationPlan plan = make_plan(c, coeffs);
    plan.n_particles = std::min(plan.n_particles, 2000);

    const EmpiricalMeasure g0 = default_gamma(coeffs);
    const EmpiricalMeasure g1 = EmpiricalMeasure::dirac(Vec(static_cast<std::size_t>(coeffs.dim), 0.7));
    const MeasureFlow mu_flow = MeasureFlow::constant(plan.time_grid, g0);
    const MeasureFlow nu_flow = MeasureFlow::constant(plan.time_grid, g1);
    const MeasureFlow phi_mu = phi_map(coeffs, g0, mu_flow, plan);
    const MeasureFlow phi_nu = phi_map(coeffs, g1, nu_flow, plan);

    BoundProbeSpec spec;
    spec.seed = c.seed;
    spec.t_hi = std::min(0.5, coeffs.horizon);
    const BoundReport bounds = verify_bounds(coeffs, mu_flow, nu_flow, phi_mu, phi_nu, spec);

    std::ostringstream csv;
    csv << "name,worst_constant,budget,pass,probes,noise\n";
    nlohmann::json arr = nlohmann::json::array();
    bool all = true;
    for (const auto& b : bounds) {
        csv << b.name << "," << fmt17(b.worst_constant) << "," << fmt17(b.budget) << ","
            << (b.pass ? 1 : 0) << "," << b.probes_used << "," << fmt17(b.noise) << "\n";
        arr.push_back({{"name", b.name},
                       {"worst_constant", b.worst_constant},
                       {"budget", b.budget},
                       {"pass", b.pass},
                       {"probes", b.probes_used},
                       {"noise", b.noise}});
        all = all && b.pass;
    }
    const std::string path = csv_path(c, "bounds.csv");
    write_text_file(path, csv.str());
    rep.artifacts.push_back(path);
    rep.metrics["bounds"] = arr;
    if (!all) rep.exit_code = 2;
}

void experiment_moments(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    const EmpiricalMeasure gamma = default_gamma(coeffs);

    SimulationPlan plan = make_plan(c, coeffs);
    const ParticleEnsemble ens = simulate_mckean_vlasov(coeffs, gamma, plan);
    const MomentReport m1 = moment_report(ens, coeffs.theta);

    SimulationPlan plan2 = plan;
    plan2.n_particles = 2 * plan.n_particles;
    plan2.seed = plan.seed + 1;
    const MomentReport m2 =
        moment_report(simulate_mckean_vlasov(coeffs, gamma, plan2), coeffs.theta);

    std::ostringstream csv;
    csv << "t,running_max_moment\n";
    for (std::size_t k = 0; k < m1.per_time_moments.size(); ++k)
        csv << fmt17(plan.time_grid[k]) << "," << fmt17(m1.per_time_moments[k]) << "\n";
    const std::string path = csv_path(c, "moments.csv");
    write_text_file(path, csv.str());
    rep.artifacts.push_back(path);

    const double se = std::sqrt(m1.sup_moment_se * m1.sup_moment_se +
                                m2.sup_moment_se * m2.sup_moment_se);
    const bool finite = std::isfinite(m1.sup_moment_theta) && std::isfinite(m2.sup_moment_theta);
    const bool stable = std::abs(m1.sup_moment_theta - m2.sup_moment_theta) <= 4.0 * se;
    rep.metrics["sup_moment"] = m1.sup_moment_theta;
    rep.metrics["sup_moment_se"] = m1.sup_moment_se;
    rep.metrics["sup_moment_doubled"] = m2.sup_moment_theta;
    rep.metrics["fitted_growth_rate"] = m1.fitted_growth_rate;
    rep.metrics["capped_evaluations"] = ens.capped_evaluations;
    rep.metrics["stable_under_doubling"] = stable;
    if (!finite || !stable) rep.exit_code = 2;
}

void experiment_zvonkin_gate(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    require(coeffs.dim == 1, "invalid-config", "zvonkin_gate needs a 1-D preset");
    const EmpiricalMeasure gamma = default_gamma(coeffs);
    SimulationPlan plan = make_plan(c, coeffs);
    const MeasureFlow flow = MeasureFlow::constant(plan.time_grid, gamma);

    GridSpec grid;
    grid.space_nodes = c.grid_space_nodes;
    grid.time_steps = c.grid_time_steps;

    bool ok = true;
    double lambda_star = 0.0;
    std::string failure;
    try {
        lambda_star = lambda_search(coeffs, flow, flow, grid, c.lambda_max);
    } catch (const Error& e) {
        if (e.code() != "no-admissible-lambda") throw;
        ok = false;
        failure = e.what();
    }
    if (ok) {
        const ZvonkinSolution sol = solve_backward_pde(coeffs, flow, flow, lambda_star, grid);
        const GateReport gate = regularity_gate(sol);
        std::ostringstream csv;
        csv << "t,x,u\n";
        const int xstride = std::max(1, static_cast<int>(sol.xs.size()) / 101);
        const int tstride = std::max(1, static_cast<int>(sol.ts.size()) / 51);
        for (std::size_t k = 0; k < sol.ts.size(); k += tstride)
            for (std::size_t i = 0; i < sol.xs.size(); i += xstride)
                csv << fmt17(sol.ts[k]) << "," << fmt17(sol.xs[i]) << ","
                    << fmt17(sol.value(k, i)) << "\n";
        const std::string path = csv_path(c, "solution.csv");
        write_text_file(path, csv.str());
        rep.artifacts.push_back(path);

        nlohmann::json gj = {{"lambda", gate.lambda},
                             {"sup_u", gate.sup_u},
                             {"sup_du", gate.sup_du},
                             {"d2u_localized_norm", gate.sup_d2u_norm},
                             {"pass", gate.pass}};
        const std::string gpath = csv_path(c, "gate.json");
        write_text_file(gpath, gj.dump(2) + "\n");
        rep.artifacts.push_back(gpath);
        rep.metrics["gate"] = gj;
        rep.metrics["lambda_star"] = lambda_star;
        if (!gate.pass) rep.exit_code = 2;
    } else {
        rep.metrics["failure"] = failure;
        rep.exit_code = 2;
    }
}

void experiment_assumptions(const ExperimentConfig& c, ExperimentReport& rep) {
    const CoefficientSet coeffs = configured_coeffs(c);
    SamplePlan plan;
    plan.seed = c.seed;
    plan.n_probes = std::max(16, std::min(c.particles, 256));
    const AssumptionReport a1 = verify_A1(coeffs, plan);
    const AssumptionReport a2 = verify_A2(coeffs, plan);

    std::ostringstream csv;
    csv << "clause,value,pass\n";
    csv << "sigma_norm_sq," << fmt17(a1.max_sigma_norm_sq) << "," << a1.pass.at("bounded")
        << "\n";
    csv << "inverse_norm," << fmt17(a1.max_inv_norm) << "," << a1.pass.at("inverse_bounded")
        << "\n";
    csv << "lipschitz_x," << fmt17(a1.lipschitz_x_ratio) << "," << a1.pass.at("lipschitz")
        << "\n";
    csv << "lipschitz_measure," << fmt17(a1.lipschitz_measure_ratio) << ","
        << a1.pass.at("lipschitz") << "\n";
    csv << "mixed," << fmt17(a1.mixed_ratio) << "," << a1.pass.at("mixed") << "\n";
    csv << "drift_envelope," << fmt17(a2.drift_envelope_ratio) << "," << a2.pass.at("growth")
        << "\n";
    csv << "drift_tv_lipschitz," << fmt17(a2.drift_tv_lipschitz_ratio) << ","
        << a2.pass.at("tv_lipschitz") << "\n";
    const std::string path = csv_path(c, "assumptions.csv");
    write_text_file(path, csv.str());
    rep.artifacts.push_back(path);

    rep.metrics["A1"] = {{"max_sigma_norm_sq", a1.max_sigma_norm_sq},
                         {"max_inv_norm", a1.max_inv_norm},
                         {"lipschitz_x_ratio", a1.lipschitz_x_ratio},
                         {"lipschitz_measure_ratio", a1.lipschitz_measure_ratio},
                         {"mixed_ratio", a1.mixed_ratio},
                         {"pass", a1.all_pass()}};
    rep.metrics["A2"] = {{"drift_envelope_ratio", a2.drift_envelope_ratio},
                         {"drift_tv_lipschitz_ratio", a2.drift_tv_lipschitz_ratio},
                         {"pass", a2.all_pass()}};
    if (!a1.all_pass() || !a2.all_pass()) rep.exit_code = 2;
}

} // namespace

ExperimentReport run(const ExperimentConfig& config) {
    const auto t_start = std::chrono::steady_clock::now();
    parallel::set_workers(config.workers);
    std::filesystem::create_directories(config.out_dir);

    ExperimentReport rep;
    rep.config_echo = config.echo;

    if (config.experiment == "contraction")
        experiment_contraction(config, rep);
    else if (config.experiment == "density_compare")
        experiment_density_compare(config, rep);
    else if (config.experiment == "bounds")
        experiment_bounds(config, rep);
    else if (config.experiment == "moments")
        experiment_moments(config, rep);
    else if (config.experiment == "zvonkin_gate")
        experiment_zvonkin_gate(config, rep);
    else if (config.experiment == "assumptions")
        experiment_assumptions(config, rep);
    else
        fail("invalid-config", "unknown experiment '" + config.experiment + "'");

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    rep.provenance = {{"seed", config.seed},
                      {"version", version_string()},
                      {"workers", config.workers},
                      {"wall_time_s", wall}};

    nlohmann::json report = {{"config", rep.config_echo},
                             {"metrics", rep.metrics},
                             {"provenance", rep.provenance},
                             {"exit_code", rep.exit_code}};
    const std::string rpath =
        (std::filesystem::path(config.out_dir) / "report.json").string();
    write_text_file(rpath, report.dump(2) + "\n");
    rep.artifacts.push_back(rpath);
    return rep;
}

} // namespace mvlab
