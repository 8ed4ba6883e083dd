#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace mvlab {

// One experiment run, parsed from the structured config file. Unknown keys
// and out-of-range values are rejected with the offending key's name.
struct ExperimentConfig {
    std::string experiment; // contraction | density_compare | bounds | moments |
                            // zvonkin_gate | assumptions
    std::string preset = "brownian";
    int particles = 10000;
    int steps = 100;
    std::uint64_t seed = 1;
    double t0 = 0.2;
    double tol = 1e-3;
    int max_iter = 25;
    int M = 3;
    int workers = 0;
    long mc_particles = 1000000;
    double lambda_max = 64.0;
    int grid_space_nodes = 401;
    int grid_time_steps = 200;
    double budget = 0.0; // 0 = experiment default
    std::string out_dir = "out";
    // optional coefficient constant overrides (K, p, q, horizon)
    double override_K = 0.0, override_p = 0.0, override_q = 0.0, override_horizon = 0.0;

    nlohmann::json echo; // the exact input object
};

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

struct ExperimentReport {
    nlohmann::json config_echo;
    nlohmann::json metrics;
    nlohmann::json provenance;
    std::vector<std::string> artifacts;
    int exit_code = 0; // 0 pass, 2 failed gate/check
};

// Dispatches to the module operations, writes CSV/JSON artifacts under
// out_dir, echoes the config, returns the report.
ExperimentReport run(const ExperimentConfig& config);

// Stable preset catalog (name, description).
std::vector<std::pair<std::string, std::string>> list_presets();

inline const char* version_string() { return "mvlab 0.1.0"; }

} // namespace mvlab
