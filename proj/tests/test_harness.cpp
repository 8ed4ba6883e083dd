#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <string>

#include "mvlab/errors.hpp"
#include "mvlab/harness.hpp"
#include "mvlab/io.hpp"

using namespace mvlab;
namespace fs = std::filesystem;

namespace {

std::string scratch_dir(const std::string& leaf) {
    const fs::path p = fs::temp_directory_path() / "mvlab_harness" / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string check_error_mentions(const nlohmann::json& j, const std::string& needle) {
    try {
        parse_config(j);
    } catch (const Error& e) {
        return std::string(e.what()).find(needle) != std::string::npos ? "" : e.what();
    }
    return "no error raised";
}

} // namespace

TEST_CASE("config validation rejects unknown keys and bad ranges by name") {
    CHECK(check_error_mentions({{"experiment", "moments"}, {"particels", 10}}, "particels")
              .empty());
    CHECK(check_error_mentions({{"experiment", "moments"}, {"particles", -5}}, "particles")
              .empty());
    CHECK(check_error_mentions({{"experiment", "nope"}}, "nope").empty());
    CHECK(check_error_mentions({{"experiment", "moments"}, {"grid", {{"nodes", 3}}}},
                               "grid.nodes")
              .empty());
    CHECK(check_error_mentions(
              {{"experiment", "moments"}, {"coefficients", {{"theta", 3.0}}}}, "theta")
              .empty());
    CHECK(check_error_mentions({{"experiment", "moments"}, {"tol", 0.0}}, "tol").empty());
    CHECK_NOTHROW(parse_config({{"experiment", "assumptions"}, {"preset", "brownian"}}));
}

TEST_CASE("assumptions experiment passes for presets and echoes the config") {
    const nlohmann::json j = {{"experiment", "assumptions"},
                              {"preset", "bump_drift_mu_dependent"},
                              {"seed", 5},
                              {"out_dir", scratch_dir("assumptions")}};
    ExperimentConfig c = parse_config(j);
    const ExperimentReport rep = run(c);
    CHECK(rep.exit_code == 0);
    CHECK(rep.config_echo == j);
    CHECK(fs::exists(fs::path(c.out_dir) / "assumptions.csv"));
    CHECK(fs::exists(fs::path(c.out_dir) / "report.json"));

    const auto report = nlohmann::json::parse(read_text_file(
        (fs::path(c.out_dir) / "report.json").string()));
    CHECK(report["config"] == j);
    CHECK(report["metrics"]["A1"]["pass"].get<bool>());
    CHECK(report["metrics"]["A2"]["pass"].get<bool>());
}

TEST_CASE("density_compare on brownian is exact and honors a failing budget") {
    nlohmann::json j = {{"experiment", "density_compare"},
                        {"preset", "brownian"},
                        {"M", 1},
                        {"steps", 8},
                        {"particles", 200},
                        {"out_dir", scratch_dir("density0")}};
    const ExperimentReport ok = run(parse_config(j));
    CHECK(ok.exit_code == 0);
    CHECK(ok.metrics["max_relative_error"].get<double>() < 1e-12);

    j["budget"] = 1e-30; // impossible budget: the check must report failure
    j["out_dir"] = scratch_dir("density1");
    const ExperimentReport bad = run(parse_config(j));
    CHECK(bad.exit_code == 2);
}

TEST_CASE("zvonkin gate experiment passes at lambda 0 for zero drift") {
    const nlohmann::json j = {{"experiment", "zvonkin_gate"},
                              {"preset", "brownian"},
                              {"grid", {{"space_nodes", 101}, {"time_steps", 100}}},
                              {"out_dir", scratch_dir("gate")}};
    const ExperimentReport rep = run(parse_config(j));
    CHECK(rep.exit_code == 0);
    CHECK(rep.metrics["lambda_star"].get<double>() == 0.0);
    CHECK(rep.metrics["gate"]["pass"].get<bool>());
}

TEST_CASE("reproducibility: byte-identical CSV payloads across worker counts") {
    auto run_with = [&](int workers, const std::string& leaf) {
        const nlohmann::json j = {{"experiment", "moments"},
                                  {"preset", "bump_drift_mu_dependent"},
                                  {"particles", 2000},
                                  {"steps", 40},
                                  {"seed", 33},
                                  {"workers", workers},
                                  {"out_dir", scratch_dir(leaf)}};
        const ExperimentConfig c = parse_config(j);
        const ExperimentReport rep = run(c);
        REQUIRE(rep.exit_code == 0);
        return read_text_file((fs::path(c.out_dir) / "moments.csv").string());
    };
    const std::string w1 = run_with(1, "m1");
    const std::string w2 = run_with(2, "m2");
    const std::string w8 = run_with(8, "m8");
    CHECK(w1 == w2);
    CHECK(w1 == w8);
}

TEST_CASE("moments experiment reports finite, stable estimates") {
    const nlohmann::json j = {{"experiment", "moments"},
                              {"preset", "singular_envelope_1d"},
                              {"particles", 4000},
                              {"steps", 50},
                              {"seed", 71},
                              {"out_dir", scratch_dir("moments")}};
    const ExperimentReport rep = run(parse_config(j));
    CHECK(rep.exit_code == 0);
    CHECK(rep.metrics["stable_under_doubling"].get<bool>());
    CHECK(rep.metrics["sup_moment"].get<double>() > 1.0);
    CHECK(std::isfinite(rep.metrics["fitted_growth_rate"].get<double>()));
}

TEST_CASE("preset catalog is exposed through the harness") {
    const auto presets = list_presets();
    CHECK(presets.size() >= 5);
    bool found = false;
    for (const auto& [name, desc] : presets) found = found || name == "bump_drift_mu_dependent";
    CHECK(found);
}
