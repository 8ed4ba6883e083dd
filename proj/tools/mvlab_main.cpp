#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvlab/errors.hpp"
#include "mvlab/harness.hpp"
#include "mvlab/io.hpp"

namespace {

// --set key=value, with dotted keys for nested objects (grid.space_nodes=801).
void apply_override(nlohmann::json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    mvlab::require(eq != std::string::npos, "invalid-config",
                   "--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw; // plain string
    }
    std::string pointer = "/" + key;
    for (auto& c : pointer)
        if (c == '.') c = '/';
    j[nlohmann::json::json_pointer(pointer)] = value;
}

std::string resolve_out_dir(const std::string& configured, const std::string& cli_override) {
    if (!cli_override.empty()) return cli_override;
    const char* root = std::getenv("MVLAB_OUT");
    if (root != nullptr && !std::filesystem::path(configured).is_absolute())
        return (std::filesystem::path(root) / configured).string();
    return configured;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mvlab: a stochastic-numerics laboratory for distribution-dependent SDEs"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    std::vector<std::string> overrides;

    auto* cmd_run = app.add_subcommand("run", "run an experiment from a config file");
    cmd_run->add_option("config", config_path, "config JSON file")->required();
    cmd_run->add_option("--out", out_override, "output directory (overrides the config)");
    cmd_run->add_option("--set", overrides, "override a config key, key=value (repeatable)");

    app.add_subcommand("presets", "list built-in coefficient presets");

    auto* cmd_validate = app.add_subcommand("validate", "validate a config file and exit");
    cmd_validate->add_option("config", config_path, "config JSON file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("presets")) {
            for (const auto& [name, desc] : mvlab::list_presets())
                std::cout << name << "\t" << desc << "\n";
            return 0;
        }
        if (app.got_subcommand("validate")) {
            mvlab::load_config(config_path);
            std::cout << "ok\n";
            return 0;
        }
        // run
        nlohmann::json j = nlohmann::json::parse(mvlab::read_text_file(config_path));
        for (const auto& kv : overrides) apply_override(j, kv);
        mvlab::ExperimentConfig config = mvlab::parse_config(j);
        config.out_dir = resolve_out_dir(config.out_dir, out_override);
        config.echo = j;

        const mvlab::ExperimentReport rep = mvlab::run(config);
        std::cout << "experiment: " << config.experiment << " (preset " << config.preset
                  << ")\n";
        std::cout << "metrics: " << rep.metrics.dump() << "\n";
        for (const auto& a : rep.artifacts) std::cout << "wrote " << a << "\n";
        std::cout << (rep.exit_code == 0 ? "PASS" : "FAIL") << "\n";
        return rep.exit_code;
    } catch (const mvlab::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
