// ibmd <command> --config <path> [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 1 failed check or other error, 2 config, 3 numerical
// divergence, 4 I/O. Errors are printed to stderr as one JSON object.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "acceptance/criteria.hpp"

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
    nlohmann::ordered_json j;
    j["error"] = {{"kind", kind}, {"message", message}, {"exit_code", code}};
    std::cerr << j.dump() << std::endl;
    return code;
}

ibmd::ExperimentConfig resolve(const std::string& path, std::optional<std::uint64_t> seed,
                               std::optional<std::string> out) {
    ibmd::ExperimentConfig cfg = ibmd::load_config(path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.output_dir = *out;
    return cfg;
}

int run_scenario(const std::string& name, std::optional<std::uint64_t> seed, const std::string& out) {
    using namespace ibmd::acceptance;
    Context ctx;
    ctx.out_root = out;
    ctx.seed = seed;
    bool found = false, ok = true;
    for (const auto& [id, fn] : criteria()) {
        if (name != "all" && name != id) continue;
        found = true;
        const Outcome o = fn(ctx);
        ok = ok && o.passed;
        std::cout << format_line(o) << std::endl;
    }
    if (!found) throw ibmd::ConfigError("unknown scenario '" + name + "' (expected c1..c12 or all)");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bridge-model distillation experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::string command;

    for (const char* name : {"train-teacher", "distill", "eval", "verify-identity", "config"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the root seed");
        sub->add_option("--out", out, "Override the output directory");
        sub->callback([&command, name] { command = name; });
    }

    std::string scenario;
    std::string scenario_out = "scenarios";
    bool print_config = false;
    CLI::App* sc = app.add_subcommand("scenario", "Run an acceptance criterion (c1..c12, or all)");
    sc->add_option("name", scenario)->required();
    sc->add_option("--seed", seed, "Override the root seed");
    sc->add_option("--out", scenario_out, "Root directory for scenario outputs");
    sc->add_flag("--print-config", print_config, "Print the scenario's config instead of running it");
    sc->callback([&command] { command = "scenario"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        if (command == "scenario") {
            if (print_config) {
                const auto& cfgs = ibmd::acceptance::scenario_configs();
                const auto it = cfgs.find(scenario);
                if (it == cfgs.end()) throw ibmd::ConfigError("scenario '" + scenario + "' has no config file");
                std::cout << ibmd::to_json(ibmd::parse_config(it->second)).dump(2) << std::endl;
                return 0;
            }
            return run_scenario(scenario, seed, scenario_out);
        }
        const ibmd::ExperimentConfig cfg = resolve(config_path, seed, out);
        if (command == "config") {
            ibmd::validate(cfg);
            std::cout << ibmd::to_json(cfg).dump(2) << std::endl;
            return 0;
        }
        const ibmd::RunResult r = ibmd::run_command(ibmd::command_from_string(command), cfg);
        nlohmann::ordered_json summary;
        summary["status"] = r.passed ? "ok" : "check_failed";
        summary["command"] = command;
        summary["output_dir"] = cfg.output_dir;
        summary["metrics"] = r.metrics;
        std::cout << summary.dump(2) << std::endl;
        if (command == "verify-identity" && !r.passed) return 1;
        return 0;
    } catch (const ibmd::ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const ibmd::NumericalError& e) {
        return fail("numerical", e.what(), 3);
    } catch (const std::ios_base::failure& e) {
        return fail("io", e.what(), 4);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
}
