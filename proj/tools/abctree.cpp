// Command-line front end:
//   abctree run <config> [--seed N] [--budget N] [--out DIR] [--set key=value]...
//   abctree compare <dir>... [--out DIR]
// Exit status: 0 ok, 1 other failure, 2 invalid config, 3 simulator failure, 4 I/O failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "abctree/experiment.hpp"
#include "abctree/log.hpp"

namespace {

int run_command(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::size_t> budget,
                std::optional<std::string> out, const std::vector<std::string>& overrides) {
    using namespace abctree;
    json j = load_config_json(config_path);
    for (const auto& o : overrides) apply_override(j, o);
    if (seed) j["seeds"] = json::array({*seed});
    if (budget) j["budget"] = *budget;
    if (out) j["output"] = *out;
    const auto config = parse_config(j);

    for (auto s : config.seeds) {
        const auto dir = seed_dir(config.output, s);
        log::info("running " + std::string(algorithm_name(config.algorithm)) + " on " + model_label(config) +
                  ", seed " + std::to_string(s));
        const auto result = run_seed(config, s, dir);
        std::cout << dir.string() << ": " << result.table.size() << " simulations\n";
    }
    return 0;
}

int compare_command(const std::vector<std::string>& dirs, const std::string& out) {
    std::vector<abctree::fs::path> paths(dirs.begin(), dirs.end());
    const auto res = abctree::compare_runs(paths, out, std::cout);
    std::cout << "wrote " << (abctree::fs::path(out) / "comparison.csv").string() << " (" << res.rows << " rows) and "
              << (abctree::fs::path(out) / "summary.csv").string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ABC-Tree likelihood-free inference"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> budget;
    std::optional<std::string> out;
    std::vector<std::string> overrides;
    run->add_option("config", config_path, "Config file (or a manifest.json from an earlier run)")->required();
    run->add_option("--seed", seed, "Run only this seed");
    run->add_option("--budget", budget, "Global simulation budget");
    run->add_option("--out", out, "Output directory");
    run->add_option("--set", overrides, "Override a dotted config path, e.g. partitioner.kind=dyadic");

    auto* cmp = app.add_subcommand("compare", "Compare completed runs");
    std::vector<std::string> dirs;
    std::string cmp_out = ".";
    cmp->add_option("dirs", dirs, "Run directories")->required();
    cmp->add_option("--out", cmp_out, "Where to write comparison.csv and summary.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return run_command(config_path, seed, budget, out, overrides);
        return compare_command(dirs, cmp_out);
    } catch (const abctree::ConfigError& e) {
        abctree::log::error(std::string("config error: ") + e.what());
        return 2;
    } catch (const abctree::SimulatorError& e) {
        abctree::log::error(std::string("simulator failure: ") + e.what());
        return 3;
    } catch (const abctree::IoError& e) {
        abctree::log::error(std::string("I/O failure: ") + e.what());
        return 4;
    } catch (const std::exception& e) {
        abctree::log::error(e.what());
        return 1;
    }
}
