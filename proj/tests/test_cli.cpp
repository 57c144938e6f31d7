#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "abctree/experiment.hpp"

using namespace abctree;

namespace {

struct Outcome {
    int status = -1;
    std::string err;
};

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("abctree_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

Outcome cli(const std::string& args, const fs::path& work) {
    const auto err = work / "stderr.txt";
    const std::string cmd = quote(ABCTREE_CLI_PATH) + " " + args + " > " + quote((work / "stdout.txt").string()) +
                            " 2> " + quote(err.string());
    const int raw = std::system(cmd.c_str());
    Outcome o;
    o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    o.err = slurp(err);
    return o;
}

fs::path write_config(const fs::path& dir, const json& j) {
    const auto p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

json rejection_mixture(const fs::path& out) {
    return {{"model", "mixture_2d"},
            {"algorithm", "rejection"},
            {"epsilon", {{"initial", 1.0}}},
            {"budget", 3000},
            {"seeds", {7}},
            {"output", out.string()}};
}

std::size_t data_rows(const fs::path& csv) {
    std::ifstream in(csv);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    return n == 0 ? 0 : n - 1;
}

std::string config_path(const std::string& name) { return (fs::path(ABCTREE_SOURCE_DIR) / "configs" / name).string(); }

}  // namespace

TEST_CASE("rejection on the 2D mixture is byte-identical across runs") {
    const auto w = scratch("determinism");
    const auto a = w / "a";
    const auto b = w / "b";
    REQUIRE(cli("run " + quote(write_config(w, rejection_mixture(a)).string()), w).status == 0);
    REQUIRE(cli("run " + quote(write_config(w, rejection_mixture(a)).string()) + " --out " + quote(b.string()), w).status == 0);
    for (const char* f : {"trials.csv", "samples.csv"}) {
        const auto x = slurp(a / "seed_7" / f);
        CHECK(!x.empty());
        CHECK(x == slurp(b / "seed_7" / f));
    }
    CHECK(data_rows(a / "seed_7" / "trials.csv") == 3000);
    const auto manifest = read_json_file(a / "seed_7" / "manifest.json");
    CHECK(manifest["summary"]["simulations"] == 3000);
    CHECK(manifest["seed"] == 7);
    for (const char* f : {"posterior.json", "partition.json", "metrics.csv"}) CHECK(fs::exists(a / "seed_7" / f));
}

TEST_CASE("manifest reruns the experiment exactly") {
    const auto w = scratch("manifest");
    auto cfg = rejection_mixture(w / "first");
    cfg["algorithm"] = "abc-tree";
    cfg["quota"] = 200;
    REQUIRE(cli("run " + quote(write_config(w, cfg).string()), w).status == 0);
    const auto first = w / "first" / "seed_7";
    REQUIRE(cli("run " + quote((first / "manifest.json").string()) + " --out " + quote((w / "second").string()), w).status == 0);
    const auto second = w / "second" / "seed_7";
    CHECK(slurp(first / "trials.csv") == slurp(second / "trials.csv"));
    CHECK(slurp(first / "samples.csv") == slurp(second / "samples.csv"));
}

TEST_CASE("trial rows equal simulator invocations for every algorithm") {
    const auto w = scratch("accounting");
    for (const char* algo : {"rejection", "abc-tree", "map-tree", "smc", "thompson-raw"}) {
        auto cfg = rejection_mixture(w / algo);
        cfg["algorithm"] = algo;
        cfg["quota"] = 100;
        cfg["smc"] = {{"population", 100}};
        cfg.erase("epsilon");
        const auto res = cli("run " + quote(write_config(w, cfg).string()), w);
        REQUIRE(res.status == 0);
        const auto dir = w / algo / "seed_7";
        const auto m = read_json_file(dir / "manifest.json");
        CHECK(data_rows(dir / "trials.csv") == m["summary"]["simulations"].get<std::size_t>());
        CHECK(data_rows(dir / "trials.csv") <= 3000);
    }
}

TEST_CASE("config validation failures exit 2 with the field path") {
    const auto w = scratch("validation");
    auto missing = rejection_mixture(w / "out");
    missing.erase("model");
    auto res = cli("run " + quote(write_config(w, missing).string()), w);
    CHECK(res.status == 2);
    CHECK(res.err.find("model") != std::string::npos);

    res = cli("run " + quote(write_config(w, rejection_mixture(w / "out")).string()) + " --set colour=red", w);
    CHECK(res.status == 2);
    CHECK(res.err.find("colour") != std::string::npos);

    res = cli("run " + quote(write_config(w, rejection_mixture(w / "out")).string()) + " --set partitioner.foo=1", w);
    CHECK(res.status == 2);
    CHECK(res.err.find("partitioner.foo") != std::string::npos);

    res = cli("run " + quote(write_config(w, rejection_mixture(w / "out")).string()) + " --set algorithm=annealing", w);
    CHECK(res.status == 2);
    CHECK(res.err.find("algorithm") != std::string::npos);

    res = cli("run " + quote((w / "absent.json").string()), w);
    CHECK(res.status != 0);
    CHECK(!fs::exists(w / "out"));
}

TEST_CASE("overrides reach the manifest") {
    const auto w = scratch("overrides");
    const auto res = cli("run " + quote(write_config(w, rejection_mixture(w / "out")).string()) +
                             " --budget 1200 --set epsilon.initial=2.5 --seed 3",
                         w);
    REQUIRE(res.status == 0);
    const auto m = read_json_file(w / "out" / "seed_3" / "manifest.json");
    CHECK(m["config"]["budget"] == 1200);
    CHECK(m["config"]["epsilon"]["initial"] == 2.5);
    CHECK(data_rows(w / "out" / "seed_3" / "trials.csv") == 1200);
}

TEST_CASE("simulator and I/O failures map to their exit codes") {
    const auto w = scratch("failures");
    json ext = {{"external", {{"command", "false"}}},
                {"algorithm", "rejection"},
                {"prior", {{"lower", {0.0}}, {"upper", {1.0}}}},
                {"observed", {0.0}},
                {"epsilon", {{"initial", 1.0}}},
                {"budget", 10},
                {"output", (w / "ext").string()}};
    auto res = cli("run " + quote(write_config(w, ext).string()), w);
    CHECK(res.status == 3);
    CHECK(!res.err.empty());

    std::ofstream(w / "blocker") << "x";
    res = cli("run " + quote(write_config(w, rejection_mixture(w / "blocker" / "inside")).string()), w);
    CHECK(res.status == 4);
    CHECK(!res.err.empty());
}

TEST_CASE("external echo config runs end to end") {
    const auto w = scratch("external");
    const std::string cmd = "cd " + quote(ABCTREE_SOURCE_DIR) + " && " + quote(ABCTREE_CLI_PATH) + " run " +
                            quote(config_path("external_echo.json")) + " --budget 600 --out " + quote((w / "out").string()) +
                            " >/dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(raw));
    CHECK(WEXITSTATUS(raw) == 0);
    CHECK(data_rows(w / "out" / "seed_1" / "trials.csv") == 600);
}

TEST_CASE("comparing a run with itself gives zero deltas") {
    const auto w = scratch("compare");
    auto cfg = rejection_mixture(w / "run");
    cfg["seeds"] = {1, 2};
    cfg["budget"] = 2500;
    REQUIRE(cli("run " + quote(write_config(w, cfg).string()), w).status == 0);
    const auto res = cli("compare " + quote((w / "run").string()) + " " + quote((w / "run").string()) + " --out " +
                             quote((w / "cmp").string()),
                         w);
    REQUIRE(res.status == 0);
    const auto table = read_csv(w / "cmp" / "comparison.csv");
    CHECK(table.rows.size() == data_rows(w / "run" / "seed_1" / "metrics.csv"));
    std::size_t deltas = 0;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (table.header[c].find(":delta_") == std::string::npos) continue;
        for (const auto& row : table.rows) {
            if (!std::isnan(row[c])) {
                CHECK(row[c] == 0.0);
                ++deltas;
            }
        }
    }
    CHECK(deltas > 0);

    auto other = rejection_mixture(w / "gauss");
    other["model"] = "gaussian_1d";
    REQUIRE(cli("run " + quote(write_config(w, other).string()), w).status == 0);
    const auto mismatch = cli("compare " + quote((w / "run").string()) + " " + quote((w / "gauss").string()) + " --out " +
                                  quote((w / "cmp2").string()),
                              w);
    CHECK(mismatch.status == 2);
}

TEST_CASE("abc-tree dominates rejection on acceptance rate on the 100-arm toy") {
    const auto w = scratch("toy");
    for (const char* name : {"toy_rejection.json", "toy_abc_tree.json"}) {
        REQUIRE(cli("run " + quote(config_path(name)) + " --seed 1 --budget 20000 --out " +
                        quote((w / fs::path(name).stem()).string()),
                    w)
                    .status == 0);
    }
    REQUIRE(cli("compare " + quote((w / "toy_rejection").string()) + " " + quote((w / "toy_abc_tree").string()) +
                    " --out " + quote((w / "cmp").string()),
                w)
                .status == 0);
    std::ifstream in(w / "cmp" / "summary.csv");
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    const auto col = std::find(header.begin(), header.end(), "cumulative_acceptance_rate") - header.begin();
    REQUIRE(static_cast<std::size_t>(col) < header.size());
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) rows.push_back(split_csv_line(line));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0][1] == "rejection");
    CHECK(rows[1][1] == "abc-tree");
    CHECK(std::stod(rows[1][col]) > std::stod(rows[0][col]));
}

TEST_CASE("2D mixture acceptance at the final tolerance rises over the run") {
    const auto w = scratch("mixture_2d");
    REQUIRE(cli("run " + quote(config_path("mixture_2d_abc_tree.json")) + " --seed 1 --out " + quote(w.string()), w).status == 0);
    const auto m = read_csv(w / "seed_1" / "metrics.csv");
    const auto col = m.column("final_epsilon_acceptance_rate");
    REQUIRE(col);
    REQUIRE(m.rows.size() >= 20);
    const std::size_t tenth = m.rows.size() / 10;
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < tenth; ++i) {
        early += m.rows[i][*col];
        late += m.rows[m.rows.size() - 1 - i][*col];
    }
    CHECK(late > 2.0 * early);
}
