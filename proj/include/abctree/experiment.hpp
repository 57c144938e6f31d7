#pragma once

// Config-driven experiment runner: validation, dotted overrides, per-seed
// execution with checkpointed metrics, artifact files, and run comparison.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "abctree/abc.hpp"
#include "abctree/bandit.hpp"
#include "abctree/core.hpp"
#include "abctree/errors.hpp"
#include "abctree/external.hpp"
#include "abctree/log.hpp"
#include "abctree/map.hpp"
#include "abctree/metrics.hpp"
#include "abctree/models.hpp"
#include "abctree/partition.hpp"
#include "abctree/random.hpp"

#ifndef ABCTREE_VERSION
#define ABCTREE_VERSION "0.0.0"
#endif

namespace abctree {

using nlohmann::json;
namespace fs = std::filesystem;

enum class Algorithm { abc_tree, map_tree, rejection, smc, thompson_raw };

struct ExperimentConfig {
    std::string model;                        // built-in name; empty for external
    std::optional<std::string> external_command;
    double external_timeout_s = 30.0;
    Algorithm algorithm = Algorithm::abc_tree;
    std::optional<Box> prior_box;
    std::optional<std::vector<double>> observed;
    bool scaled_distance = false;
    std::optional<double> epsilon_initial;
    double pilot_percentile = 20.0;
    std::size_t pilot_draws = 500;
    double g = 0.9;
    std::size_t quota = 1000;
    std::size_t budget = 100000;
    std::size_t rounds = 50;
    std::optional<std::size_t> max_trials_per_round;
    Window window = Window::extended;
    PartitionerConfig partitioner{};
    Utility utility{};
    std::size_t init_plays = 0;
    std::optional<double> top_two;
    ModeEstimator mode_estimator = ModeEstimator::kde;
    std::optional<double> kde_bandwidth;
    std::size_t smc_population = 1000;
    std::optional<std::string> oracle_samples;
    std::vector<std::uint64_t> seeds{1};
    std::string output = "runs/out";
    std::size_t checkpoint_every = 1000;
    json echo;                                // effective config as JSON
};

inline const char* algorithm_name(Algorithm a) {
    switch (a) {
        case Algorithm::abc_tree: return "abc-tree";
        case Algorithm::map_tree: return "map-tree";
        case Algorithm::rejection: return "rejection";
        case Algorithm::smc: return "smc";
        case Algorithm::thompson_raw: return "thompson-raw";
    }
    return "?";
}

// ---------------------------------------------------------------- config parsing

namespace detail {

/// Typed access to one JSON object; every key must be consumed.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key) && !j_[key].is_null(); }

    void mark(const std::string& key) { seen_.insert(key); }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_[key];
    }

    template <class T>
    std::optional<T> opt(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) return std::nullopt;
        return convert<T>(j_[key], at(key));
    }

    template <class T>
    T get(const std::string& key, T fallback) {
        auto v = opt<T>(key);
        return v ? *v : fallback;
    }

    template <class T>
    T req(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) throw ConfigError(at(key), "required field is missing");
        return convert<T>(j_[key], at(key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
        }
    }

    template <class T>
    static T convert(const json& v, const std::string& path) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(path, "expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError(path, "expected a number");
            return v.get<double>();
        } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (v.is_number_unsigned()) return v.get<T>();
            if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<T>(v.get<std::int64_t>());
            if (v.is_number_float()) {
                const double d = v.get<double>();
                if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) return static_cast<T>(d);
            }
            throw ConfigError(path, "expected a nonnegative integer");
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
            std::vector<double> out;
            for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<double>(v[i], path + "[" + std::to_string(i) + "]"));
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
            if (!v.is_array()) throw ConfigError(path, "expected an array of integers");
            std::vector<std::size_t> out;
            for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<std::size_t>(v[i], path + "[" + std::to_string(i) + "]"));
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported config type");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& value, const std::string& path, std::initializer_list<std::pair<const char*, E>> options) {
    std::string names;
    for (const auto& [name, e] : options) {
        if (value == name) return e;
        names += names.empty() ? name : std::string(", ") + name;
    }
    throw ConfigError(path, "unknown value '" + value + "' (expected one of: " + names + ")");
}

}  // namespace detail

/// Apply `key.path=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise. Intermediate objects are created as needed.
inline void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &config;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(path, "empty path component");
        if (!node->is_object()) {
            if (node->is_null()) *node = json::object();
            else throw ConfigError(path, "cannot descend into a non-object");
        }
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

/// Validate a JSON config. No simulation happens before this succeeds.
inline ExperimentConfig parse_config(const json& j) {
    using detail::ObjectReader;
    using detail::parse_enum;
    ExperimentConfig c;
    ObjectReader r(j, "");

    if (r.has("external")) {
        ObjectReader e(r.raw("external"), "external");
        c.external_command = e.req<std::string>("command");
        c.external_timeout_s = e.get<double>("timeout_s", 30.0);
        if (!(c.external_timeout_s > 0.0)) throw ConfigError("external.timeout_s", "must be positive");
        e.finish();
        if (r.has("model")) throw ConfigError("model", "give either model or external, not both");
        r.opt<std::string>("model");
    } else {
        c.model = r.req<std::string>("model");
        if (!make_builtin_simulator(c.model)) {
            std::string names;
            for (const auto& n : builtin_simulator_names()) names += (names.empty() ? "" : ", ") + n;
            throw ConfigError("model", "unknown model '" + c.model + "' (built-ins: " + names + ")");
        }
    }

    c.algorithm = parse_enum<Algorithm>(r.get<std::string>("algorithm", "abc-tree"), r.at("algorithm"),
                                        {{"abc-tree", Algorithm::abc_tree},
                                         {"map-tree", Algorithm::map_tree},
                                         {"rejection", Algorithm::rejection},
                                         {"smc", Algorithm::smc},
                                         {"thompson-raw", Algorithm::thompson_raw}});

    if (r.has("prior")) {
        ObjectReader p(r.raw("prior"), "prior");
        auto lo = p.req<std::vector<double>>("lower");
        auto hi = p.req<std::vector<double>>("upper");
        p.finish();
        try {
            c.prior_box = Box(std::move(lo), std::move(hi));
        } catch (const Error& e) {
            throw ConfigError("prior", e.what());
        }
    } else {
        r.mark("prior");
    }
    c.observed = r.opt<std::vector<double>>("observed");

    c.scaled_distance = parse_enum<bool>(r.get<std::string>("distance", "euclidean"), r.at("distance"),
                                         {{"euclidean", false}, {"scaled", true}});

    if (r.has("epsilon")) {
        ObjectReader e(r.raw("epsilon"), "epsilon");
        c.epsilon_initial = e.opt<double>("initial");
        c.pilot_percentile = e.get<double>("pilot_percentile", 20.0);
        c.pilot_draws = e.get<std::size_t>("pilot_draws", 500);
        e.finish();
        if (c.epsilon_initial && !(*c.epsilon_initial > 0.0)) throw ConfigError("epsilon.initial", "must be positive");
        if (!(c.pilot_percentile > 0.0 && c.pilot_percentile <= 100.0)) {
            throw ConfigError("epsilon.pilot_percentile", "must lie in (0, 100]");
        }
    } else {
        r.mark("epsilon");
    }
    if (c.pilot_draws < 2 && (!c.epsilon_initial || c.scaled_distance)) {
        throw ConfigError("epsilon.pilot_draws", "pilot run needs at least 2 draws");
    }

    c.g = r.get<double>("g", 0.9);
    if (!(c.g > 0.0 && c.g < 1.0)) throw ConfigError("g", "must lie in (0, 1)");
    c.quota = r.get<std::size_t>("quota", 1000);
    if (c.quota < 1) throw ConfigError("quota", "must be >= 1");
    c.budget = r.get<std::size_t>("budget", 100000);
    if (c.budget < 1) throw ConfigError("budget", "must be >= 1");
    c.rounds = r.get<std::size_t>("rounds", 50);
    if (c.rounds < 1) throw ConfigError("rounds", "must be >= 1");
    c.max_trials_per_round = r.opt<std::size_t>("max_trials_per_round");
    if (c.max_trials_per_round && *c.max_trials_per_round < 1) throw ConfigError("max_trials_per_round", "must be >= 1");
    c.window = parse_enum<Window>(r.get<std::string>("window", "extended"), r.at("window"),
                                  {{"extended", Window::extended}, {"rolling", Window::rolling}});

    std::optional<PartitionerKind> kind;
    if (r.has("partitioner")) {
        ObjectReader p(r.raw("partitioner"), "partitioner");
        if (auto k = p.opt<std::string>("kind")) {
            kind = parse_enum<PartitionerKind>(*k, p.at("kind"),
                                               {{"single", PartitionerKind::single},
                                                {"grid", PartitionerKind::grid},
                                                {"cart", PartitionerKind::cart},
                                                {"dyadic", PartitionerKind::dyadic}});
        }
        c.partitioner.cart.max_leaves = p.get<std::size_t>("max_leaves", 1000);
        c.partitioner.cart.min_samples_leaf = p.get<std::size_t>("min_samples_leaf", 10);
        c.partitioner.cart.max_depth = p.opt<std::size_t>("max_depth");
        c.partitioner.grid_bins = p.get<std::vector<std::size_t>>("bins", {});
        c.partitioner.dyadic_splits = p.get<std::size_t>("splits_per_round", 10);
        c.partitioner.dyadic_rule = parse_enum<SplitRule>(p.get<std::string>("split_rule", "gini"), p.at("split_rule"),
                                                          {{"gini", SplitRule::gini}, {"round_robin", SplitRule::round_robin}});
        p.finish();
        if (c.partitioner.cart.max_leaves < 1) throw ConfigError("partitioner.max_leaves", "must be >= 1");
        if (c.partitioner.cart.min_samples_leaf < 1) throw ConfigError("partitioner.min_samples_leaf", "must be >= 1");
    } else {
        r.mark("partitioner");
    }
    if (!kind) {
        switch (c.algorithm) {
            case Algorithm::abc_tree: kind = PartitionerKind::cart; break;
            case Algorithm::map_tree: kind = PartitionerKind::dyadic; break;
            default: kind = c.partitioner.grid_bins.empty() ? PartitionerKind::single : PartitionerKind::grid; break;
        }
    }
    c.partitioner.kind = *kind;
    if (c.partitioner.kind == PartitionerKind::grid && c.partitioner.grid_bins.empty()) {
        throw ConfigError("partitioner.bins", "grid partitioner needs bins per dimension");
    }

    const auto utility = parse_enum<UtilityKind>(r.get<std::string>("utility", "omega1"), r.at("utility"),
                                                 {{"omega1", UtilityKind::omega1},
                                                  {"omega2", UtilityKind::omega2},
                                                  {"omega3", UtilityKind::omega3}});
    c.utility = Utility{utility, {}};
    c.init_plays = r.get<std::size_t>("init_plays", 0);
    c.top_two = r.opt<double>("top_two");
    if (c.top_two && !(*c.top_two > 0.0 && *c.top_two < 1.0)) throw ConfigError("top_two", "must lie in (0, 1)");
    c.mode_estimator = parse_enum<ModeEstimator>(r.get<std::string>("mode_estimator", "kde"), r.at("mode_estimator"),
                                                 {{"kde", ModeEstimator::kde}, {"bin-center", ModeEstimator::bin_center}});
    if (r.has("kde_bandwidth")) {
        const json& bw = r.raw("kde_bandwidth");
        if (bw.is_string()) {
            if (bw.get<std::string>() != "silverman") throw ConfigError("kde_bandwidth", "expected \"silverman\" or a positive number");
        } else if (bw.is_number() && bw.get<double>() > 0.0) {
            c.kde_bandwidth = bw.get<double>();
        } else {
            throw ConfigError("kde_bandwidth", "expected \"silverman\" or a positive number");
        }
    } else {
        r.opt<std::string>("kde_bandwidth");
    }

    if (r.has("smc")) {
        ObjectReader s(r.raw("smc"), "smc");
        c.smc_population = s.get<std::size_t>("population", c.quota);
        s.finish();
        if (c.smc_population < 2) throw ConfigError("smc.population", "must be >= 2");
    } else {
        r.mark("smc");
        c.smc_population = std::max<std::size_t>(c.quota, 2);
    }

    if (r.has("oracle")) {
        ObjectReader o(r.raw("oracle"), "oracle");
        c.oracle_samples = o.opt<std::string>("samples");
        o.finish();
    } else {
        r.mark("oracle");
    }

    if (r.has("seeds")) {
        const json& s = r.raw("seeds");
        if (s.is_array()) {
            c.seeds.clear();
            for (std::size_t i = 0; i < s.size(); ++i) {
                c.seeds.push_back(ObjectReader::convert<std::uint64_t>(s[i], "seeds[" + std::to_string(i) + "]"));
            }
            if (c.seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
        } else {
            c.seeds = {ObjectReader::convert<std::uint64_t>(s, "seeds")};
        }
    } else {
        r.mark("seeds");
    }
    c.output = r.get<std::string>("output", "runs/out");
    c.checkpoint_every = r.get<std::size_t>("checkpoint_every", 1000);
    if (c.checkpoint_every < 1) throw ConfigError("checkpoint_every", "must be >= 1");
    r.finish();

    if (c.algorithm == Algorithm::thompson_raw &&
        (c.partitioner.kind == PartitionerKind::cart || c.partitioner.kind == PartitionerKind::dyadic)) {
        throw ConfigError("partitioner.kind", "thompson-raw plays a fixed partition (single or grid)");
    }
    c.echo = j;
    return c;
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
    }
}

/// Load a config file (or a run manifest, whose "config" entry is used).
inline json load_config_json(const fs::path& path) {
    json j = read_json_file(path);
    if (j.is_object() && j.contains("config") && j.contains("version")) return j["config"];
    return j;
}

// ---------------------------------------------------------------- CSV helpers

inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

inline void close_out(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

inline void write_trials_csv(const fs::path& path, const ReferenceTable& table, std::size_t dim) {
    auto out = open_out(path);
    out << "t,round,arm";
    for (std::size_t j = 0; j < dim; ++j) out << ",theta_" << j;
    out << ",discrepancy,reward,weight,epsilon\n";
    for (const auto& r : table.records()) {
        out << r.t << ',' << r.round << ',' << r.arm;
        for (double v : r.theta) out << ',' << fmt_double(v);
        out << ',' << fmt_double(r.discrepancy) << ',' << static_cast<int>(r.reward) << ',' << fmt_double(r.weight)
            << ',' << fmt_double(r.epsilon) << '\n';
    }
    close_out(out, path);
}

inline void write_samples_csv(const fs::path& path, const WeightedSample& s, std::size_t dim) {
    auto out = open_out(path);
    for (std::size_t j = 0; j < dim; ++j) out << "theta_" << j << ',';
    out << "weight\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (double v : s.points[i]) out << fmt_double(v) << ',';
        out << fmt_double(s.weights[i]) << '\n';
    }
    close_out(out, path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Numeric CSV with a header row; empty cells read as NaN.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    std::optional<std::size_t> column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        return std::nullopt;
    }
};

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty CSV: " + path.string());
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        std::vector<double> row;
        for (const auto& c : cells) {
            if (c.empty()) {
                row.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            try {
                row.push_back(std::stod(c));
            } catch (const std::exception&) {
                throw IoError("non-numeric cell '" + c + "' in " + path.string());
            }
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Points (and weights, if a "weight" column exists) from a samples CSV.
inline WeightedSample read_sample_csv(const fs::path& path) {
    const auto t = read_csv(path);
    const auto wcol = t.column("weight");
    WeightedSample s;
    for (const auto& row : t.rows) {
        std::vector<double> p;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (!wcol || i != *wcol) p.push_back(row[i]);
        }
        s.points.push_back(std::move(p));
        s.weights.push_back(wcol ? row[*wcol] : 1.0);
    }
    return s;
}

// ---------------------------------------------------------------- metrics recording

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols = {"sims", "round", "epsilon", "acceptance_rate",
                                                  "cumulative_acceptance_rate", "final_epsilon_acceptance_rate", "ess",
                                                  "tv", "mmd", "regret"};
    return cols;
}

struct MetricsRow {
    std::size_t sims = 0;
    std::uint32_t round = 0;
    double epsilon = 0.0;
    double acceptance_rate = 0.0;
    double cumulative_acceptance_rate = 0.0;
    double final_epsilon_acceptance_rate = 0.0;  // window acceptance at the run's last tolerance
    double ess = std::numeric_limits<double>::quiet_NaN();
    double tv = std::numeric_limits<double>::quiet_NaN();
    double mmd = std::numeric_limits<double>::quiet_NaN();
    double regret = std::numeric_limits<double>::quiet_NaN();
};

inline void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
    auto out = open_out(path);
    const auto& cols = metric_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& m : rows) {
        out << m.sims << ',' << m.round << ',' << fmt_double(m.epsilon) << ',' << fmt_double(m.acceptance_rate) << ','
            << fmt_double(m.cumulative_acceptance_rate) << ',' << fmt_double(m.final_epsilon_acceptance_rate) << ','
            << fmt_double(m.ess) << ',' << fmt_double(m.tv) << ','
            << fmt_double(m.mmd) << ',' << fmt_double(m.regret) << '\n';
    }
    close_out(out, path);
}

/// Emits a metrics row every `every` trials (and at the end).
class MetricsRecorder {
public:
    MetricsRecorder(std::size_t every, const Prior& prior, const GaussianLocationModel* oracle, Utility utility,
                    std::optional<WeightedSample> oracle_sample)
        : every_(every), prior_(prior), oracle_(oracle), utility_(std::move(utility)),
          oracle_sample_(std::move(oracle_sample)) {}

    void observe(const TrialRecord& r, const BetaState* beliefs, const Partition* partition,
                 std::span<const double> proposal) {
        if (r.round != round_) {
            round_ = r.round;
            round_points_.clear();
            round_weights_.clear();
        }
        ++n_;
        window_accepted_ += r.reward;
        total_accepted_ += r.reward;
        if (r.reward) {
            round_points_.push_back(r.theta);
            round_weights_.push_back(r.weight);
        }
        if (oracle_ && partition && !proposal.empty()) add_regret(r, *partition, proposal);
        last_ = {r.epsilon, beliefs, partition};
        if (n_ % every_ == 0) emit();
    }

    void finish() {
        if (n_ > 0 && (rows_.empty() || rows_.back().sims != n_)) emit();
    }

    const std::vector<MetricsRow>& rows() const noexcept { return rows_; }

private:
    struct Last {
        double epsilon = 0.0;
        const BetaState* beliefs = nullptr;
        const Partition* partition = nullptr;
    };

    void add_regret(const TrialRecord& r, const Partition& partition, std::span<const double> q) {
        if (!oracle_key_ || oracle_key_->first != r.round || oracle_key_->second != r.epsilon ||
            oracle_p_.size() != partition.size()) {
            oracle_key_ = {r.round, r.epsilon};
            oracle_p_ = oracle_->epsilon_posterior(partition, r.epsilon);
            oracle_prior_ = prior_.masses(partition);
            oracle_utility_ = utility_;
            if (utility_.kind == UtilityKind::omega3) oracle_utility_.acceptance = oracle_->box_acceptance(partition, r.epsilon);
            oracle_best_ = utility_value(oracle_utility_, oracle_p_,
                                         optimal_proposal(oracle_utility_, oracle_p_, oracle_prior_), oracle_prior_);
        }
        regret_sum_ += oracle_best_ - utility_value(oracle_utility_, oracle_p_, q, oracle_prior_);
        ++regret_count_;
    }

    void emit() {
        MetricsRow m;
        m.sims = n_;
        m.round = round_;
        m.epsilon = last_.epsilon;
        const std::size_t window = n_ - last_emit_;
        m.acceptance_rate = window ? static_cast<double>(window_accepted_) / static_cast<double>(window) : 0.0;
        m.cumulative_acceptance_rate = static_cast<double>(total_accepted_) / static_cast<double>(n_);
        if (!round_weights_.empty()) {
            bool positive = true;
            for (double w : round_weights_) positive = positive && w > 0.0;
            if (positive) m.ess = ess(round_weights_);
        }
        if (oracle_ && last_.beliefs && last_.partition) {
            const auto h = histogram_posterior(*last_.beliefs, *last_.partition, prior_);
            m.tv = tv_distance(h.mass, oracle_->epsilon_posterior(*last_.partition, last_.epsilon));
        }
        if (oracle_sample_ && round_points_.size() >= 1) {
            const std::size_t cap = 1000;
            const std::size_t from = round_points_.size() > cap ? round_points_.size() - cap : 0;
            Points pts(round_points_.begin() + static_cast<std::ptrdiff_t>(from), round_points_.end());
            std::vector<double> w(round_weights_.begin() + static_cast<std::ptrdiff_t>(from), round_weights_.end());
            m.mmd = mmd(pts, w, oracle_sample_->points, oracle_sample_->weights);
        }
        if (regret_count_ > 0) m.regret = regret_sum_ / static_cast<double>(regret_count_);
        rows_.push_back(m);
        last_emit_ = n_;
        window_accepted_ = 0;
    }

    std::size_t every_;
    const Prior& prior_;
    const GaussianLocationModel* oracle_;
    Utility utility_;
    std::optional<WeightedSample> oracle_sample_;

    std::size_t n_ = 0;
    std::size_t last_emit_ = 0;
    std::size_t window_accepted_ = 0;
    std::size_t total_accepted_ = 0;
    std::uint32_t round_ = std::numeric_limits<std::uint32_t>::max();
    Points round_points_;
    std::vector<double> round_weights_;
    Last last_;

    std::optional<std::pair<std::uint32_t, double>> oracle_key_;
    std::vector<double> oracle_p_;
    std::vector<double> oracle_prior_;
    Utility oracle_utility_;
    double oracle_best_ = 0.0;
    double regret_sum_ = 0.0;
    std::size_t regret_count_ = 0;
    std::vector<MetricsRow> rows_;
};

// ---------------------------------------------------------------- running

struct RunOutput {
    ReferenceTable table;
    HistogramPosterior histogram;
    WeightedSample samples;
    std::vector<MetricsRow> metrics;
    json posterior_extra = json::object();
    json summary = json::object();
    std::size_t dim_theta = 0;
};

inline std::shared_ptr<Simulator> make_simulator(const ExperimentConfig& c) {
    if (c.external_command) {
        return ExternalSimulator::shell(*c.external_command,
                                        std::chrono::milliseconds(static_cast<long long>(c.external_timeout_s * 1000.0)));
    }
    return make_builtin_simulator(c.model);
}

inline std::string model_label(const ExperimentConfig& c) {
    return c.external_command ? "external:" + *c.external_command : c.model;
}

namespace detail {

/// Beta(1, 1) + counts on a fixed partition, fed trial by trial.
class CountingBeliefs {
public:
    explicit CountingBeliefs(Partition partition)
        : partition_(std::move(partition)), beliefs_(partition_.size()) {}

    void reset() { beliefs_ = BetaState(partition_.size()); }
    void add(const TrialRecord& r) { beliefs_.update(partition_.locate(r.theta), r.reward); }
    const BetaState& beliefs() const noexcept { return beliefs_; }
    const Partition& partition() const noexcept { return partition_; }

private:
    Partition partition_;
    BetaState beliefs_;
};

inline Partition initial_partition(const PartitionerConfig& p, const Box& domain) {
    if (p.kind == PartitionerKind::grid) {
        if (p.grid_bins.size() != domain.dim()) {
            throw ConfigError("partitioner.bins", "need one bin count per parameter dimension");
        }
        return Partition::grid(domain, p.grid_bins);
    }
    return Partition(domain);
}

}  // namespace detail

/// Execute one seed of an experiment entirely in memory.
inline RunOutput execute(const ExperimentConfig& c, std::uint64_t seed, std::shared_ptr<Simulator> sim = nullptr) {
    if (!sim) sim = make_simulator(c);
    Problem problem;
    problem.simulator = sim;
    const auto domain = c.prior_box ? c.prior_box : sim->default_domain();
    if (!domain) throw ConfigError("prior", "model has no default prior; give prior.lower and prior.upper");
    if (domain->dim() != sim->dim_theta()) {
        throw ConfigError("prior", "dimension " + std::to_string(domain->dim()) + " does not match the model's " +
                                       std::to_string(sim->dim_theta()));
    }
    problem.prior = Prior::uniform(*domain);
    const auto observed = c.observed ? c.observed : sim->default_observed();
    if (!observed) throw ConfigError("observed", "model has no default observed summary; give observed");
    if (observed->size() != sim->dim_summary()) {
        throw ConfigError("observed", "length " + std::to_string(observed->size()) + " does not match the model's " +
                                          std::to_string(sim->dim_summary()) + " summaries");
    }
    problem.observed = *observed;
    if (c.partitioner.kind == PartitionerKind::grid && c.partitioner.grid_bins.size() != domain->dim()) {
        throw ConfigError("partitioner.bins", "need one bin count per parameter dimension");
    }

    const GaussianLocationModel* oracle = nullptr;
    if (auto* g = dynamic_cast<const GaussianLocationModel*>(sim.get())) {
        if (problem.observed.size() == 1 && problem.observed[0] == g->observed()) oracle = g;
    }
    std::optional<WeightedSample> oracle_sample;
    if (c.oracle_samples) oracle_sample = read_sample_csv(*c.oracle_samples);

    RunOutput out;
    out.dim_theta = domain->dim();
    Rng rng = make_rng(seed, 0);
    MetricsRecorder recorder(c.checkpoint_every, problem.prior, oracle, c.utility, oracle_sample);

    // Pilot run from the prior: sets the summary scales and/or the first tolerance.
    std::size_t used = 0;
    double eps1 = c.epsilon_initial.value_or(0.0);
    if (!c.epsilon_initial || c.scaled_distance) {
        const std::size_t n = std::min(c.pilot_draws, c.budget);
        std::vector<TrialRecord> pilot;
        std::vector<std::vector<double>> summaries;
        for (std::size_t i = 0; i < n; ++i) {
            TrialRecord rec;
            rec.theta = problem.prior.sample(rng);
            rec.summary = sim->simulate(rec.theta, rng);
            if (rec.summary.size() != problem.observed.size()) throw SimulatorError("simulator returned a summary of the wrong length");
            rec.t = i + 1;
            rec.round = 0;
            summaries.push_back(rec.summary);
            pilot.push_back(std::move(rec));
        }
        if (c.scaled_distance) problem.distance = scaled_euclidean(summary_scales(summaries));
        std::vector<double> d;
        for (auto& rec : pilot) {
            rec.discrepancy = abc_reward(problem.observed, rec.summary, 1.0, problem.distance).discrepancy;
            d.push_back(rec.discrepancy);
        }
        if (!c.epsilon_initial) {
            eps1 = percentile(d, c.pilot_percentile);
            if (!(eps1 > 0.0) || !std::isfinite(eps1)) {
                throw SimulatorError("pilot run gave an unusable tolerance (" + fmt_double(eps1) + ")");
            }
            log::info("pilot tolerance epsilon_1 = " + fmt_double(eps1));
        }
        for (auto& rec : pilot) {
            rec.epsilon = eps1;
            rec.reward = rec.discrepancy < eps1 ? 1 : 0;
            recorder.observe(rec, nullptr, nullptr, {});
            out.table.append(std::move(rec));
        }
        used = n;
    }
    const std::size_t remaining = c.budget - used;
    out.summary["epsilon_1"] = eps1;
    out.summary["pilot_simulations"] = used;

    const auto append_all = [&](const ReferenceTable& t, std::uint64_t offset) {
        for (auto rec : t.records()) {
            rec.t += offset;
            out.table.append(std::move(rec));
        }
    };
    const auto set_histogram = [&](const BetaState& b, const Partition& p) {
        out.histogram = histogram_posterior(b, p, problem.prior);
    };

    OuterLoopConfig outer;
    outer.epsilon_1 = eps1;
    outer.g = c.g;
    outer.max_rounds = c.rounds;
    outer.window = c.window;
    outer.partitioner = c.partitioner;
    outer.budget = remaining;
    outer.first_t = used + 1;
    InnerLoopConfig inner;
    inner.epsilon = eps1;
    inner.quota = c.quota;
    inner.max_trials = c.max_trials_per_round.value_or(std::max<std::size_t>(remaining, 1));
    inner.utility = c.utility;
    inner.init_plays = c.init_plays;
    const TrialObserver observer = [&](const TrialEvent& e) {
        recorder.observe(e.record, &e.beliefs, &e.partition, e.proposal);
    };

    if (remaining == 0) {
        if (c.algorithm != Algorithm::rejection) throw ConfigError("budget", "budget is used up by the pilot run");
    }

    switch (c.algorithm) {
        case Algorithm::abc_tree: {
            auto res = run_abc_tree(problem, outer, inner, rng, observer);
            append_all(res.table, 0);
            out.histogram = std::move(res.histogram);
            out.samples = std::move(res.samples);
            out.summary["sample_round"] = res.sample_round;
            out.summary["sample_epsilon"] = res.sample_epsilon;
            json rounds = json::array();
            for (const auto& r : res.rounds) {
                rounds.push_back({{"round", r.round}, {"epsilon", r.epsilon}, {"trials", r.trials},
                                  {"accepted", r.accepted}, {"arms", r.arms}});
            }
            out.summary["rounds"] = rounds;
            break;
        }
        case Algorithm::map_tree: {
            MapConfig mc;
            mc.top_two = c.top_two;
            mc.mode_estimator = c.mode_estimator;
            mc.kde_bandwidth = c.kde_bandwidth;
            auto res = run_map_tree(problem, outer, inner, mc, rng, observer);
            if (res.used_bin_center) log::warn("no draws accepted at the final tolerance; MAP taken as the best bin's center");
            append_all(res.table, 0);
            set_histogram(res.beliefs, res.partition);
            for (const auto& r : out.table.records()) {
                if (r.round > 0 && r.discrepancy < res.final_epsilon) {
                    out.samples.points.push_back(r.theta);
                    out.samples.weights.push_back(1.0);
                }
            }
            out.posterior_extra["theta_map"] = res.theta_map;
            out.posterior_extra["best_bin"] = res.best_bin;
            out.posterior_extra["used_bin_center"] = res.used_bin_center;
            out.posterior_extra["score_trace"] = res.score_trace;
            out.summary["final_epsilon"] = res.final_epsilon;
            out.summary["theta_map"] = res.theta_map;
            break;
        }
        case Algorithm::thompson_raw: {
            const Partition part = detail::initial_partition(c.partitioner, *domain);
            MapConfig mc;
            mc.top_two = c.top_two;
            auto res = map_inner_loop(problem, part, BetaState(part.size()), inner, mc, rng, 1, used + 1, observer);
            for (auto& rec : res.records) out.table.append(std::move(rec));
            set_histogram(res.beliefs, part);
            for (const auto& r : out.table.records()) {
                if (r.round == 1 && r.reward) {
                    out.samples.points.push_back(r.theta);
                    out.samples.weights.push_back(1.0);
                }
            }
            break;
        }
        case Algorithm::rejection: {
            detail::CountingBeliefs counts(detail::initial_partition(c.partitioner, *domain));
            if (remaining > 0) {
                const auto table = rejection_abc(problem, eps1, remaining, rng);
                const auto q = problem.prior.masses(counts.partition());
                for (const auto& rec : table.records()) {
                    counts.add(rec);
                    recorder.observe(rec, &counts.beliefs(), &counts.partition(), q);
                    if (rec.reward) {
                        out.samples.points.push_back(rec.theta);
                        out.samples.weights.push_back(1.0);
                    }
                }
                append_all(table, used);
            }
            set_histogram(counts.beliefs(), counts.partition());
            break;
        }
        case Algorithm::smc: {
            std::vector<double> schedule(c.rounds);
            for (std::size_t s = 0; s < c.rounds; ++s) schedule[s] = eps1 * std::pow(c.g, static_cast<double>(s));
            auto res = smc_abc(problem, schedule, c.smc_population, remaining, rng);
            detail::CountingBeliefs counts(detail::initial_partition(c.partitioner, *domain));
            std::uint32_t round = 0;
            for (const auto& rec : res.table.records()) {
                if (rec.round != round) {
                    round = rec.round;
                    counts.reset();
                }
                counts.add(rec);
                recorder.observe(rec, &counts.beliefs(), &counts.partition(), {});
            }
            append_all(res.table, used);
            if (!res.populations.empty()) out.samples = res.populations.back().sample;
            // Histogram from the last complete population's round.
            counts.reset();
            const std::uint32_t last = static_cast<std::uint32_t>(res.populations.size());
            for (const auto& rec : res.table.records()) {
                if (rec.round == last) counts.add(rec);
            }
            set_histogram(counts.beliefs(), counts.partition());
            out.summary["populations"] = res.populations.size();
            out.summary["proposal_attempts"] = res.attempts;
            if (!res.populations.empty()) out.summary["final_epsilon"] = res.populations.back().epsilon;
            break;
        }
    }
    recorder.finish();
    out.metrics = recorder.rows();
    if (!out.table.empty()) {
        const auto& recs = out.table.records();
        const double last_eps = recs.back().epsilon;
        std::size_t from = 0;
        for (auto& m : out.metrics) {
            std::size_t hits = 0;
            for (std::size_t i = from; i < m.sims && i < recs.size(); ++i) hits += recs[i].discrepancy < last_eps;
            m.final_epsilon_acceptance_rate = m.sims > from ? static_cast<double>(hits) / static_cast<double>(m.sims - from) : 0.0;
            from = m.sims;
        }
    }
    out.summary["simulations"] = out.table.size();
    return out;
}

inline fs::path seed_dir(const fs::path& root, std::uint64_t seed) { return root / ("seed_" + std::to_string(seed)); }

/// Run one seed and write its six artifacts into `dir`.
inline RunOutput run_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir) {
    const auto start = std::chrono::steady_clock::now();
    auto out = execute(c, seed);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    write_trials_csv(dir / "trials.csv", out.table, out.dim_theta);
    write_samples_csv(dir / "samples.csv", out.samples, out.dim_theta);
    write_metrics_csv(dir / "metrics.csv", out.metrics);
    json posterior = {{"partition", to_json(out.histogram.partition)},
                      {"mass", out.histogram.mass},
                      {"density", out.histogram.density}};
    for (auto it = out.posterior_extra.begin(); it != out.posterior_extra.end(); ++it) posterior[it.key()] = it.value();
    {
        auto f = open_out(dir / "posterior.json");
        f << posterior.dump(2) << '\n';
        close_out(f, dir / "posterior.json");
    }
    {
        auto f = open_out(dir / "partition.json");
        f << to_json(out.histogram.partition).dump(2) << '\n';
        close_out(f, dir / "partition.json");
    }
    json cfg = c.echo;
    cfg["seeds"] = json::array({seed});
    cfg["output"] = dir.parent_path().string();
    json manifest = {{"version", ABCTREE_VERSION},
                     {"config", cfg},
                     {"seed", seed},
                     {"model", model_label(c)},
                     {"algorithm", algorithm_name(c.algorithm)},
                     {"wall_time_s", wall},
                     {"summary", out.summary}};
    {
        auto f = open_out(dir / "manifest.json");
        f << manifest.dump(2) << '\n';
        close_out(f, dir / "manifest.json");
    }
    return out;
}

// ---------------------------------------------------------------- compare

struct LoadedRun {
    std::string label;
    std::string model;
    std::string algorithm;
    std::vector<CsvTable> seeds;  // metrics.csv per seed
};

inline LoadedRun load_run(const fs::path& dir) {
    LoadedRun run;
    run.label = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    std::vector<fs::path> seed_dirs;
    if (fs::exists(dir / "manifest.json")) {
        seed_dirs.push_back(dir);
    } else {
        std::error_code ec;
        for (const auto& e : fs::directory_iterator(dir, ec)) {
            if (e.is_directory() && fs::exists(e.path() / "manifest.json")) seed_dirs.push_back(e.path());
        }
        if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
        std::sort(seed_dirs.begin(), seed_dirs.end());
    }
    if (seed_dirs.empty()) throw IoError("no completed run under " + dir.string());
    for (const auto& d : seed_dirs) {
        const auto m = read_json_file(d / "manifest.json");
        const std::string model = m.value("model", "");
        const std::string algo = m.value("algorithm", "");
        if (run.model.empty()) {
            run.model = model;
            run.algorithm = algo;
        } else if (model != run.model) {
            throw ConfigError(d.string(), "seed directories disagree on the model");
        }
        run.seeds.push_back(read_csv(d / "metrics.csv"));
    }
    return run;
}

/// Seed-averaged metric trajectories keyed by simulation count.
inline std::map<std::size_t, std::vector<double>> averaged_trajectory(const LoadedRun& run,
                                                                      const std::vector<std::string>& metrics) {
    std::map<std::size_t, std::vector<double>> sum;
    std::map<std::size_t, std::vector<std::size_t>> count;
    for (const auto& t : run.seeds) {
        const auto sims_col = t.column("sims");
        if (!sims_col) throw IoError("metrics.csv lacks a sims column");
        for (const auto& row : t.rows) {
            const auto sims = static_cast<std::size_t>(row[*sims_col]);
            auto& s = sum[sims];
            auto& n = count[sims];
            s.resize(metrics.size(), 0.0);
            n.resize(metrics.size(), 0);
            for (std::size_t m = 0; m < metrics.size(); ++m) {
                const auto col = t.column(metrics[m]);
                if (col && *col < row.size() && !std::isnan(row[*col])) {
                    s[m] += row[*col];
                    ++n[m];
                }
            }
        }
    }
    for (auto& [sims, s] : sum) {
        for (std::size_t m = 0; m < s.size(); ++m) {
            s[m] = count[sims][m] ? s[m] / static_cast<double>(count[sims][m]) : std::numeric_limits<double>::quiet_NaN();
        }
    }
    return sum;
}

inline std::vector<double> final_metrics(const LoadedRun& run, const std::vector<std::string>& metrics) {
    std::vector<double> s(metrics.size(), 0.0);
    std::vector<std::size_t> n(metrics.size(), 0);
    for (const auto& t : run.seeds) {
        if (t.rows.empty()) continue;
        const auto& row = t.rows.back();
        for (std::size_t m = 0; m < metrics.size(); ++m) {
            const auto col = t.column(metrics[m]);
            if (col && *col < row.size() && !std::isnan(row[*col])) {
                s[m] += row[*col];
                ++n[m];
            }
        }
    }
    for (std::size_t m = 0; m < s.size(); ++m) {
        s[m] = n[m] ? s[m] / static_cast<double>(n[m]) : std::numeric_limits<double>::quiet_NaN();
    }
    return s;
}

struct CompareResult {
    std::size_t rows = 0;
    std::vector<std::vector<double>> summary;  // per run: final acceptance_rate, tv, mmd, regret, ess
};

/// comparison.csv: one row per checkpoint (simulation count), columns
/// <label>:<metric>, plus <label>:delta_<metric> against the first run.
/// summary.csv: one row per run with final seed-averaged metrics.
inline CompareResult compare_runs(const std::vector<fs::path>& dirs, const fs::path& out_dir, std::ostream& report) {
    if (dirs.size() < 2) throw ConfigError("compare", "need at least two run directories");
    std::vector<LoadedRun> runs;
    for (const auto& d : dirs) runs.push_back(load_run(d));
    for (std::size_t i = 1; i < runs.size(); ++i) {
        if (runs[i].model != runs[0].model) {
            throw ConfigError(dirs[i].string(), "model '" + runs[i].model + "' differs from '" + runs[0].model + "'");
        }
    }
    std::set<std::string> used_labels;
    for (auto& r : runs) {
        std::string base = r.label;
        for (int k = 2; used_labels.count(r.label); ++k) r.label = base + "#" + std::to_string(k);
        used_labels.insert(r.label);
    }
    const std::vector<std::string> metrics = {"acceptance_rate", "cumulative_acceptance_rate", "final_epsilon_acceptance_rate",
                                              "ess", "tv", "mmd", "regret"};
    std::vector<std::map<std::size_t, std::vector<double>>> traj;
    std::set<std::size_t> sims;
    for (const auto& r : runs) {
        traj.push_back(averaged_trajectory(r, metrics));
        for (const auto& [s, v] : traj.back()) sims.insert(s);
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    const auto nan = std::numeric_limits<double>::quiet_NaN();
    const auto lookup = [&](std::size_t r, std::size_t s, std::size_t m) {
        const auto it = traj[r].find(s);
        return it == traj[r].end() ? nan : it->second[m];
    };
    {
        const auto path = out_dir / "comparison.csv";
        auto f = open_out(path);
        f << "sims";
        for (const auto& r : runs) {
            for (const auto& m : metrics) f << ',' << r.label << ':' << m;
        }
        for (std::size_t r = 1; r < runs.size(); ++r) {
            for (const auto& m : metrics) f << ',' << runs[r].label << ":delta_" << m;
        }
        f << '\n';
        for (auto s : sims) {
            f << s;
            for (std::size_t r = 0; r < runs.size(); ++r) {
                for (std::size_t m = 0; m < metrics.size(); ++m) f << ',' << fmt_double(lookup(r, s, m));
            }
            for (std::size_t r = 1; r < runs.size(); ++r) {
                for (std::size_t m = 0; m < metrics.size(); ++m) f << ',' << fmt_double(lookup(r, s, m) - lookup(0, s, m));
            }
            f << '\n';
        }
        close_out(f, path);
    }
    CompareResult res;
    res.rows = sims.size();
    {
        const auto path = out_dir / "summary.csv";
        auto f = open_out(path);
        f << "label,algorithm,model,seeds";
        for (const auto& m : metrics) f << ',' << m;
        for (const auto& m : metrics) f << ",delta_" << m;
        f << '\n';
        std::vector<double> first;
        for (std::size_t r = 0; r < runs.size(); ++r) {
            const auto fin = final_metrics(runs[r], metrics);
            if (r == 0) first = fin;
            res.summary.push_back(fin);
            f << runs[r].label << ',' << runs[r].algorithm << ',' << runs[r].model << ',' << runs[r].seeds.size();
            for (double v : fin) f << ',' << fmt_double(v);
            for (std::size_t m = 0; m < fin.size(); ++m) f << ',' << fmt_double(fin[m] - first[m]);
            f << '\n';
            report << runs[r].label << " (" << runs[r].algorithm << ", " << runs[r].seeds.size() << " seeds):";
            for (std::size_t m = 0; m < fin.size(); ++m) {
                if (!std::isnan(fin[m])) report << ' ' << metrics[m] << '=' << fmt_double(fin[m]);
            }
            report << '\n';
        }
        close_out(f, path);
    }
    return res;
}

}  // namespace abctree
