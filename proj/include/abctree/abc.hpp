#pragma once

// ABC engines: acceptance kernel, the bandit inner loop, the tree-partitioned
// outer loop, histogram posteriors, and rejection / SMC baselines.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "abctree/bandit.hpp"
#include "abctree/core.hpp"
#include "abctree/errors.hpp"
#include "abctree/models.hpp"
#include "abctree/partition.hpp"
#include "abctree/random.hpp"

namespace abctree {

using Distance = std::function<double(std::span<const double>, std::span<const double>)>;

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Euclidean distance after dividing each coordinate by `scale`.
inline Distance scaled_euclidean(std::vector<double> scale) {
    return [scale = std::move(scale)](std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = (a[i] - b[i]) / scale[i];
            s += d * d;
        }
        return std::sqrt(s);
    };
}

/// Everything the samplers need to score a parameter value.
struct Problem {
    std::shared_ptr<Simulator> simulator;
    Prior prior;
    std::vector<double> observed;
    Distance distance = euclidean_distance;

    static Problem from_defaults(std::shared_ptr<Simulator> sim) {
        Problem p;
        p.prior = Prior::uniform(*sim->default_domain());
        p.observed = *sim->default_observed();
        p.simulator = std::move(sim);
        return p;
    }
};

struct Reward {
    std::uint8_t accepted = 0;
    double discrepancy = std::numeric_limits<double>::infinity();
};

/// Accept iff distance(sim, obs) < epsilon (strict). Non-finite summaries reject
/// with an infinite discrepancy.
inline Reward abc_reward(std::span<const double> observed, std::span<const double> simulated, double epsilon,
                         const Distance& distance = euclidean_distance) {
    if (observed.size() != simulated.size()) throw ShapeError("abc_reward: summary length mismatch");
    for (double v : simulated) {
        if (!std::isfinite(v)) return Reward{0, std::numeric_limits<double>::infinity()};
    }
    const double d = distance(simulated, observed);
    if (!std::isfinite(d)) return Reward{0, std::numeric_limits<double>::infinity()};
    return Reward{static_cast<std::uint8_t>(d < epsilon ? 1 : 0), d};
}

/// One simulator call at theta, turned into a trial record.
inline TrialRecord run_trial(Problem& problem, std::vector<double> theta, double epsilon, Rng& rng) {
    TrialRecord rec;
    rec.summary = problem.simulator->simulate(theta, rng);
    if (rec.summary.size() != problem.observed.size()) {
        throw SimulatorError("simulator returned " + std::to_string(rec.summary.size()) + " summaries, expected " +
                         std::to_string(problem.observed.size()));
    }
    const auto r = abc_reward(problem.observed, rec.summary, epsilon, problem.distance);
    rec.theta = std::move(theta);
    rec.reward = r.accepted;
    rec.discrepancy = r.discrepancy;
    rec.epsilon = epsilon;
    return rec;
}

struct InnerLoopConfig {
    double epsilon = 1.0;
    std::size_t quota = 1000;         // acceptances B
    std::size_t max_trials = 100000;  // simulation budget T_max
    Utility utility{};
    std::size_t init_plays = 0;       // forced plays per arm before the bandit starts
};

/// Observer invoked after every trial with the state the proposal was drawn from.
struct TrialEvent {
    const TrialRecord& record;
    const BetaState& beliefs;
    const Partition& partition;
    std::span<const double> proposal;  // q_hat used for this draw; empty for argmax rules
    std::span<const double> prior_masses;
};
using TrialObserver = std::function<void(const TrialEvent&)>;

struct InnerLoopResult {
    std::vector<TrialRecord> records;
    BetaState beliefs;
    std::size_t accepted = 0;
};

namespace detail {

inline void validate(const InnerLoopConfig& c) {
    if (!(c.epsilon > 0.0)) throw DomainError("inner loop: epsilon must be positive");
    if (c.quota < 1 || c.max_trials < 1) throw DomainError("inner loop: quota and budget must be >= 1");
}

}  // namespace detail

/// Bandit inner loop on a fixed partition: Beta means -> binned posterior ->
/// q* -> categorical arm draw -> prior draw in the box -> simulate -> reward,
/// importance weight prior(box)/q(box), conjugate update. Runs until `quota`
/// acceptances or `max_trials` simulations. `first_t` numbers the trials.
inline InnerLoopResult inner_loop(Problem& problem, const Partition& partition, BetaState beliefs,
                                  const InnerLoopConfig& config, Rng& rng, std::uint32_t round = 1,
                                  std::uint64_t first_t = 1, const TrialObserver& observer = {}) {
    detail::validate(config);
    if (beliefs.size() != partition.size()) throw ShapeError("inner_loop: belief state size != partition size");
    const auto prior_masses = problem.prior.masses(partition);
    const std::size_t K = partition.size();

    InnerLoopResult out;
    out.records.reserve(std::min<std::size_t>(config.max_trials, 1u << 16));
    std::uint64_t t = first_t;
    const auto finish = [&]() {
        out.beliefs = std::move(beliefs);
        return std::move(out);
    };

    const auto play = [&](std::size_t arm, double weight, std::span<const double> q) {
        auto rec = run_trial(problem, problem.prior.sample_in(partition.box(arm), rng), config.epsilon, rng);
        rec.t = t++;
        rec.round = round;
        rec.arm = arm;
        rec.weight = weight;
        beliefs.update(arm, rec.reward);
        out.accepted += rec.reward;
        out.records.push_back(std::move(rec));
        if (observer) observer(TrialEvent{out.records.back(), beliefs, partition, q, prior_masses});
    };

    // Optional forced exploration: each arm m times, round-robin (proposal 1/K).
    if (config.init_plays > 0) {
        const std::vector<double> uniform(K, 1.0 / static_cast<double>(K));
        for (std::size_t rep = 0; rep < config.init_plays; ++rep) {
            for (std::size_t k = 0; k < K; ++k) {
                if (out.records.size() >= config.max_trials || out.accepted >= config.quota) return finish();
                if (prior_masses[k] == 0.0) continue;
                play(k, prior_masses[k] * static_cast<double>(K), uniform);
            }
        }
    }

    Utility utility = config.utility;
    while (out.accepted < config.quota && out.records.size() < config.max_trials) {
        const auto eta = beliefs.means();
        const auto p_hat = binned_posterior(std::span<const double>(eta), prior_masses);
        if (utility.kind == UtilityKind::omega3) utility.acceptance = eta;
        const auto q = optimal_proposal(utility, p_hat, prior_masses);
        const std::size_t arm = select_arm(q, rng);
        play(arm, prior_masses[arm] / q[arm], q);
    }
    return finish();
}

/// Step-function posterior on a partition.
struct HistogramPosterior {
    Partition partition;
    std::vector<double> mass;
    std::vector<double> density;

    double density_at(std::span<const double> theta) const { return density[partition.locate(theta)]; }
};

/// mass_k proportional to prior(box_k) * alpha_k / (alpha_k + beta_k).
inline HistogramPosterior histogram_posterior(const BetaState& beliefs, const Partition& partition,
                                              const Prior& prior) {
    if (beliefs.size() != partition.size()) throw ShapeError("histogram_posterior: size mismatch");
    HistogramPosterior h;
    h.partition = partition;
    h.mass = binned_posterior(beliefs, prior.masses(partition));
    h.density.resize(h.mass.size());
    for (std::size_t k = 0; k < h.mass.size(); ++k) h.density[k] = h.mass[k] / partition.box(k).volume();
    return h;
}

/// Plain rejection ABC: theta ~ prior, all weights 1.
inline ReferenceTable rejection_abc(Problem& problem, double epsilon, std::size_t budget, Rng& rng,
                                    std::uint32_t round = 1) {
    if (budget < 1) throw DomainError("rejection_abc: budget must be >= 1");
    if (!(epsilon > 0.0)) throw DomainError("rejection_abc: epsilon must be positive");
    ReferenceTable table;
    for (std::size_t i = 0; i < budget; ++i) {
        auto rec = run_trial(problem, problem.prior.sample(rng), epsilon, rng);
        rec.t = i + 1;
        rec.round = round;
        table.append(std::move(rec));
    }
    return table;
}

/// Weighted parameter sample.
struct WeightedSample {
    std::vector<std::vector<double>> points;
    std::vector<double> weights;

    std::size_t size() const noexcept { return points.size(); }

    std::vector<double> mean() const {
        if (points.empty()) return {};
        std::vector<double> m(points.front().size(), 0.0);
        double total = 0.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            for (std::size_t j = 0; j < m.size(); ++j) m[j] += weights[i] * points[i][j];
            total += weights[i];
        }
        for (auto& v : m) v /= total;
        return m;
    }
};

enum class PartitionerKind { single, grid, cart, dyadic };

struct PartitionerConfig {
    PartitionerKind kind = PartitionerKind::cart;
    std::vector<std::size_t> grid_bins;  // grid only
    CartConfig cart{};
    std::size_t dyadic_splits = 10;      // r
    SplitRule dyadic_rule = SplitRule::gini;
};

struct OuterLoopConfig {
    double epsilon_1 = 1.0;
    double g = 0.9;
    std::size_t max_rounds = 10;           // S_max
    Window window = Window::extended;
    PartitionerConfig partitioner{};
    std::optional<std::size_t> budget;     // global simulation budget across rounds
    std::uint64_t first_t = 1;             // index given to the first trial
};

struct RoundSummary {
    std::uint32_t round = 0;
    double epsilon = 0.0;
    std::size_t trials = 0;
    std::size_t accepted = 0;
    std::size_t arms = 0;
};

struct AbcTreeResult {
    ReferenceTable table;
    HistogramPosterior histogram;   // from the final round's beliefs
    Partition partition;            // partition used in the final round
    WeightedSample samples;         // accepted draws of `sample_round`
    std::uint32_t sample_round = 0;
    double sample_epsilon = 0.0;
    std::vector<RoundSummary> rounds;
};

namespace detail {

inline void validate(const OuterLoopConfig& c) {
    if (!(c.g > 0.0 && c.g < 1.0)) throw DomainError("outer loop: g must lie in (0, 1)");
    if (c.max_rounds < 1) throw DomainError("outer loop: S_max must be >= 1");
    if (!(c.epsilon_1 > 0.0)) throw DomainError("outer loop: epsilon_1 must be positive");
}

/// Holds the partitioner's state across rounds.
class PartitionState {
public:
    PartitionState(const PartitionerConfig& config, const Box& domain) : config_(config), domain_(domain) {
        switch (config.kind) {
            case PartitionerKind::single:
            case PartitionerKind::cart:
                current_ = Partition(domain);
                break;
            case PartitionerKind::grid:
                current_ = Partition::grid(domain, config.grid_bins);
                break;
            case PartitionerKind::dyadic:
                tree_ = DyadicTree(domain, config.dyadic_splits, config.dyadic_rule);
                current_ = tree_.partition();
                break;
        }
    }

    const Partition& current() const noexcept { return current_; }

    /// New partition after a round. `window` is the training window at the
    /// latest tolerance; `latest` the proposals of the round just finished.
    void refit(const LabeledPoints& window, const LabeledPoints& latest) {
        switch (config_.kind) {
            case PartitionerKind::single:
            case PartitionerKind::grid:
                break;
            case PartitionerKind::cart:
                current_ = window.size() > 0 ? fit_cart(domain_, window, config_.cart) : Partition(domain_);
                break;
            case PartitionerKind::dyadic:
                tree_ = refine_dyadic(std::move(tree_), latest);
                current_ = tree_.partition();
                break;
        }
    }

private:
    PartitionerConfig config_;
    Box domain_;
    Partition current_;
    DyadicTree tree_;
};

}  // namespace detail

/// Inner-loop routine used by the outer loop; lets MAP-Tree reuse the same skeleton.
using InnerRunner = std::function<InnerLoopResult(Problem&, const Partition&, BetaState, const InnerLoopConfig&,
                                                  Rng&, std::uint32_t, std::uint64_t)>;

struct OuterLoopState {
    ReferenceTable table;
    Partition final_partition;
    BetaState final_beliefs;
    std::vector<RoundSummary> rounds;
    std::vector<double> epsilons;
};

/// Outer loop skeleton: inner loop at eps_s, re-threshold the window at eps_s,
/// refit the partition, re-initialize beliefs from counts, eps_{s+1} = g eps_s.
inline OuterLoopState run_outer_loop(Problem& problem, const OuterLoopConfig& outer, const InnerLoopConfig& inner,
                                     Rng& rng, const InnerRunner& runner) {
    detail::validate(outer);
    OuterLoopState st;
    detail::PartitionState partitions(outer.partitioner, problem.prior.domain());
    BetaState beliefs(partitions.current().size());
    double epsilon = outer.epsilon_1;
    std::size_t used = 0;

    for (std::uint32_t s = 1; s <= outer.max_rounds; ++s) {
        std::size_t cap = inner.max_trials;
        if (outer.budget) {
            if (used >= *outer.budget) break;
            cap = std::min(cap, *outer.budget - used);
        }
        InnerLoopConfig cfg = inner;
        cfg.epsilon = epsilon;
        cfg.max_trials = cap;
        const Partition partition = partitions.current();
        auto res = runner(problem, partition, beliefs, cfg, rng, s, outer.first_t + used);
        used += res.records.size();
        st.rounds.push_back(RoundSummary{s, epsilon, res.records.size(), res.accepted, partition.size()});
        st.epsilons.push_back(epsilon);
        for (auto& r : res.records) st.table.append(std::move(r));
        st.final_partition = partition;
        st.final_beliefs = res.beliefs;

        const bool last = s == outer.max_rounds || (outer.budget && used >= *outer.budget);
        if (last) break;

        const auto window_records = st.table.window(outer.window, s);
        const auto window = LabeledPoints::from(window_records, epsilon);
        const auto latest = LabeledPoints::from(st.table.window(Window::rolling, s), epsilon);
        partitions.refit(window, latest);
        beliefs = reinit_beta(partitions.current(), window);
        epsilon *= outer.g;
    }
    return st;
}

/// ABC-Tree: the outer loop with the bandit inner loop. The posterior sample is
/// the accepted draws of the last round that met its quota (the last round if
/// none did), weighted by their importance weights.
inline AbcTreeResult run_abc_tree(Problem& problem, const OuterLoopConfig& outer, const InnerLoopConfig& inner,
                                  Rng& rng, const TrialObserver& observer = {}) {
    const InnerRunner runner = [&observer](Problem& p, const Partition& part, BetaState b, const InnerLoopConfig& c,
                                           Rng& r, std::uint32_t s, std::uint64_t t0) {
        return inner_loop(p, part, std::move(b), c, r, s, t0, observer);
    };
    auto st = run_outer_loop(problem, outer, inner, rng, runner);

    AbcTreeResult out;
    out.histogram = histogram_posterior(st.final_beliefs, st.final_partition, problem.prior);
    out.partition = st.final_partition;
    out.rounds = st.rounds;
    out.sample_round = st.rounds.back().round;
    for (auto it = st.rounds.rbegin(); it != st.rounds.rend(); ++it) {
        if (it->accepted >= inner.quota) {
            out.sample_round = it->round;
            break;
        }
    }
    out.sample_epsilon = st.epsilons[out.sample_round - 1];
    for (const auto& r : st.table.records()) {
        if (r.round == out.sample_round && r.reward) {
            out.samples.points.push_back(r.theta);
            out.samples.weights.push_back(r.weight);
        }
    }
    out.table = std::move(st.table);
    return out;
}

/// Tolerance at the given percentile of pilot discrepancies.
inline double percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw ShapeError("percentile: no values");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(pct / 100.0, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Median absolute deviation of each summary coordinate. Where it vanishes the
/// mean absolute deviation about the median is used, and 1 if that vanishes too.
inline std::vector<double> summary_scales(std::span<const std::vector<double>> summaries) {
    if (summaries.empty()) throw ShapeError("summary_scales: no summaries");
    const std::size_t m = summaries.front().size();
    std::vector<double> scale(m, 1.0);
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<double> col;
        for (const auto& s : summaries) {
            if (std::isfinite(s[j])) col.push_back(s[j]);
        }
        if (col.size() < 2) continue;
        const double med = percentile(col, 50.0);
        for (auto& v : col) v = std::abs(v - med);
        double mad = percentile(col, 50.0);
        if (!(mad > 0.0)) mad = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
        if (mad > 0.0 && std::isfinite(mad)) scale[j] = mad;
    }
    return scale;
}

struct SmcPopulation {
    double epsilon = 0.0;
    WeightedSample sample;   // weights normalized to sum 1
    std::size_t simulations = 0;
    std::size_t attempts = 0;
};

struct SmcResult {
    std::vector<SmcPopulation> populations;
    ReferenceTable table;
    std::size_t attempts = 0;
};

/// Population Monte Carlo ABC. Round 1 is rejection ABC to `population`
/// acceptances; later rounds perturb resampled particles with a Gaussian kernel
/// of diagonal covariance 2 x the weighted variance. Proposals outside the prior
/// support are discarded without simulation but charged to `budget`, which
/// counts proposal attempts. A round cut short by the budget is dropped.
inline SmcResult smc_abc(Problem& problem, std::span<const double> schedule, std::size_t population,
                         std::size_t budget, Rng& rng) {
    if (schedule.empty()) throw DomainError("smc_abc: empty schedule");
    for (std::size_t i = 1; i < schedule.size(); ++i) {
        if (!(schedule[i] < schedule[i - 1])) throw DomainError("smc_abc: schedule must decrease");
    }
    if (population < 2) throw DomainError("smc_abc: population must be >= 2");
    SmcResult out;
    std::uint64_t t = 1;
    const std::size_t d = problem.prior.dim();

    for (std::size_t s = 0; s < schedule.size(); ++s) {
        const double eps = schedule[s];
        SmcPopulation pop;
        pop.epsilon = eps;
        std::vector<double> kernel_sd(d, 0.0);
        std::vector<double> cumulative;
        const SmcPopulation* prev = out.populations.empty() ? nullptr : &out.populations.back();
        if (prev) {
            const auto m = prev->sample.mean();
            for (std::size_t j = 0; j < d; ++j) {
                double v = 0.0;
                for (std::size_t i = 0; i < prev->sample.size(); ++i) {
                    const double dx = prev->sample.points[i][j] - m[j];
                    v += prev->sample.weights[i] * dx * dx;
                }
                kernel_sd[j] = std::sqrt(2.0 * v);
                if (!(kernel_sd[j] > 0.0)) kernel_sd[j] = 1e-12 * problem.prior.domain().side(j);
            }
            cumulative.resize(prev->sample.size());
            std::partial_sum(prev->sample.weights.begin(), prev->sample.weights.end(), cumulative.begin());
        }

        std::vector<TrialRecord> round_records;
        while (pop.sample.size() < population && out.attempts < budget) {
            ++out.attempts;
            ++pop.attempts;
            std::vector<double> theta;
            if (!prev) {
                theta = problem.prior.sample(rng);
            } else {
                const double u = uniform01(rng) * cumulative.back();
                const auto ancestor = static_cast<std::size_t>(
                    std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
                const auto& base = prev->sample.points[std::min(ancestor, cumulative.size() - 1)];
                theta.resize(d);
                for (std::size_t j = 0; j < d; ++j) theta[j] = base[j] + kernel_sd[j] * standard_normal(rng);
                if (!(problem.prior.density(theta) > 0.0)) continue;
            }
            auto rec = run_trial(problem, theta, eps, rng);
            rec.t = t++;
            rec.round = static_cast<std::uint32_t>(s + 1);
            ++pop.simulations;
            if (rec.reward) {
                double w = 1.0;
                if (prev) {
                    double mix = 0.0;
                    for (std::size_t i = 0; i < prev->sample.size(); ++i) {
                        double logk = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double z = (theta[j] - prev->sample.points[i][j]) / kernel_sd[j];
                            logk += -0.5 * z * z - std::log(kernel_sd[j]);
                        }
                        mix += prev->sample.weights[i] * std::exp(logk);
                    }
                    w = problem.prior.density(theta) / mix;
                }
                rec.weight = w;
                pop.sample.points.push_back(theta);
                pop.sample.weights.push_back(w);
            }
            round_records.push_back(std::move(rec));
        }
        for (auto& r : round_records) out.table.append(std::move(r));
        if (pop.sample.size() < population) break;

        double total = 0.0;
        for (double w : pop.sample.weights) total += w;
        if (!(total > 0.0) || !std::isfinite(total)) throw DegeneratePopulationError("smc_abc: weights vanished");
        double sq = 0.0;
        for (auto& w : pop.sample.weights) {
            w /= total;
            sq += w * w;
        }
        if (1.0 / sq < 2.0) throw DegeneratePopulationError("smc_abc: effective sample size below 2");
        out.populations.push_back(std::move(pop));
    }
    return out;
}

}  // namespace abctree
