#pragma once

// Likelihood-free MAP estimation: best-arm inner loop, MAP-Tree, and mode
// estimators (weighted Gaussian KDE, best-bin center).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "abctree/abc.hpp"
#include "abctree/bandit.hpp"
#include "abctree/core.hpp"
#include "abctree/errors.hpp"
#include "abctree/log.hpp"
#include "abctree/random.hpp"

namespace abctree {

enum class ModeEstimator { kde, bin_center };

struct MapConfig {
    std::optional<double> top_two;           // b in (0, 1) when enabled
    ModeEstimator mode_estimator = ModeEstimator::kde;
    std::optional<double> kde_bandwidth;     // fixed bandwidth; Silverman's rule when empty
};

inline constexpr std::size_t kKdeMaxDim = 6;

/// Per-arm peak score pi_k * alpha_k / (|Omega_k| (alpha_k + beta_k)).
inline std::vector<double> peak_scores(const BetaState& beliefs, const Partition& partition,
                                       std::span<const double> prior_masses) {
    std::vector<double> s(beliefs.size());
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = beliefs.mean(k) * prior_masses[k] / partition.box(k).volume();
    return s;
}

inline std::size_t best_bin(const BetaState& beliefs, const Partition& partition,
                            std::span<const double> prior_masses) {
    return detail::argmax(peak_scores(beliefs, partition, prior_masses));
}

namespace detail {

inline std::size_t second_best(std::span<const double> v, std::size_t best) {
    std::size_t out = best == 0 ? 1 : 0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k != best && v[k] > v[out]) out = k;
    }
    return out;
}

/// Thompson draw on peak scores with the optional top-two branch; when no
/// challenger appears within the resample cap the runner-up of the first draw
/// is played.
inline std::size_t map_select(const BetaState& beliefs, std::span<const double> scale, std::optional<double> top_two,
                              Rng& rng) {
    const std::size_t K = beliefs.size();
    if (K == 1) return 0;
    const auto draw = [&] {
        auto eta = beliefs.sample(rng);
        for (std::size_t k = 0; k < K; ++k) eta[k] *= scale[k];
        return eta;
    };
    const auto first = draw();
    const std::size_t lead = argmax(first);
    if (!top_two || uniform01(rng) < *top_two) return lead;
    for (int attempt = 0; attempt < kTopTwoResampleCap; ++attempt) {
        const std::size_t challenger = argmax(draw());
        if (challenger != lead) return challenger;
    }
    return second_best(first, lead);
}

}  // namespace detail

/// Best-arm inner loop: sample eta ~ Beta, play argmax eta_k pi_k / |Omega_k|
/// (top-two optional), simulate, update. Weights are recorded as 1.
inline InnerLoopResult map_inner_loop(Problem& problem, const Partition& partition, BetaState beliefs,
                                      const InnerLoopConfig& config, const MapConfig& map, Rng& rng,
                                      std::uint32_t round = 1, std::uint64_t first_t = 1,
                                      const TrialObserver& observer = {}) {
    detail::validate(config);
    if (beliefs.size() != partition.size()) throw ShapeError("map_inner_loop: belief state size != partition size");
    if (map.top_two && !(*map.top_two > 0.0 && *map.top_two < 1.0)) {
        throw DomainError("map_inner_loop: top-two b must lie in (0, 1)");
    }
    const auto prior_masses = problem.prior.masses(partition);
    std::vector<double> scale(partition.size());
    for (std::size_t k = 0; k < scale.size(); ++k) scale[k] = prior_masses[k] / partition.box(k).volume();

    InnerLoopResult out;
    std::uint64_t t = first_t;
    while (out.accepted < config.quota && out.records.size() < config.max_trials) {
        const std::size_t arm = detail::map_select(beliefs, scale, map.top_two, rng);
        auto rec = run_trial(problem, problem.prior.sample_in(partition.box(arm), rng), config.epsilon, rng);
        rec.t = t++;
        rec.round = round;
        rec.arm = arm;
        beliefs.update(arm, rec.reward);
        out.accepted += rec.reward;
        out.records.push_back(std::move(rec));
        if (observer) observer(TrialEvent{out.records.back(), beliefs, partition, {}, prior_masses});
    }
    out.beliefs = std::move(beliefs);
    return out;
}

/// Silverman's rule per coordinate on a weighted sample:
/// h_j = (4 / (d + 2))^(1 / (d + 4)) n_eff^(-1 / (d + 4)) sd_j.
inline std::vector<double> silverman_bandwidth(const WeightedSample& sample) {
    if (sample.size() < 2) throw ShapeError("silverman_bandwidth: need at least 2 samples");
    const std::size_t d = sample.points.front().size();
    double sw = 0.0;
    double sw2 = 0.0;
    for (double w : sample.weights) {
        sw += w;
        sw2 += w * w;
    }
    const double n_eff = sw * sw / sw2;
    const auto m = sample.mean();
    const double factor = std::pow(4.0 / (static_cast<double>(d) + 2.0), 1.0 / (static_cast<double>(d) + 4.0)) *
                          std::pow(n_eff, -1.0 / (static_cast<double>(d) + 4.0));
    std::vector<double> h(d);
    for (std::size_t j = 0; j < d; ++j) {
        double v = 0.0;
        for (std::size_t i = 0; i < sample.size(); ++i) v += sample.weights[i] * (sample.points[i][j] - m[j]) * (sample.points[i][j] - m[j]);
        v /= sw;
        const double sd = std::sqrt(v);
        h[j] = sd > 0.0 ? factor * sd : 1e-9 * std::max(1.0, std::abs(m[j]));
    }
    return h;
}

/// Weighted Gaussian product-kernel density estimate with diagonal bandwidths.
class WeightedKde {
public:
    WeightedKde(const WeightedSample& sample, std::vector<double> bandwidth)
        : sample_(&sample), h_(std::move(bandwidth)) {
        if (sample.size() == 0) throw ShapeError("WeightedKde: empty sample");
        double total = 0.0;
        for (double w : sample.weights) total += w;
        norm_ = 1.0 / total;
        for (double h : h_) norm_ /= h * std::sqrt(2.0 * std::numbers::pi);
    }

    const std::vector<double>& bandwidth() const noexcept { return h_; }

    double operator()(std::span<const double> x) const {
        double f = 0.0;
        for (std::size_t i = 0; i < sample_->size(); ++i) f += sample_->weights[i] * kernel(x, sample_->points[i]);
        return f * norm_;
    }

    /// Density and mean-shift displacement sum_i w_i K_i (x_i - x) / sum_i w_i K_i.
    double with_shift(std::span<const double> x, std::vector<double>& shift) const {
        shift.assign(x.size(), 0.0);
        double f = 0.0;
        for (std::size_t i = 0; i < sample_->size(); ++i) {
            const double k = sample_->weights[i] * kernel(x, sample_->points[i]);
            f += k;
            for (std::size_t j = 0; j < x.size(); ++j) shift[j] += k * (sample_->points[i][j] - x[j]);
        }
        if (f > 0.0) {
            for (auto& s : shift) s /= f;
        }
        return f * norm_;
    }

private:
    double kernel(std::span<const double> x, std::span<const double> y) const {
        double e = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double z = (x[j] - y[j]) / h_[j];
            e += z * z;
        }
        return std::exp(-0.5 * e);
    }

    const WeightedSample* sample_;
    std::vector<double> h_;
    double norm_ = 1.0;
};

/// Mode of the weighted KDE: the best of (up to `max_candidates`, evenly
/// strided) sample points, refined by gradient ascent with step halving.
inline std::vector<double> kde_mode(const WeightedSample& sample, std::optional<double> fixed_bandwidth = std::nullopt,
                                    std::size_t max_candidates = 2000) {
    if (sample.size() < 2) throw ShapeError("kde_mode: need at least 2 samples");
    const std::size_t d = sample.points.front().size();
    if (d > kKdeMaxDim) throw DimensionError("kde_mode: dimension above 6; use the bin-center estimator");
    std::vector<double> h;
    if (fixed_bandwidth) {
        if (!(*fixed_bandwidth > 0.0)) throw DomainError("kde_mode: bandwidth must be positive");
        h.assign(d, *fixed_bandwidth);
    } else {
        h = silverman_bandwidth(sample);
    }
    const WeightedKde kde(sample, h);

    const std::size_t stride = std::max<std::size_t>(1, (sample.size() + max_candidates - 1) / max_candidates);
    std::size_t best = 0;
    double best_f = -1.0;
    for (std::size_t i = 0; i < sample.size(); i += stride) {
        const double f = kde(sample.points[i]);
        if (f > best_f) {
            best_f = f;
            best = i;
        }
    }

    std::vector<double> x = sample.points[best];
    std::vector<double> shift;
    double f = kde.with_shift(x, shift);
    double step = 1.0;
    std::vector<double> trial(d);
    for (int it = 0; it < 200; ++it) {
        double len = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            trial[j] = x[j] + step * shift[j];
            len += (step * shift[j] / h[j]) * (step * shift[j] / h[j]);
        }
        if (std::sqrt(len) < 1e-8) break;
        std::vector<double> trial_shift;
        const double ft = kde.with_shift(trial, trial_shift);
        if (ft > f) {
            x = trial;
            f = ft;
            shift = std::move(trial_shift);
            step = std::min(1.0, 2.0 * step);
        } else {
            step *= 0.5;
        }
    }
    return x;
}

inline std::vector<double> bin_center_mode(const BetaState& beliefs, const Partition& partition, const Prior& prior) {
    return partition.box(best_bin(beliefs, partition, prior.masses(partition))).center();
}

struct MapResult {
    std::vector<double> theta_map;
    std::size_t best_bin = 0;
    std::vector<double> score_trace;  // best-bin peak score at the end of each round
    ReferenceTable table;
    Partition partition;
    BetaState beliefs;
    double final_epsilon = 0.0;
    std::size_t final_accepted = 0;   // accepted draws used for the KDE mode
    bool used_bin_center = false;
    std::vector<RoundSummary> rounds;
};

/// MAP-Tree: the outer loop with the best-arm inner loop, then the mode of the
/// draws accepted at the final tolerance (KDE) or the best bin's center.
inline MapResult run_map_tree(Problem& problem, const OuterLoopConfig& outer, const InnerLoopConfig& inner,
                              const MapConfig& map, Rng& rng, const TrialObserver& observer = {}) {
    std::vector<double> trace;
    const InnerRunner runner = [&](Problem& p, const Partition& part, BetaState b, const InnerLoopConfig& c, Rng& r,
                                   std::uint32_t s, std::uint64_t t0) {
        auto res = map_inner_loop(p, part, std::move(b), c, map, r, s, t0, observer);
        const auto scores = peak_scores(res.beliefs, part, p.prior.masses(part));
        trace.push_back(scores[detail::argmax(scores)]);
        return res;
    };
    auto st = run_outer_loop(problem, outer, inner, rng, runner);

    MapResult out;
    out.partition = st.final_partition;
    out.beliefs = st.final_beliefs;
    out.best_bin = best_bin(out.beliefs, out.partition, problem.prior.masses(out.partition));
    out.score_trace = std::move(trace);
    out.rounds = st.rounds;
    out.final_epsilon = st.epsilons.back();

    WeightedSample accepted;
    for (const auto& r : st.table.records()) {
        if (r.discrepancy < out.final_epsilon) {
            accepted.points.push_back(r.theta);
            accepted.weights.push_back(1.0);
        }
    }
    out.final_accepted = accepted.size();
    if (map.mode_estimator == ModeEstimator::kde && accepted.size() >= 2) {
        out.theta_map = kde_mode(accepted, map.kde_bandwidth);
        const Box& dom = problem.prior.domain();
        for (std::size_t j = 0; j < out.theta_map.size(); ++j) {
            out.theta_map[j] = std::clamp(out.theta_map[j], dom.lower(j), dom.upper(j));
        }
    } else {
        out.used_bin_center = map.mode_estimator == ModeEstimator::kde;
        if (out.used_bin_center) {
            log::warn("MAP-Tree: " + std::to_string(accepted.size()) +
                      " draws accepted at the final tolerance; using the best bin's center");
        }
        out.theta_map = out.partition.box(out.best_bin).center();
    }
    out.table = std::move(st.table);
    return out;
}

}  // namespace abctree
