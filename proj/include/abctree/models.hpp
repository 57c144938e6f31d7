#pragma once

// Simulators and summary statistics for the built-in models.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abctree/core.hpp"
#include "abctree/errors.hpp"
#include "abctree/random.hpp"

namespace abctree {

/// Forward model theta -> summary statistics. Implementations must be pure
/// functions of (theta, rng state) so that seeded runs reproduce exactly.
class Simulator {
public:
    virtual ~Simulator() = default;

    virtual std::string name() const = 0;
    virtual std::size_t dim_theta() const = 0;
    virtual std::size_t dim_summary() const = 0;
    virtual std::vector<double> simulate(std::span<const double> theta, Rng& rng) = 0;

    virtual std::optional<Box> default_domain() const { return std::nullopt; }
    virtual std::optional<std::vector<double>> default_observed() const { return std::nullopt; }
};

namespace stats {

inline double mean(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v;
    return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
    if (x.size() < 2) return 0.0;
    const double m = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / static_cast<double>(x.size() - 1);
}

/// Lag-`lag` sample autocorrelation; 0 for a constant series.
inline double autocorrelation(std::span<const double> x, std::size_t lag) {
    if (x.size() <= lag + 1) return 0.0;
    const double m = mean(x);
    double den = 0.0;
    for (double v : x) den += (v - m) * (v - m);
    if (!(den > 0.0)) return 0.0;
    double num = 0.0;
    for (std::size_t i = lag; i < x.size(); ++i) num += (x[i] - m) * (x[i - lag] - m);
    return num / den;
}

inline double correlation(std::span<const double> x, std::span<const double> y) {
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0 && syy > 0.0)) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace stats

inline void check_theta(std::span<const double> theta, std::size_t dim, const char* who) {
    if (theta.size() != dim) throw ShapeError(std::string(who) + ": theta has the wrong length");
}

/// X | theta ~ N(theta, variance) in one dimension. Its epsilon-posterior under
/// a uniform prior is available in closed form, which makes it the tractable
/// reference model. Two presets exist: a 1D Gaussian on [-5, 5] and the
/// 100-cell discrete toy on [0, 100] (cell j holds U ~ Uniform(j-1, j) and
/// X | U ~ N(U, 5), which is exactly uniform theta inside the cell).
class GaussianLocationModel final : public Simulator {
public:
    GaussianLocationModel(std::string name, Box domain, double variance, double observed)
        : name_(std::move(name)), domain_(std::move(domain)), sd_(std::sqrt(variance)), observed_(observed) {
        if (domain_.dim() != 1) throw ShapeError("GaussianLocationModel: one-dimensional only");
        if (!(variance > 0.0)) throw DomainError("GaussianLocationModel: variance must be positive");
    }

    static GaussianLocationModel gaussian_1d() {
        return GaussianLocationModel("gaussian_1d", Box({-5.0}, {5.0}), 1.0, 0.5);
    }

    static GaussianLocationModel discrete_toy() {
        return GaussianLocationModel("toy_discrete", Box({0.0}, {100.0}), 5.0, 50.0);
    }

    std::string name() const override { return name_; }
    std::size_t dim_theta() const override { return 1; }
    std::size_t dim_summary() const override { return 1; }
    std::optional<Box> default_domain() const override { return domain_; }
    std::optional<std::vector<double>> default_observed() const override { return std::vector<double>{observed_}; }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        check_theta(theta, 1, "GaussianLocationModel");
        return {theta[0] + sd_ * standard_normal(rng)};
    }

    double sd() const noexcept { return sd_; }
    double observed() const noexcept { return observed_; }

    /// P(|X - x_obs| < eps | theta). Evaluated at the mirror image above x_obs,
    /// where both CDF terms are small and their difference keeps its precision.
    double acceptance_probability(double theta, double epsilon) const {
        theta = observed_ + std::abs(theta - observed_);
        return stats::normal_cdf((observed_ + epsilon - theta) / sd_) -
               stats::normal_cdf((observed_ - epsilon - theta) / sd_);
    }

    /// Integral of the acceptance probability over [lo, hi], in closed form via
    /// the antiderivative of Phi: G(z) = z Phi(z) + phi(z). Pieces below x_obs are
    /// mirrored above it for the same reason as in acceptance_probability.
    double integrated_acceptance(double lo, double hi, double epsilon) const {
        if (lo < observed_ && hi > observed_) {
            return integrated_acceptance(lo, observed_, epsilon) + integrated_acceptance(observed_, hi, epsilon);
        }
        if (hi <= observed_) {
            const double mlo = 2.0 * observed_ - hi;
            hi = 2.0 * observed_ - lo;
            lo = mlo;
        }
        const auto G = [](double z) { return z * stats::normal_cdf(z) + stats::normal_pdf(z); };
        const auto integral_phi = [&](double c) {
            return sd_ * (G((c - lo) / sd_) - G((c - hi) / sd_));
        };
        return integral_phi(observed_ + epsilon) - integral_phi(observed_ - epsilon);
    }

    /// Exact epsilon-posterior mass of each box under the uniform prior.
    std::vector<double> epsilon_posterior(const Partition& partition, double epsilon) const {
        std::vector<double> m(partition.size());
        double total = 0.0;
        for (std::size_t k = 0; k < partition.size(); ++k) {
            m[k] = integrated_acceptance(partition.box(k).lower(0), partition.box(k).upper(0), epsilon);
            total += m[k];
        }
        for (auto& v : m) v /= total;
        return m;
    }

    /// Mean acceptance rate of each box (the true arm reward means).
    std::vector<double> box_acceptance(const Partition& partition, double epsilon) const {
        std::vector<double> l(partition.size());
        for (std::size_t k = 0; k < partition.size(); ++k) {
            const auto& b = partition.box(k);
            l[k] = integrated_acceptance(b.lower(0), b.upper(0), epsilon) / b.volume();
        }
        return l;
    }

private:
    std::string name_;
    Box domain_;
    double sd_;
    double observed_;
};

/// X ~ 0.8 N(100 theta, 3) + 0.2 N(100 theta + 5, 0.25), theta in [0, 1]
/// (second arguments are variances).
class GaussianMixture1d final : public Simulator {
public:
    std::string name() const override { return "mixture_1d"; }
    std::size_t dim_theta() const override { return 1; }
    std::size_t dim_summary() const override { return 1; }
    std::optional<Box> default_domain() const override { return Box({0.0}, {1.0}); }
    std::optional<std::vector<double>> default_observed() const override { return std::vector<double>{50.0}; }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        check_theta(theta, 1, "GaussianMixture1d");
        const double loc = 100.0 * theta[0];
        if (uniform01(rng) < 0.8) return {loc + std::sqrt(3.0) * standard_normal(rng)};
        return {loc + 5.0 + 0.5 * standard_normal(rng)};
    }
};

/// X ~ 0.3 N(theta, I) + 0.7 N(theta + 3 * 1, I / 4) in two dimensions,
/// prior U(-5, 5)^2. The default observation (2, 2) places the dominant
/// posterior component, and the posterior mode, at (-1, -1).
class GaussianMixture2d final : public Simulator {
public:
    std::string name() const override { return "mixture_2d"; }
    std::size_t dim_theta() const override { return 2; }
    std::size_t dim_summary() const override { return 2; }
    std::optional<Box> default_domain() const override { return Box({-5.0, -5.0}, {5.0, 5.0}); }
    std::optional<std::vector<double>> default_observed() const override { return std::vector<double>{2.0, 2.0}; }

    static std::vector<double> posterior_mode() { return {-1.0, -1.0}; }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        check_theta(theta, 2, "GaussianMixture2d");
        if (uniform01(rng) < 0.3) {
            const double z0 = standard_normal(rng);
            const double z1 = standard_normal(rng);
            return {theta[0] + z0, theta[1] + z1};
        }
        const double z0 = standard_normal(rng);
        const double z1 = standard_normal(rng);
        return {theta[0] + 3.0 + 0.5 * z0, theta[1] + 3.0 + 0.5 * z1};
    }
};

/// Heston stochastic volatility, theta = (kappa, xi, nu0, rho, sigma):
///   dS = mu S dt + sqrt(nu) S dW1,   dnu = kappa (xi - nu) dt + sigma sqrt(nu) dW2,
/// corr(dW1, dW2) = rho. Log-price Euler scheme with full truncation of nu, unit
/// horizon split into `steps` increments.
class HestonModel final : public Simulator {
public:
    static constexpr double kMu = 0.02;
    static constexpr double kS0 = 100.0;
    static constexpr std::uint64_t kObservedSeed = 20240917;

    explicit HestonModel(std::size_t steps = 2000) : steps_(steps) {
        if (steps_ < 4) throw DomainError("HestonModel: need at least 4 steps");
    }

    std::string name() const override { return "heston"; }
    std::size_t dim_theta() const override { return 5; }
    std::size_t dim_summary() const override { return 7; }
    std::optional<Box> default_domain() const override {
        return Box({0.0, 0.0, 0.0, -1.0, 0.0}, {10.0, 1.0, 1.0, 1.0, 1.0});
    }

    /// True parameter behind the default observation: one prior draw under a fixed seed.
    std::vector<double> true_theta() const {
        Rng rng = make_rng(kObservedSeed, 0);
        return default_domain()->sample_uniform(rng);
    }

    std::optional<std::vector<double>> default_observed() const override {
        Rng rng = make_rng(kObservedSeed, 1);
        HestonModel copy(steps_);
        return copy.simulate(true_theta(), rng);
    }

    std::vector<double> log_returns(std::span<const double> theta, Rng& rng) const {
        check_theta(theta, 5, "HestonModel");
        const double kappa = theta[0];
        const double xi = theta[1];
        const double rho = std::clamp(theta[3], -1.0, 1.0);
        const double sigma = theta[4];
        const double dt = 1.0 / static_cast<double>(steps_);
        const double sqdt = std::sqrt(dt);
        const double orth = std::sqrt(std::max(0.0, 1.0 - rho * rho));
        double nu = theta[2];
        std::vector<double> r(steps_);
        for (std::size_t i = 0; i < steps_; ++i) {
            const double z1 = standard_normal(rng);
            const double z2 = rho * z1 + orth * standard_normal(rng);
            const double nu_pos = std::max(nu, 0.0);
            const double vol = std::sqrt(nu_pos);
            r[i] = (kMu - 0.5 * nu_pos) * dt + vol * sqdt * z1;
            nu += kappa * (xi - nu_pos) * dt + sigma * vol * sqdt * z2;
        }
        return r;
    }

    /// Summary statistics of a log-return series, in order: mean, mean of
    /// squares, log sd, log sd of squares, lag-1 and lag-2 autocorrelation of
    /// squares, correlation of returns with squares.
    static std::vector<double> summarize(std::span<const double> r) {
        std::vector<double> sq(r.size());
        for (std::size_t i = 0; i < r.size(); ++i) sq[i] = r[i] * r[i];
        std::vector<double> s{
            stats::mean(r),
            stats::mean(sq),
            0.5 * std::log(stats::variance(r)),
            0.5 * std::log(stats::variance(sq)),
            stats::autocorrelation(sq, 1),
            stats::autocorrelation(sq, 2),
            stats::correlation(r, sq),
        };
        for (double v : r) {
            if (!std::isfinite(v)) return std::vector<double>(7, std::numeric_limits<double>::infinity());
        }
        return s;
    }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        return summarize(log_returns(theta, rng));
    }

private:
    std::size_t steps_;
};

/// Stochastic Lotka-Volterra predator-prey model simulated as a Markov jump
/// process (Gillespie). Events: prey birth theta1 x, predation theta2 x y,
/// predator birth theta3 x y, predator death theta4 y.
class LotkaVolterraModel final : public Simulator {
public:
    struct Settings {
        double prey0 = 50.0;
        double predator0 = 100.0;
        double horizon = 30.0;
        std::size_t records = 20;
        std::size_t event_cap = 100000;
    };

    struct Path {
        std::vector<double> prey;
        std::vector<double> predators;
        std::size_t events = 0;
        bool truncated = false;
    };

    static constexpr std::uint64_t kObservedSeed = 20240918;

    LotkaVolterraModel() = default;
    explicit LotkaVolterraModel(Settings s) : settings_(s) {}

    std::string name() const override { return "lotka_volterra"; }
    std::size_t dim_theta() const override { return 4; }
    std::size_t dim_summary() const override { return 9; }
    std::optional<Box> default_domain() const override { return Box::unit(4); }

    static std::vector<double> true_theta() { return {0.5, 0.01, 0.01, 0.5}; }

    std::optional<std::vector<double>> default_observed() const override {
        Rng rng = make_rng(kObservedSeed);
        LotkaVolterraModel copy(settings_);
        return copy.simulate(true_theta(), rng);
    }

    const Settings& settings() const noexcept { return settings_; }

    /// Populations at times horizon * (i + 1) / records. Past the event cap the
    /// remaining grid points repeat the last state.
    Path path(std::span<const double> theta, Rng& rng) const {
        check_theta(theta, 4, "LotkaVolterraModel");
        Path out;
        out.prey.reserve(settings_.records);
        out.predators.reserve(settings_.records);
        double x = settings_.prey0;
        double y = settings_.predator0;
        double t = 0.0;
        std::size_t next = 0;
        const auto grid_time = [&](std::size_t i) {
            return settings_.horizon * static_cast<double>(i + 1) / static_cast<double>(settings_.records);
        };
        while (next < settings_.records) {
            const double r1 = theta[0] * x;
            const double r2 = theta[1] * x * y;
            const double r3 = theta[2] * x * y;
            const double r4 = theta[3] * y;
            const double total = r1 + r2 + r3 + r4;
            double wait = std::numeric_limits<double>::infinity();
            if (total > 0.0 && out.events < settings_.event_cap) {
                wait = -std::log1p(-uniform01(rng)) / total;
            } else if (total > 0.0) {
                out.truncated = true;
            }
            while (next < settings_.records && t + wait > grid_time(next)) {
                out.prey.push_back(x);
                out.predators.push_back(y);
                ++next;
            }
            if (next >= settings_.records || !std::isfinite(wait)) break;
            t += wait;
            const double u = uniform01(rng) * total;
            if (u < r1) {
                x += 1.0;
            } else if (u < r1 + r2) {
                x -= 1.0;
            } else if (u < r1 + r2 + r3) {
                y += 1.0;
            } else {
                y -= 1.0;
            }
            x = std::max(x, 0.0);
            y = std::max(y, 0.0);
            ++out.events;
        }
        return out;
    }

    /// Per series: mean, log(1 + variance), lag-1 and lag-2 autocorrelation;
    /// then the prey/predator cross-correlation.
    static std::vector<double> summarize(const Path& p) {
        return {
            stats::mean(p.prey),
            stats::mean(p.predators),
            std::log1p(stats::variance(p.prey)),
            std::log1p(stats::variance(p.predators)),
            stats::autocorrelation(p.prey, 1),
            stats::autocorrelation(p.prey, 2),
            stats::autocorrelation(p.predators, 1),
            stats::autocorrelation(p.predators, 2),
            stats::correlation(p.prey, p.predators),
        };
    }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        return summarize(path(theta, rng));
    }

private:
    Settings settings_;
};

/// Finite-arm model with prescribed acceptance rates: theta lies in [0, K),
/// cell j = floor(theta) is accepted at epsilon = 1 with probability rates[j].
/// The summary is u / rates[j] with u ~ Uniform(0, 1) and observed value 0.
class BernoulliArmsModel final : public Simulator {
public:
    explicit BernoulliArmsModel(std::vector<double> rates) : rates_(std::move(rates)) {
        if (rates_.empty()) throw ShapeError("BernoulliArmsModel: no arms");
        for (double r : rates_) {
            if (!(r > 0.0 && r <= 1.0)) throw DomainError("BernoulliArmsModel: rates must lie in (0, 1]");
        }
    }

    /// Fifty arms with a shallow peak at the 28th value and near-competitors,
    /// the structure of the finite MAP identification example.
    static BernoulliArmsModel map_fifty() {
        std::vector<double> rates(50);
        for (std::size_t j = 0; j < 50; ++j) {
            const double x = static_cast<double>(j);
            rates[j] = 0.05 + 0.55 * std::exp(-0.5 * (x - 27.0) * (x - 27.0) / 9.0) +
                       0.40 * std::exp(-0.5 * (x - 12.0) * (x - 12.0) / 4.0);
        }
        rates[24] = 0.52;
        return BernoulliArmsModel(std::move(rates));
    }

    std::string name() const override { return "bernoulli_arms"; }
    std::size_t dim_theta() const override { return 1; }
    std::size_t dim_summary() const override { return 1; }
    std::optional<Box> default_domain() const override {
        return Box({0.0}, {static_cast<double>(rates_.size())});
    }
    std::optional<std::vector<double>> default_observed() const override { return std::vector<double>{0.0}; }

    const std::vector<double>& rates() const noexcept { return rates_; }
    std::size_t best_arm() const {
        return static_cast<std::size_t>(std::max_element(rates_.begin(), rates_.end()) - rates_.begin());
    }

    Partition arms_partition() const {
        const std::size_t bins[1] = {rates_.size()};
        return Partition::grid(*default_domain(), bins);
    }

    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        check_theta(theta, 1, "BernoulliArmsModel");
        const auto j = std::min(rates_.size() - 1, static_cast<std::size_t>(std::max(0.0, std::floor(theta[0]))));
        return {uniform01(rng) / rates_[j]};
    }

private:
    std::vector<double> rates_;
};

/// Builds a built-in simulator by name; nullptr for unknown names.
inline std::shared_ptr<Simulator> make_builtin_simulator(const std::string& name) {
    if (name == "gaussian_1d") return std::make_shared<GaussianLocationModel>(GaussianLocationModel::gaussian_1d());
    if (name == "toy_discrete") return std::make_shared<GaussianLocationModel>(GaussianLocationModel::discrete_toy());
    if (name == "mixture_1d") return std::make_shared<GaussianMixture1d>();
    if (name == "mixture_2d") return std::make_shared<GaussianMixture2d>();
    if (name == "heston") return std::make_shared<HestonModel>();
    if (name == "lotka_volterra") return std::make_shared<LotkaVolterraModel>();
    if (name == "bernoulli_arms") return std::make_shared<BernoulliArmsModel>(BernoulliArmsModel::map_fifty());
    return nullptr;
}

inline std::vector<std::string> builtin_simulator_names() {
    return {"gaussian_1d", "toy_discrete", "mixture_1d", "mixture_2d", "heston", "lotka_volterra", "bernoulli_arms"};
}

}  // namespace abctree
