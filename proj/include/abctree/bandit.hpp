#pragma once

// Beta-Bernoulli arm beliefs, Thompson / top-two selection, and the
// regularized-exploitation maps q*(p) for the three proposal utilities.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "abctree/errors.hpp"
#include "abctree/random.hpp"

namespace abctree {

/// Per-arm Beta(alpha_k, beta_k) beliefs over the arm's ABC acceptance rate.
class BetaState {
public:
    BetaState() = default;

    explicit BetaState(std::size_t arms, double alpha0 = 1.0, double beta0 = 1.0)
        : alpha_(arms, alpha0), beta_(arms, beta0) {
        if (!(alpha0 > 0.0 && beta0 > 0.0)) throw DomainError("BetaState: pseudo-counts must be positive");
    }

    BetaState(std::vector<double> alpha, std::vector<double> beta)
        : alpha_(std::move(alpha)), beta_(std::move(beta)) {
        if (alpha_.size() != beta_.size()) throw ShapeError("BetaState: alpha/beta length mismatch");
        for (std::size_t k = 0; k < alpha_.size(); ++k) {
            if (!(alpha_[k] > 0.0 && beta_[k] > 0.0)) throw DomainError("BetaState: pseudo-counts must be positive");
        }
    }

    std::size_t size() const noexcept { return alpha_.size(); }
    double alpha(std::size_t k) const { return alpha_[k]; }
    double beta(std::size_t k) const { return beta_[k]; }
    const std::vector<double>& alphas() const noexcept { return alpha_; }
    const std::vector<double>& betas() const noexcept { return beta_; }

    double mean(std::size_t k) const { return alpha_[k] / (alpha_[k] + beta_[k]); }

    std::vector<double> means() const {
        std::vector<double> eta(size());
        for (std::size_t k = 0; k < size(); ++k) eta[k] = mean(k);
        return eta;
    }

    std::vector<double> sample(Rng& rng) const {
        std::vector<double> eta(size());
        for (std::size_t k = 0; k < size(); ++k) eta[k] = sample_beta(rng, alpha_[k], beta_[k]);
        return eta;
    }

    /// Conjugate update after observing reward `y` on `arm`.
    void update(std::size_t arm, std::uint8_t y) {
        if (arm >= size()) throw ShapeError("BetaState::update: arm index out of range");
        alpha_[arm] += y ? 1.0 : 0.0;
        beta_[arm] += y ? 0.0 : 1.0;
    }

private:
    std::vector<double> alpha_;
    std::vector<double> beta_;
};

inline BetaState update(BetaState state, std::size_t arm, std::uint8_t reward) {
    state.update(arm, reward);
    return state;
}

/// p_hat_k proportional to eta_k * prior_k, with eta the Beta means.
inline std::vector<double> binned_posterior(std::span<const double> eta, std::span<const double> prior_masses) {
    if (eta.size() != prior_masses.size()) throw ShapeError("binned_posterior: length mismatch");
    std::vector<double> p(eta.size());
    double total = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] = eta[k] * prior_masses[k];
        total += p[k];
    }
    if (!(total > 0.0)) throw DegenerateStateError("binned_posterior: every arm has zero posterior weight");
    for (auto& v : p) v /= total;
    return p;
}

inline std::vector<double> binned_posterior(const BetaState& state, std::span<const double> prior_masses) {
    const auto eta = state.means();
    return binned_posterior(std::span<const double>(eta), prior_masses);
}

enum class UtilityKind { omega1, omega2, omega3 };

/// Proposal utility. omega3 additionally needs per-arm acceptance rates.
struct Utility {
    UtilityKind kind = UtilityKind::omega1;
    std::vector<double> acceptance;
};

namespace detail {

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k) {
        if (v[k] > v[best]) best = k;
    }
    return best;
}

inline void check_simplex(std::span<const double> p, const char* who) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw DomainError(std::string(who) + ": negative or NaN probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError(std::string(who) + ": vector is not on the simplex");
}

}  // namespace detail

/// Sampling-efficiency implicit function g(p, A) whose root fixes the omega2 optimum.
inline double omega2_residual(std::span<const double> p, std::span<const double> prior, double a) {
    double g = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] == 0.0) continue;
        const double r = p[k] / prior[k];
        g += (a - r) * std::sqrt(p[k] * prior[k] / (2.0 * a - r));
    }
    return g;
}

/// Root A* of g(p, .) by bisection on (max r / 2, max r], r_k = p_k / prior_k.
inline double omega2_root(std::span<const double> p, std::span<const double> prior) {
    double rmax = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] == 0.0) continue;
        if (!(prior[k] > 0.0)) throw InvalidPriorError("omega2: prior mass must be positive on the support of p");
        rmax = std::max(rmax, p[k] / prior[k]);
    }
    if (!(rmax > 0.0)) throw DegenerateStateError("omega2: p has no support");
    double lo = 0.5 * rmax * (1.0 + 1e-12);
    double hi = rmax;
    if (omega2_residual(p, prior, lo) >= 0.0) return lo;
    for (int it = 0; it < 200 && (hi - lo) > 1e-15 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (omega2_residual(p, prior, mid) < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

/// Fixed point of q_k ~ p_k exp(l_k / L), L = sum_j q_j l_j, found by bisection on
/// the scalar L: L - h(L) is strictly increasing on [min l, max l].
inline std::vector<double> omega3_proposal(std::span<const double> p, std::span<const double> acceptance) {
    const std::size_t K = p.size();
    double lmin = std::numeric_limits<double>::infinity();
    double lmax = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        if (p[k] == 0.0) continue;
        if (!(acceptance[k] >= 0.0)) throw DomainError("omega3: acceptance rates must be >= 0");
        lmin = std::min(lmin, acceptance[k]);
        lmax = std::max(lmax, acceptance[k]);
    }
    std::vector<double> q(p.begin(), p.end());
    if (!(lmax > 0.0) || lmax == lmin) return q;

    const auto tilt = [&](double level) {
        double shift = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
            if (p[k] > 0.0) shift = std::max(shift, acceptance[k] / level);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            q[k] = p[k] > 0.0 ? p[k] * std::exp(acceptance[k] / level - shift) : 0.0;
            z += q[k];
        }
        double h = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            q[k] /= z;
            h += q[k] * acceptance[k];
        }
        return h;
    };

    double lo = lmin > 0.0 ? lmin : lmax * 1e-300;
    double hi = lmax;
    for (int it = 0; it < 300 && (hi - lo) > 1e-15 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid - tilt(mid) < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    tilt(0.5 * (lo + hi));
    return q;
}

/// Largest |q_k - p_k exp(l_k/L)/Z| at q; zero at the omega3 optimum.
inline double omega3_stationarity_residual(std::span<const double> q, std::span<const double> p,
                                           std::span<const double> acceptance) {
    double level = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) level += q[k] * acceptance[k];
    if (!(level > 0.0)) return 0.0;
    double shift = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (p[k] > 0.0) shift = std::max(shift, acceptance[k] / level);
    }
    std::vector<double> f(q.size());
    double z = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        f[k] = p[k] > 0.0 ? p[k] * std::exp(acceptance[k] / level - shift) : 0.0;
        z += f[k];
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) worst = std::max(worst, std::abs(q[k] - f[k] / z));
    return worst;
}

/// Value of the utility omega_p(q).
inline double utility_value(const Utility& u, std::span<const double> p, std::span<const double> q,
                            std::span<const double> prior) {
    if (p.size() != q.size()) throw ShapeError("utility_value: length mismatch");
    switch (u.kind) {
        case UtilityKind::omega1: {
            double s = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) s += (q[k] - p[k]) * (q[k] - p[k]);
            return -s;
        }
        case UtilityKind::omega2: {
            if (prior.size() != p.size()) throw ShapeError("utility_value: omega2 needs prior masses");
            double num = 0.0;
            double den = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (p[k] == 0.0) continue;
                num += q[k] * p[k] / prior[k];
                if (q[k] == 0.0) return 0.0;
                den += p[k] * prior[k] / q[k];
            }
            return num / den;
        }
        case UtilityKind::omega3: {
            if (u.acceptance.size() != p.size()) throw ShapeError("utility_value: omega3 needs acceptance rates");
            double acc = 0.0;
            double kl = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) {
                acc += q[k] * u.acceptance[k];
                if (q[k] > 0.0) {
                    if (p[k] == 0.0) return -std::numeric_limits<double>::infinity();
                    kl += q[k] * std::log(q[k] / p[k]);
                }
            }
            return std::log(acc) - kl;
        }
    }
    return 0.0;
}

/// Maximizer q*(p) of the utility over the simplex.
inline std::vector<double> optimal_proposal(const Utility& u, std::span<const double> p,
                                            std::span<const double> prior) {
    switch (u.kind) {
        case UtilityKind::omega1:
            return std::vector<double>(p.begin(), p.end());
        case UtilityKind::omega2: {
            if (prior.size() != p.size()) throw ShapeError("optimal_proposal: omega2 needs prior masses");
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (!(prior[k] > 0.0)) throw InvalidPriorError("optimal_proposal: omega2 requires positive prior masses");
            }
            const double a = omega2_root(p, prior);
            std::vector<double> q(p.size(), 0.0);
            double total = 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (p[k] == 0.0) continue;
                const double r = p[k] / prior[k];
                q[k] = std::sqrt(p[k] * prior[k] / std::max(2.0 * a - r, 1e-300));
                total += q[k];
            }
            for (auto& v : q) v /= total;
            return q;
        }
        case UtilityKind::omega3: {
            if (u.acceptance.size() != p.size()) throw ShapeError("optimal_proposal: omega3 needs acceptance rates");
            auto q = omega3_proposal(p, u.acceptance);
            const double res = omega3_stationarity_residual(q, p, u.acceptance);
            if (res > 1e-6) throw ConvergenceError("optimal_proposal: omega3 fixed point not reached", res);
            return q;
        }
    }
    return {};
}

/// Categorical draw k ~ q. A single arm is returned without consuming randomness.
inline std::size_t select_arm(std::span<const double> q, Rng& rng) {
    if (q.empty()) throw ShapeError("select_arm: empty proposal");
    if (q.size() == 1) return 0;
    double total = 0.0;
    for (double v : q) total += v;
    double u = uniform01(rng) * total;
    std::size_t last_positive = 0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (q[k] <= 0.0) continue;
        last_positive = k;
        if (u < q[k]) return k;
        u -= q[k];
    }
    return last_positive;
}

inline constexpr int kTopTwoResampleCap = 10000;

/// Argmax of sampled eta_k * scale_k (scale defaults to 1). With `top_two = b`,
/// with probability 1-b the full vector is redrawn until a different arm leads.
inline std::size_t thompson_select(const BetaState& state, Rng& rng, std::optional<double> top_two = std::nullopt,
                                   std::span<const double> scale = {}) {
    if (state.size() == 0) throw ShapeError("thompson_select: no arms");
    if (!scale.empty() && scale.size() != state.size()) throw ShapeError("thompson_select: scale length mismatch");
    const auto draw = [&] {
        auto eta = state.sample(rng);
        if (!scale.empty()) {
            for (std::size_t k = 0; k < eta.size(); ++k) eta[k] *= scale[k];
        }
        return detail::argmax(eta);
    };
    const std::size_t first = draw();
    if (!top_two) return first;
    if (!(*top_two > 0.0 && *top_two < 1.0)) throw DomainError("thompson_select: top-two b must lie in (0,1)");
    if (uniform01(rng) < *top_two || state.size() == 1) return first;
    for (int attempt = 0; attempt < kTopTwoResampleCap; ++attempt) {
        const std::size_t challenger = draw();
        if (challenger != first) return challenger;
    }
    throw ResampleExhaustedError("thompson_select: no challenger after 10^4 resamples");
}

}  // namespace abctree
