#pragma once

// Evaluation metrics: total variation, MMD, effective sample size, proposal regret.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "abctree/bandit.hpp"
#include "abctree/errors.hpp"

namespace abctree {

/// 0.5 * sum |p_k - q_k|.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("tv_distance: length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) s += std::abs(p[k] - q[k]);
    return 0.5 * s;
}

/// (sum w)^2 / sum w^2.
inline double ess(std::span<const double> weights) {
    if (weights.empty()) throw ShapeError("ess: no weights");
    double s = 0.0;
    double s2 = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw DomainError("ess: weights must be positive");
        s += w;
        s2 += w * w;
    }
    return s * s / s2;
}

using Points = std::vector<std::vector<double>>;

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline std::vector<double> normalized(std::span<const double> w, std::size_t n) {
    std::vector<double> out(n, 1.0 / static_cast<double>(n));
    if (w.empty()) return out;
    if (w.size() != n) throw ShapeError("mmd: one weight per point required");
    double total = 0.0;
    for (double v : w) {
        if (!(v >= 0.0)) throw DomainError("mmd: weights must be nonnegative");
        total += v;
    }
    if (!(total > 0.0)) throw DomainError("mmd: weights sum to zero");
    for (std::size_t i = 0; i < n; ++i) out[i] = w[i] / total;
    return out;
}

}  // namespace detail

/// Median pairwise Euclidean distance of the pooled sample. Pools larger than
/// `max_points` are thinned by a fixed stride.
inline double median_pairwise_distance(const Points& a, const Points& b, std::size_t max_points = 1000) {
    Points pool;
    const std::size_t n = a.size() + b.size();
    const std::size_t stride = std::max<std::size_t>(1, (n + max_points - 1) / max_points);
    for (std::size_t i = 0; i < n; i += stride) pool.push_back(i < a.size() ? a[i] : b[i - a.size()]);
    std::vector<double> d;
    d.reserve(pool.size() * (pool.size() - 1) / 2);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(std::sqrt(detail::sq_dist(pool[i], pool[j])));
    }
    if (d.empty()) return 1.0;
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return *mid > 0.0 ? *mid : 1.0;
}

/// Biased (V-statistic) squared MMD with kernel exp(-|x-y|^2 / (2 h^2)).
/// Empty weight spans mean uniform weights; bandwidth <= 0 selects the
/// median heuristic on the pooled sample.
inline double mmd(const Points& a, std::span<const double> wa, const Points& b, std::span<const double> wb,
                  double bandwidth = 0.0) {
    if (a.empty() || b.empty()) throw ShapeError("mmd: empty sample");
    const auto pa = detail::normalized(wa, a.size());
    const auto pb = detail::normalized(wb, b.size());
    const double h = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(a, b);
    const double c = 1.0 / (2.0 * h * h);
    const auto block = [&](const Points& x, const std::vector<double>& wx, const Points& y,
                           const std::vector<double>& wy) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < y.size(); ++j) row += wy[j] * std::exp(-c * detail::sq_dist(x[i], y[j]));
            s += wx[i] * row;
        }
        return s;
    };
    const double v = block(a, pa, a, pa) + block(b, pb, b, pb) - 2.0 * block(a, pa, b, pb);
    return std::max(v, 0.0);
}

inline double mmd(const Points& a, const Points& b, double bandwidth = 0.0) { return mmd(a, {}, b, {}, bandwidth); }

/// Running estimate of omega_p(q*(p)) - (1/T) sum_t omega_p(q_t).
class RegretAccumulator {
public:
    RegretAccumulator(Utility utility, std::vector<double> p_true, std::vector<double> prior)
        : utility_(std::move(utility)), p_(std::move(p_true)), prior_(std::move(prior)) {
        if (utility_.kind == UtilityKind::omega3 && utility_.acceptance.size() != p_.size()) {
            throw ShapeError("RegretAccumulator: omega3 needs the true acceptance rates");
        }
        if (!prior_.empty() && prior_.size() != p_.size()) throw ShapeError("RegretAccumulator: prior length mismatch");
        best_ = utility_value(utility_, p_, optimal_proposal(utility_, p_, prior_), prior_);
    }

    void add(std::span<const double> q) {
        if (q.size() != p_.size()) throw ShapeError("RegretAccumulator: proposal length mismatch");
        sum_ += utility_value(utility_, p_, q, prior_);
        ++count_;
    }

    std::size_t count() const noexcept { return count_; }
    double optimum() const noexcept { return best_; }

    double regret() const {
        if (count_ == 0) throw ShapeError("RegretAccumulator: empty trace");
        return best_ - sum_ / static_cast<double>(count_);
    }

private:
    Utility utility_;
    std::vector<double> p_;
    std::vector<double> prior_;
    double best_ = 0.0;
    double sum_ = 0.0;
    std::size_t count_ = 0;
};

inline double empirical_regret(std::span<const std::vector<double>> trace, std::span<const double> p_true,
                               const Utility& utility, std::span<const double> prior = {}) {
    RegretAccumulator acc(utility, std::vector<double>(p_true.begin(), p_true.end()),
                          std::vector<double>(prior.begin(), prior.end()));
    for (const auto& q : trace) acc.add(q);
    return acc.regret();
}

}  // namespace abctree
