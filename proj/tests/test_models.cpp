#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "abctree/models.hpp"

using namespace abctree;
using Catch::Approx;

TEST_CASE("1D mixture moments and component frequencies") {
    GaussianMixture1d m;
    Rng rng = make_rng(1);
    const int n = 100000;
    double sum = 0.0;
    double sum_sq = 0.0;
    double lower_sq = 0.0;
    int above = 0;
    const std::vector<double> zero{0.0};
    for (int i = 0; i < n; ++i) {
        const double x = m.simulate(zero, rng)[0];
        sum += x;
        sum_sq += x * x;
        if (x > 3.5) ++above;
        if (x < 0.0) lower_sq += x * x;
    }
    CHECK(sum / n == Approx(1.0).margin(0.05));
    const double var = sum_sq / n - (sum / n) * (sum / n);
    CHECK(var == Approx(0.8 * 3.0 + 0.2 * 0.25 + 0.8 * 0.2 * 25.0).margin(0.1));

    // Threshold at 3.5: both components' tails are accounted for exactly.
    const double p_above = 0.8 * (1.0 - stats::normal_cdf(3.5 / std::sqrt(3.0))) +
                           0.2 * (1.0 - stats::normal_cdf((3.5 - 5.0) / 0.5));
    CHECK(static_cast<double>(above) / n == Approx(p_above).margin(0.01));

    // Below 0 only the heavy component contributes; it is symmetric about 0.
    CHECK(2.0 * lower_sq / (0.8 * n) == Approx(3.0).margin(0.1));
}

TEST_CASE("2D mixture mean, weights and isotropy") {
    GaussianMixture2d m;
    Rng rng = make_rng(2);
    const int n = 100000;
    const std::vector<double> theta{-1.0, -1.0};
    std::vector<double> xs, ys;
    int near_shifted = 0;
    for (int i = 0; i < n; ++i) {
        const auto s = m.simulate(theta, rng);
        xs.push_back(s[0]);
        ys.push_back(s[1]);
        // Within 1.5 of (2, 2): almost all of the narrow component, little of the wide one.
        if (std::hypot(s[0] - 2.0, s[1] - 2.0) < 1.5) ++near_shifted;
    }
    CHECK(stats::mean(xs) == Approx(1.1).margin(0.02));
    CHECK(stats::mean(ys) == Approx(1.1).margin(0.02));
    // P(r < 1.5) is 1 - exp(-4.5) for the narrow component and ~0.0002 for the wide one.
    const double expected = 0.7 * (1.0 - std::exp(-4.5)) + 0.3 * 0.0002;
    CHECK(static_cast<double>(near_shifted) / n == Approx(expected).margin(0.01));

    double cov = 0.0;
    const double mx = stats::mean(xs);
    const double my = stats::mean(ys);
    for (int i = 0; i < n; ++i) cov += (xs[i] - mx) * (ys[i] - my);
    cov /= n;
    // Mixing along the diagonal induces cov 0.21 * 9 = 1.89 between coordinates; the
    // isotropic components add nothing on top of it.
    CHECK(cov == Approx(0.3 * 0.7 * 9.0).margin(0.05));
}

TEST_CASE("Heston summary shape and constant-volatility reduction") {
    HestonModel m;
    Rng rng = make_rng(3);
    const auto s = m.simulate(std::vector<double>{2.0, 0.04, 0.04, -0.5, 0.3}, rng);
    CHECK(s.size() == 7);
    for (double v : s) CHECK(std::isfinite(v));

    // sigma = 0 and nu0 = xi: nu is constant, squared returns are uncorrelated.
    HestonModel long_run(100000);
    const auto r = long_run.log_returns(std::vector<double>{1.0, 0.09, 0.09, 0.3, 0.0}, rng);
    std::vector<double> sq(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) sq[i] = r[i] * r[i];
    const double se = 4.0 / std::sqrt(static_cast<double>(r.size()));
    CHECK(std::abs(stats::autocorrelation(sq, 1)) < se);
    CHECK(std::abs(stats::autocorrelation(sq, 2)) < se);

    // rho = 0 removes the leverage correlation.
    const auto r0 = long_run.log_returns(std::vector<double>{3.0, 0.09, 0.09, 0.0, 0.5}, rng);
    std::vector<double> sq0(r0.size());
    for (std::size_t i = 0; i < r0.size(); ++i) sq0[i] = r0[i] * r0[i];
    CHECK(std::abs(stats::correlation(r0, sq0)) < se);
}

TEST_CASE("Heston default observation is reproducible") {
    HestonModel m;
    CHECK(*m.default_observed() == *m.default_observed());
    CHECK(m.default_domain()->contains_closed(m.true_theta()));
}

TEST_CASE("Lotka-Volterra shapes and the zero-rate path") {
    LotkaVolterraModel m;
    Rng rng = make_rng(4);
    const auto s = m.simulate(LotkaVolterraModel::true_theta(), rng);
    CHECK(s.size() == 9);

    const auto still = m.path(std::vector<double>{0.0, 0.0, 0.0, 0.0}, rng);
    REQUIRE(still.prey.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(still.prey[i] == 50.0);
        CHECK(still.predators[i] == 100.0);
    }
    const auto zs = LotkaVolterraModel::summarize(still);
    CHECK(zs[2] == 0.0);
    CHECK(zs[3] == 0.0);

    for (int rep = 0; rep < 20; ++rep) {
        Rng r = make_rng(100 + rep);
        const auto p = m.path(std::vector<double>{0.9, 0.9, 0.9, 0.9}, r);
        CHECK(p.prey.size() == 20);
        CHECK(p.predators.size() == 20);
        for (double v : p.prey) CHECK((v >= 0.0 && v == std::floor(v)));
        CHECK(m.simulate(std::vector<double>{0.9, 0.9, 0.9, 0.9}, r).size() == 9);
    }
}

TEST_CASE("Lotka-Volterra decoupled birth and death") {
    LotkaVolterraModel::Settings settings;
    settings.horizon = 3.0;
    settings.records = 6;
    LotkaVolterraModel m(settings);
    std::vector<double> prey(6, 0.0), pred(6, 0.0);
    const int reps = 200;
    for (int rep = 0; rep < reps; ++rep) {
        Rng rng = make_rng(7, static_cast<std::uint64_t>(rep));
        const auto p = m.path(std::vector<double>{0.3, 0.0, 0.0, 0.3}, rng);
        for (std::size_t i = 0; i < 6; ++i) {
            prey[i] += p.prey[i] / reps;
            pred[i] += p.predators[i] / reps;
        }
    }
    for (std::size_t i = 1; i < 6; ++i) {
        CHECK(prey[i] > prey[i - 1]);
        CHECK(pred[i] < pred[i - 1]);
    }
    // Linear birth/death means: x0 exp(rate t).
    CHECK(prey[5] == Approx(50.0 * std::exp(0.9)).epsilon(0.05));
    CHECK(pred[5] == Approx(100.0 * std::exp(-0.9)).epsilon(0.05));
}

TEST_CASE("Lotka-Volterra event cap truncates and pads") {
    LotkaVolterraModel::Settings settings;
    settings.event_cap = 50;
    LotkaVolterraModel m(settings);
    Rng rng = make_rng(8);
    const auto p = m.path(std::vector<double>{1.0, 0.01, 0.01, 1.0}, rng);
    CHECK(p.truncated);
    CHECK(p.events == 50);
    CHECK(p.prey.size() == 20);
    CHECK(p.prey.back() == p.prey[p.prey.size() - 2]);
}

TEST_CASE("discrete toy epsilon-posterior quadrature") {
    const auto toy = GaussianLocationModel::discrete_toy();
    const auto cells = Partition::grid(*toy.default_domain(), std::vector<std::size_t>{100});
    const auto post = toy.epsilon_posterior(cells, 5.0);
    double total = 0.0;
    for (double v : post) total += v;
    CHECK(std::abs(total - 1.0) <= 1e-8);

    // Closed-form cell integrals agree with composite Simpson quadrature.
    double simpson_total = 0.0;
    std::vector<double> simpson(100);
    for (std::size_t k = 0; k < 100; ++k) {
        const double a = cells.box(k).lower(0);
        const double b = cells.box(k).upper(0);
        const int n = 4000;
        const double h = (b - a) / n;
        double s = toy.acceptance_probability(a, 5.0) + toy.acceptance_probability(b, 5.0);
        for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * toy.acceptance_probability(a + i * h, 5.0);
        simpson[k] = s * h / 3.0;
        simpson_total += simpson[k];
        CHECK(toy.integrated_acceptance(a, b, 5.0) == Approx(simpson[k]).epsilon(1e-9));
    }
    for (std::size_t k = 0; k < 100; ++k) CHECK(std::abs(post[k] - simpson[k] / simpson_total) <= 1e-8);

    const auto rates = toy.box_acceptance(cells, 5.0);
    for (double r : rates) CHECK(r > 0.0);
}

TEST_CASE("finite-arm model acceptance rates") {
    const auto fifty = BernoulliArmsModel::map_fifty();
    CHECK(fifty.best_arm() == 27);
    BernoulliArmsModel m({0.2, 0.7});
    Rng rng = make_rng(9);
    int acc = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += m.simulate(std::vector<double>{1.5}, rng)[0] < 1.0;
    CHECK(static_cast<double>(acc) / n == Approx(0.7).margin(0.015));
}

TEST_CASE("simulators are deterministic given the seed") {
    for (const auto& name : builtin_simulator_names()) {
        auto sim = make_builtin_simulator(name);
        REQUIRE(sim);
        const auto dom = *sim->default_domain();
        Rng base = make_rng(10);
        const auto theta = dom.sample_uniform(base);
        Rng a = make_rng(11);
        Rng b = make_rng(11);
        const auto sa = sim->simulate(theta, a);
        CHECK(sa == sim->simulate(theta, b));
        CHECK(sa.size() == sim->dim_summary());
        CHECK(sim->default_observed()->size() == sim->dim_summary());
    }
    CHECK(make_builtin_simulator("nope") == nullptr);
}
