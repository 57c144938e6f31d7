#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "abctree/abc.hpp"
#include "abctree/metrics.hpp"
#include "abctree/models.hpp"

using namespace abctree;
using Catch::Approx;

namespace {

std::shared_ptr<GaussianLocationModel> gaussian() {
    return std::make_shared<GaussianLocationModel>(GaussianLocationModel::gaussian_1d());
}

void require_same_trials(const TrialRecord& a, const TrialRecord& b) {
    REQUIRE(a.t == b.t);
    REQUIRE(a.theta == b.theta);
    REQUIRE(a.summary == b.summary);
    REQUIRE(a.discrepancy == b.discrepancy);
    REQUIRE(a.reward == b.reward);
    REQUIRE(a.weight == b.weight);
}

// Exact epsilon-posterior mean on the 1D Gaussian model by trapezoid quadrature.
double epsilon_posterior_mean(const GaussianLocationModel& m, double eps) {
    const auto dom = *m.default_domain();
    const int n = 20000;
    const double h = dom.side(0) / n;
    double num = 0.0;
    double den = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = dom.lower(0) + h * i;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        const double a = m.acceptance_probability(x, eps);
        num += w * x * a;
        den += w * a;
    }
    return num / den;
}

}  // namespace

TEST_CASE("abc reward uses a strict Euclidean threshold") {
    const std::vector<double> obs{0.0, 0.0};
    const auto same = abc_reward(obs, obs, 0.1);
    CHECK(same.accepted == 1);
    CHECK(same.discrepancy == 0.0);

    const auto edge = abc_reward(obs, std::vector<double>{3.0, 4.0}, 5.0);
    CHECK(edge.accepted == 0);
    CHECK(edge.discrepancy == 5.0);

    const auto blown = abc_reward(obs, std::vector<double>{std::nan(""), 0.0}, 5.0);
    CHECK(blown.accepted == 0);
    CHECK(std::isinf(blown.discrepancy));

    CHECK_THROWS_AS(abc_reward(obs, std::vector<double>{1.0}, 1.0), ShapeError);

    Rng rng = make_rng(3);
    for (int i = 0; i < 1000; ++i) {
        const std::vector<double> a{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
        const std::vector<double> b{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
        const double eps = 3.0 * uniform01(rng);
        const double d = std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
        const auto r = abc_reward(a, b, eps);
        REQUIRE(r.discrepancy == Approx(d).epsilon(1e-12));
        REQUIRE(r.accepted == (d < eps ? 1 : 0));
    }
}

TEST_CASE("scaled distance divides each coordinate") {
    const auto dist = scaled_euclidean({2.0, 0.5});
    CHECK(dist(std::vector<double>{2.0, 0.0}, std::vector<double>{0.0, 0.5}) == Approx(std::sqrt(2.0)));
}

TEST_CASE("single-arm inner loop is rejection ABC") {
    auto problem = Problem::from_defaults(gaussian());
    const Partition single(problem.prior.domain());
    InnerLoopConfig cfg;
    cfg.epsilon = 0.5;
    cfg.quota = 1000000;
    cfg.max_trials = 2000;
    Rng a = make_rng(77);
    Rng b = make_rng(77);
    const auto inner = inner_loop(problem, single, BetaState(1), cfg, a);
    const auto rej = rejection_abc(problem, 0.5, 2000, b);
    REQUIRE(inner.records.size() == rej.size());
    for (std::size_t i = 0; i < rej.size(); ++i) {
        require_same_trials(inner.records[i], rej.records()[i]);
        REQUIRE(inner.records[i].weight == 1.0);
        REQUIRE(inner.records[i].arm == 0);
    }
}

TEST_CASE("inner loop plays match Beta pseudo-count growth") {
    auto problem = Problem::from_defaults(gaussian());
    const auto grid = Partition::grid(problem.prior.domain(), std::vector<std::size_t>{7});
    for (auto kind : {UtilityKind::omega1, UtilityKind::omega2, UtilityKind::omega3}) {
        InnerLoopConfig cfg;
        cfg.epsilon = 0.5;
        cfg.quota = 300;
        cfg.max_trials = 5000;
        cfg.utility.kind = kind;
        cfg.init_plays = 2;
        Rng rng = make_rng(5);
        const BetaState start(7);
        const auto res = inner_loop(problem, grid, start, cfg, rng);
        std::vector<double> plays(7, 0.0), accepts(7, 0.0);
        std::size_t accepted = 0;
        for (const auto& r : res.records) {
            plays[r.arm] += 1.0;
            accepts[r.arm] += r.reward;
            accepted += r.reward;
            REQUIRE(grid.box(r.arm).contains_closed(r.theta));
        }
        CHECK(accepted == res.accepted);
        CHECK((res.accepted == cfg.quota || res.records.size() == cfg.max_trials));
        for (std::size_t k = 0; k < 7; ++k) {
            CHECK(res.beliefs.alpha(k) + res.beliefs.beta(k) - 2.0 == plays[k]);
            CHECK(res.beliefs.alpha(k) - 1.0 == accepts[k]);
        }
        for (std::size_t i = 0; i < res.records.size(); ++i) CHECK(res.records[i].t == i + 1);
    }
}

TEST_CASE("inner loop stops at the budget with few acceptances") {
    auto problem = Problem::from_defaults(gaussian());
    InnerLoopConfig cfg;
    cfg.epsilon = 1e-9;
    cfg.quota = 10;
    cfg.max_trials = 50;
    Rng rng = make_rng(1);
    const auto res = inner_loop(problem, Partition(problem.prior.domain()), BetaState(1), cfg, rng);
    CHECK(res.records.size() == 50);
    CHECK(res.accepted == 0);
}

TEST_CASE("omega1 Beta means track per-bin acceptance rates") {
    auto model = gaussian();
    auto problem = Problem::from_defaults(model);
    const Partition two(problem.prior.domain(), {Box({-5.0}, {0.0}), Box({0.0}, {5.0})});
    InnerLoopConfig cfg;
    cfg.epsilon = 0.5;
    cfg.quota = 100000;
    cfg.max_trials = 100000;
    Rng rng = make_rng(19);
    const auto res = inner_loop(problem, two, BetaState(2), cfg, rng);
    const auto truth = model->box_acceptance(two, 0.5);
    const auto eta = res.beliefs.means();
    const double ratio = eta[0] / eta[1];
    const double true_ratio = truth[0] / truth[1];
    CHECK(std::abs(ratio / true_ratio - 1.0) <= 0.10);
}

TEST_CASE("histogram posterior normalization") {
    const Box dom = Box::unit(1);
    const auto prior = Prior::uniform(dom);
    const auto grid4 = Partition::grid(dom, std::vector<std::size_t>{4});
    const auto flat = histogram_posterior(BetaState(4, 2.0, 3.0), grid4, prior);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(flat.mass[k] == Approx(0.25));
        CHECK(flat.density[k] == Approx(1.0));
    }
    const auto two = Partition::grid(dom, std::vector<std::size_t>{2});
    const auto h = histogram_posterior(BetaState({8.0, 2.0}, {2.0, 8.0}), two, prior);
    CHECK(h.mass[0] == Approx(0.8));
    CHECK(h.mass[1] == Approx(0.2));
    CHECK(h.mass[0] + h.mass[1] == Approx(1.0).epsilon(1e-12));
    CHECK(h.density_at(std::vector<double>{0.25}) == Approx(1.6));
}

TEST_CASE("histogram from the omega1 loop matches the quadrature epsilon-posterior") {
    auto model = gaussian();
    auto problem = Problem::from_defaults(model);
    const auto grid = Partition::grid(problem.prior.domain(), std::vector<std::size_t>{10});
    InnerLoopConfig cfg;
    cfg.epsilon = 0.5;
    cfg.quota = 100000;
    cfg.max_trials = 100000;
    Rng rng = make_rng(29);
    const auto res = inner_loop(problem, grid, BetaState(10), cfg, rng);
    const auto h = histogram_posterior(res.beliefs, grid, problem.prior);
    CHECK(tv_distance(h.mass, model->epsilon_posterior(grid, 0.5)) <= 0.05);
}

TEST_CASE("self-normalized importance weights recover box probabilities") {
    auto model = gaussian();
    auto problem = Problem::from_defaults(model);
    const auto grid = Partition::grid(problem.prior.domain(), std::vector<std::size_t>{10});
    InnerLoopConfig cfg;
    cfg.epsilon = 0.5;
    cfg.quota = 100000;
    cfg.max_trials = 100000;
    cfg.utility.kind = UtilityKind::omega2;
    Rng rng = make_rng(31);
    const auto res = inner_loop(problem, grid, BetaState(10), cfg, rng);

    const Box dom = problem.prior.domain();
    for (const auto& test : {Box({0.0}, {1.0}), Box({-1.3}, {0.2}), Box({0.8}, {3.1})}) {
        double num = 0.0;
        double den = 0.0;
        for (const auto& r : res.records) {
            if (!r.reward) continue;
            den += r.weight;
            if (test.contains(r.theta, dom)) num += r.weight;
        }
        const double truth = model->integrated_acceptance(test.lower(0), test.upper(0), 0.5) /
                             model->integrated_acceptance(dom.lower(0), dom.upper(0), 0.5);
        CHECK(std::abs(num / den - truth) <= 0.05);
    }
}

TEST_CASE("rejection ABC basics") {
    auto model = gaussian();
    auto problem = Problem::from_defaults(model);
    Rng a = make_rng(4);
    const auto all = rejection_abc(problem, std::numeric_limits<double>::infinity(), 200, a);
    for (const auto& r : all.records()) CHECK(r.reward == 1);

    Rng b = make_rng(8);
    Rng c = make_rng(8);
    const auto t1 = rejection_abc(problem, 0.5, 500, b);
    const auto t2 = rejection_abc(problem, 0.5, 500, c);
    for (std::size_t i = 0; i < t1.size(); ++i) require_same_trials(t1.records()[i], t2.records()[i]);

    // Acceptance count ~ Binomial(n, mean acceptance over the prior).
    const std::size_t n = 40000;
    Rng d = make_rng(12);
    const auto big = rejection_abc(problem, 0.5, n, d);
    std::size_t acc = 0;
    for (const auto& r : big.records()) acc += r.reward;
    const auto dom = problem.prior.domain();
    const double p = model->integrated_acceptance(dom.lower(0), dom.upper(0), 0.5) / dom.volume();
    const double sd = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
    CHECK(std::abs(static_cast<double>(acc) - static_cast<double>(n) * p) <= 4.0 * sd);
}

TEST_CASE("ABC-Tree with one box and one round is rejection ABC") {
    auto problem = Problem::from_defaults(gaussian());
    OuterLoopConfig outer;
    outer.epsilon_1 = 0.5;
    outer.max_rounds = 1;
    outer.partitioner.kind = PartitionerKind::single;
    InnerLoopConfig inner;
    inner.quota = 1000000;
    inner.max_trials = 3000;
    Rng a = make_rng(55);
    Rng b = make_rng(55);
    const auto tree = run_abc_tree(problem, outer, inner, a);
    const auto rej = rejection_abc(problem, 0.5, 3000, b);
    REQUIRE(tree.table.size() == rej.size());
    for (std::size_t i = 0; i < rej.size(); ++i) require_same_trials(tree.table.records()[i], rej.records()[i]);
}

TEST_CASE("ABC-Tree tolerance schedule and budget accounting") {
    auto problem = Problem::from_defaults(std::make_shared<GaussianMixture2d>());
    OuterLoopConfig outer;
    outer.epsilon_1 = 3.0;
    outer.g = 0.8;
    outer.max_rounds = 6;
    outer.budget = 20000;
    InnerLoopConfig inner;
    inner.quota = 300;
    Rng rng = make_rng(61);
    const auto res = run_abc_tree(problem, outer, inner, rng);
    REQUIRE(!res.rounds.empty());
    std::size_t total = 0;
    for (std::size_t s = 0; s < res.rounds.size(); ++s) {
        CHECK(res.rounds[s].epsilon == Approx(3.0 * std::pow(0.8, static_cast<double>(s))).epsilon(1e-12));
        total += res.rounds[s].trials;
    }
    CHECK(total == res.table.size());
    CHECK(total <= 20000);
    for (std::size_t i = 0; i < res.table.size(); ++i) CHECK(res.table.records()[i].t == i + 1);
    CHECK(res.histogram.partition.size() == res.partition.size());
    double mass = 0.0;
    for (double m : res.histogram.mass) mass += m;
    CHECK(mass == Approx(1.0).epsilon(1e-9));
    for (std::size_t i = 0; i < res.samples.size(); ++i) CHECK(res.samples.weights[i] > 0.0);
}

TEST_CASE("ABC-Tree survives rounds without acceptances") {
    auto problem = Problem::from_defaults(gaussian());
    OuterLoopConfig outer;
    outer.epsilon_1 = 1e-12;
    outer.max_rounds = 3;
    InnerLoopConfig inner;
    inner.quota = 10;
    inner.max_trials = 200;
    Rng rng = make_rng(62);
    const auto res = run_abc_tree(problem, outer, inner, rng);
    CHECK(res.rounds.size() == 3);
    CHECK(res.partition.size() == 1);
    CHECK(res.samples.size() == 0);
}

TEST_CASE("dyadic ABC-Tree refines where proposals concentrate") {
    auto problem = Problem::from_defaults(gaussian());
    OuterLoopConfig outer;
    outer.epsilon_1 = 1.0;
    outer.max_rounds = 4;
    outer.partitioner.kind = PartitionerKind::dyadic;
    outer.partitioner.dyadic_splits = 5;
    InnerLoopConfig inner;
    inner.quota = 500;
    Rng rng = make_rng(63);
    const auto res = run_abc_tree(problem, outer, inner, rng);
    CHECK(res.partition.size() == 16);
    const auto dom = problem.prior.domain();
    const auto near = res.partition.locate(std::vector<double>{0.5});
    const auto far = res.partition.locate(std::vector<double>{-4.9});
    CHECK(res.partition.box(near).volume() < res.partition.box(far).volume());
    CHECK(res.partition.volume_sum() == Approx(dom.volume()));
}

TEST_CASE("SMC with a single tolerance is rejection ABC") {
    auto problem = Problem::from_defaults(gaussian());
    const std::vector<double> schedule{0.5};
    Rng a = make_rng(70);
    Rng b = make_rng(70);
    const auto smc = smc_abc(problem, schedule, 200, 100000, a);
    REQUIRE(smc.populations.size() == 1);
    const auto rej = rejection_abc(problem, 0.5, smc.table.size(), b);
    for (std::size_t i = 0; i < rej.size(); ++i) require_same_trials(smc.table.records()[i], rej.records()[i]);
    std::size_t acc = 0;
    for (const auto& r : rej.records()) acc += r.reward;
    CHECK(acc == 200);
    CHECK(rej.records().back().reward == 1);
}

TEST_CASE("SMC weights are normalized and the mean matches the epsilon-posterior") {
    auto model = gaussian();
    auto problem = Problem::from_defaults(model);
    const std::vector<double> schedule{2.0, 1.0, 0.5, 0.25};
    Rng rng = make_rng(71);
    const auto smc = smc_abc(problem, schedule, 1000, 1000000, rng);
    REQUIRE(smc.populations.size() == 4);
    std::size_t sims = 0;
    for (const auto& pop : smc.populations) {
        double total = 0.0;
        for (double w : pop.sample.weights) {
            CHECK(w >= 0.0);
            total += w;
        }
        CHECK(total == Approx(1.0).epsilon(1e-12));
        sims += pop.simulations;
        CHECK(pop.attempts >= pop.simulations);
    }
    CHECK(sims == smc.table.size());
    const auto& last = smc.populations.back();
    const double truth = epsilon_posterior_mean(*model, 0.25);
    const double spread = 1.0 / std::sqrt(ess(last.sample.weights));
    CHECK(std::abs(last.sample.mean()[0] - truth) <= 4.0 * spread);
}

TEST_CASE("SMC drops a round cut short by the budget") {
    auto problem = Problem::from_defaults(gaussian());
    const std::vector<double> schedule{1.0, 0.1, 0.01};
    Rng rng = make_rng(72);
    const auto smc = smc_abc(problem, schedule, 100, 3000, rng);
    CHECK(smc.attempts <= 3000);
    CHECK(smc.populations.size() < 3);
}

TEST_CASE("percentile and summary scales") {
    CHECK(percentile({1.0, 2.0, 3.0, 4.0, 5.0}, 20.0) == Approx(1.8));
    CHECK(percentile({3.0}, 50.0) == 3.0);
    const std::vector<std::vector<double>> s{{1.0, 5.0}, {2.0, 5.0}, {3.0, 5.0}, {4.0, 5.0}, {100.0, 5.0}};
    const auto scale = summary_scales(s);
    CHECK(scale[0] == Approx(1.0));
    CHECK(scale[1] == 1.0);
}
