#include <catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "abctree/abc.hpp"
#include "abctree/external.hpp"

using namespace abctree;
using namespace std::chrono_literals;

namespace {

std::vector<std::string> child(const std::string& mode, const std::string& dim = "2") {
    return {ECHO_CHILD_PATH, mode, dim};
}

template <class E>
std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const E& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("handshake reports dimensions") {
    ExternalSimulator sim(child("echo", "3"));
    CHECK(sim.dim_theta() == 3);
    CHECK(sim.dim_summary() == 3);
    CHECK(sim.name() == "external");
}

TEST_CASE("echo child round-trips a thousand calls") {
    ExternalSimulator sim(child("echo"));
    Rng rng = make_rng(1);
    for (int i = 0; i < 1000; ++i) {
        const std::vector<double> theta{standard_normal(rng) * 1e3, uniform01(rng) * 1e-7};
        REQUIRE(sim.call(theta, rng()) == theta);
    }
    CHECK(sim.calls() == 1000);
}

TEST_CASE("seeded child gives distinct responses for distinct seeds") {
    ExternalSimulator sim(child("seeded"));
    const std::vector<double> theta{0.0, 0.0};
    std::set<std::vector<double>> seen;
    for (std::uint64_t s = 0; s < 1000; ++s) seen.insert(sim.call(theta, s * 0x9E3779B97F4A7C15ULL));
    CHECK(seen.size() == 1000);
    CHECK(sim.call(theta, 42) == sim.call(theta, 42));
}

TEST_CASE("id mismatch is a protocol error") {
    ExternalSimulator sim(child("bad-id"));
    const auto msg = message_of<ProtocolError>([&] { sim.call(std::vector<double>{1.0, 2.0}, 3); });
    CHECK(msg.find("id mismatch") != std::string::npos);
    CHECK(msg.find("\"id\":7") != std::string::npos);
}

TEST_CASE("malformed line is a protocol error carrying the line") {
    ExternalSimulator sim(child("malformed"));
    const auto msg = message_of<ProtocolError>([&] { sim.call(std::vector<double>{1.0, 2.0}, 3); });
    CHECK(msg.find("{\"id\":0,\"summary\":[1,2") != std::string::npos);
}

TEST_CASE("a hung child times out and is killed") {
    ExternalSimulator sim(child("hang"), 300ms);
    const auto start = std::chrono::steady_clock::now();
    CHECK_THROWS_AS(sim.call(std::vector<double>{1.0, 2.0}, 3), SimulatorTimeoutError);
    CHECK(std::chrono::steady_clock::now() - start < 5s);
}

TEST_CASE("child exit is a process error") {
    ExternalSimulator sim(child("exit"));
    const auto msg = message_of<ProcessError>([&] { sim.call(std::vector<double>{1.0, 2.0}, 3); });
    CHECK(!msg.empty());
}

TEST_CASE("null summary entries become NaN and reject") {
    auto sim = std::make_shared<ExternalSimulator>(child("null"));
    const auto s = sim->call(std::vector<double>{1.0, 2.0}, 3);
    REQUIRE(s.size() == 2);
    CHECK(std::isnan(s[0]));
    const auto r = abc_reward(std::vector<double>{1.0, 2.0}, s, 10.0);
    CHECK(r.accepted == 0);
    CHECK(std::isinf(r.discrepancy));
}

TEST_CASE("bad handshake and wrong shapes") {
    CHECK_THROWS_AS(ExternalSimulator(child("bad-handshake")), ProtocolError);
    CHECK_THROWS_AS(ExternalSimulator(std::vector<std::string>{"/nonexistent/simulator"}), SimulatorError);
    ExternalSimulator sim(child("echo"));
    CHECK_THROWS_AS(sim.call(std::vector<double>{1.0}, 3), ShapeError);
}

TEST_CASE("shell command drives a rejection run") {
    auto sim = ExternalSimulator::shell(std::string("'") + ECHO_CHILD_PATH + "' echo 2");
    Problem problem;
    problem.simulator = sim;
    problem.prior = Prior::uniform(Box::unit(2));
    problem.observed = {0.5, 0.5};
    Rng rng = make_rng(9);
    const auto table = rejection_abc(problem, 0.25, 300, rng);
    CHECK(table.size() == 300);
    CHECK(sim->calls() == 300);
    for (const auto& r : table.records()) {
        REQUIRE(r.summary == r.theta);
        REQUIRE(r.reward == (std::hypot(r.theta[0] - 0.5, r.theta[1] - 0.5) < 0.25 ? 1 : 0));
    }
}
