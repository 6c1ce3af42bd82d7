#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <string>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "opflayer/grid.hpp"

using namespace opflayer;
using Catch::Matchers::WithinAbs;

namespace {

RawCase two_bus() { return parse_matpower(std::string_view(fixtures::kTwoBus)); }

// Every list position maps back to its bus and covers [0, size).
void check_bijection(const std::vector<int>& list, const std::vector<int>& pos, Eigen::Index n_bus) {
    REQUIRE(static_cast<Eigen::Index>(pos.size()) == n_bus);
    std::vector<int> seen;
    for (std::size_t k = 0; k < list.size(); ++k) {
        CHECK(pos[static_cast<std::size_t>(list[k])] == static_cast<int>(k));
        seen.push_back(list[k]);
    }
    CHECK(std::is_sorted(seen.begin(), seen.end()));
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
    const auto present = std::count_if(pos.begin(), pos.end(), [](int p) { return p >= 0; });
    CHECK(static_cast<std::size_t>(present) == list.size());
}

}  // namespace

TEST_CASE("case57 partition sizes", "[grid]") {
    const GridModel& g = fixtures::grid57();
    const Partition& p = g.partition;
    CHECK(p.slack.size() == 1);
    CHECK(p.gen.size() == 6);
    CHECK(p.load.size() == 50);
    CHECK(p.n() == 106);
    CHECK(p.m() == 13);
    CHECK(p.n_post() == 8);
    CHECK(g.n_gens() == 7);
    CHECK(g.n_branches() == 80);
}

TEST_CASE("partition index maps are bijections", "[grid][property]") {
    const GridModel& g = fixtures::grid57();
    const Partition& p = g.partition;
    check_bijection(p.gen, p.pos_gen, g.n_bus);
    check_bijection(p.load, p.pos_load, g.n_bus);
    check_bijection(p.non_slack, p.pos_non_slack, g.n_bus);
    check_bijection(p.gen_or_slack, p.pos_gen_or_slack, g.n_bus);
    CHECK(p.slack.size() + p.gen.size() + p.load.size() == static_cast<std::size_t>(g.n_bus));
}

TEST_CASE("single lossless branch admittance", "[grid]") {
    const GridModel g = build_grid(two_bus());
    REQUIRE(g.ybus.rows() == 2);
    CHECK_THAT(g.ybus(0, 0).imag(), WithinAbs(-10.0, 1e-12));
    CHECK_THAT(g.ybus(1, 1).imag(), WithinAbs(-10.0, 1e-12));
    CHECK_THAT(g.ybus(0, 1).imag(), WithinAbs(10.0, 1e-12));
    CHECK_THAT(g.ybus(1, 0).imag(), WithinAbs(10.0, 1e-12));
    CHECK(g.ybus.real().cwiseAbs().maxCoeff() < 1e-12);

    const FdpfFactors f = build_fdpf_matrices(g);
    REQUIRE(f.b_prime().rows() == 1);
    REQUIRE(f.b_double_prime().rows() == 1);
    CHECK_THAT(f.b_prime()(0, 0), WithinAbs(10.0, 1e-12));
    CHECK_THAT(f.b_double_prime()(0, 0), WithinAbs(10.0, 1e-12));
}

TEST_CASE("bus shunt enters the diagonal in per-unit", "[grid]") {
    RawCase rc = two_bus();
    const GridModel before = build_grid(rc);
    rc.buses[1].bs = 5.0;
    const GridModel after = build_grid(rc);
    const Complex delta = after.ybus(1, 1) - before.ybus(1, 1);
    CHECK_THAT(delta.imag(), WithinAbs(0.05, 1e-14));
    CHECK_THAT(delta.real(), WithinAbs(0.0, 1e-14));
}

TEST_CASE("case57 fast-decoupled matrices", "[grid]") {
    const GridModel& g = fixtures::grid57();
    const FdpfFactors f = build_fdpf_matrices(g);
    REQUIRE(f.b_prime().rows() == 56);
    REQUIRE(f.b_double_prime().rows() == 50);

    SECTION("factor solves agree with a dense inverse") {
        const Eigen::VectorXd rhs = Eigen::VectorXd::LinSpaced(56, -1.0, 2.0);
        const Eigen::VectorXd oracle = f.b_prime().inverse() * rhs;
        CHECK((f.solve_prime(rhs) - oracle).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((f.b_prime() * f.solve_prime(rhs) - rhs).cwiseAbs().maxCoeff() < 1e-10);
        const Eigen::VectorXd rhs2 = Eigen::VectorXd::LinSpaced(50, 0.5, -3.0);
        CHECK((f.solve_double_prime(rhs2) - f.b_double_prime().inverse() * rhs2).cwiseAbs().maxCoeff() < 1e-10);
    }
    SECTION("repeated solves reuse the factors bit for bit") {
        const Eigen::VectorXd rhs = Eigen::VectorXd::LinSpaced(56, 0.1, 0.9);
        const Eigen::VectorXd first = f.solve_prime(rhs);
        bool identical = true;
        for (int i = 0; i < 1000; ++i) identical = identical && (f.solve_prime(rhs).array() == first.array()).all();
        CHECK(identical);
    }
    SECTION("symmetric without phase shifters") {
        CHECK((f.b_prime() - f.b_prime().transpose()).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((f.b_double_prime() - f.b_double_prime().transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("per-unit quantities are invariant to the MVA base", "[grid][property]") {
    RawCase rc = fixtures::case57();
    const GridModel a = build_grid(rc);
    const double k = 2.5;
    rc.base_mva *= k;
    for (auto& b : rc.buses) {
        b.pd *= k;
        b.qd *= k;
        b.gs *= k;
        b.bs *= k;
    }
    for (auto& g : rc.gens) {
        g.pg *= k;
        g.qg *= k;
        g.qmax *= k;
        g.qmin *= k;
        g.pmax *= k;
        g.pmin *= k;
    }
    for (auto& br : rc.branches) br.rate_a *= k;
    const GridModel b = build_grid(rc);
    CHECK((a.ybus - b.ybus).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.nominal_load - b.nominal_load).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((nominal_prediction(a) - nominal_prediction(b)).cwiseAbs().maxCoeff() < 1e-12);
    for (std::size_t i = 0; i < a.branches.size(); ++i)
        CHECK_THAT(a.branches[i].rating, WithinAbs(b.branches[i].rating, 1e-9));
}

TEST_CASE("unsupported topologies are rejected", "[grid]") {
    SECTION("two generators on one bus") {
        RawCase rc = parse_matpower(std::string_view(fixtures::kThreeBus));
        GenRecord extra = rc.gens[1];
        rc.gens.push_back(extra);
        rc.gencosts.push_back(rc.gencosts[1]);
        CHECK_THROWS_AS(build_grid(rc), TopologyError);
    }
    SECTION("isolated bus") {
        RawCase rc = parse_matpower(std::string_view(fixtures::kThreeBus));
        rc.branches.erase(rc.branches.begin() + 1, rc.branches.end());
        rc.buses[2].bs = 0.0;
        CHECK_THROWS_AS(build_grid(rc), TopologyError);
    }
    SECTION("piecewise-linear costs") {
        RawCase rc = parse_matpower(std::string_view(fixtures::kThreeBus));
        rc.gencosts[0].model = 1;
        CHECK_THROWS_AS(build_grid(rc), StructuralError);
    }
    SECTION("out-of-service generator demotes its bus to a load bus") {
        RawCase rc = parse_matpower(std::string_view(fixtures::kThreeBus));
        rc.gens[1].in_service = false;
        const GridModel g = build_grid(rc);
        CHECK(g.partition.gen.empty());
        CHECK(g.partition.load.size() == 2);
    }
}

TEST_CASE("partition fingerprint tracks the bus sets", "[grid]") {
    const GridModel& g = fixtures::grid57();
    CHECK(g.partition.fingerprint() == build_grid(fixtures::case57()).partition.fingerprint());
    const GridModel small = build_grid(parse_matpower(std::string_view(fixtures::kThreeBus)));
    CHECK(small.partition.fingerprint() != g.partition.fingerprint());
}
