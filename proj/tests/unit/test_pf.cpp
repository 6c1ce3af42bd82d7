#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "opflayer/constraints.hpp"
#include "opflayer/diffgrad.hpp"
#include "opflayer/pf.hpp"

using namespace opflayer;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

GridModel two_bus_grid() { return build_grid(parse_matpower(std::string_view(fixtures::kTwoBus))); }

Eigen::VectorXd two_bus_load(double p2, double q2) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(4);
    d[1] = p2;
    d[3] = q2;
    return d;
}

// Random state within a few percent of flat start.
Eigen::VectorXd perturbed_state(const GridModel& g, std::uint64_t seed, double scale = 0.05) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    Eigen::VectorXd z = flat_start(g);
    for (auto& v : z) v += u(rng);
    return z;
}

double frob_rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

// Textbook double sum over Ybus entries.
Injection double_sum(const GridModel& g, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    Injection out{Eigen::VectorXd::Zero(g.n_bus), Eigen::VectorXd::Zero(g.n_bus)};
    for (Eigen::Index i = 0; i < g.n_bus; ++i)
        for (Eigen::Index j = 0; j < g.n_bus; ++j) {
            const double gij = g.ybus(i, j).real(), bij = g.ybus(i, j).imag();
            const double t = va[i] - va[j];
            out.p[i] += vm[i] * vm[j] * (gij * std::cos(t) + bij * std::sin(t));
            out.q[i] += vm[i] * vm[j] * (gij * std::sin(t) - bij * std::cos(t));
        }
    return out;
}

SolveResult tight_newton(const GridModel& g, const Eigen::VectorXd& x, const Eigen::VectorXd& d) {
    SolveResult r = newton_solve(g, x, d, 1e-12, 30);
    REQUIRE(r.converged);
    return r;
}

}  // namespace

TEST_CASE("power injections on the two-bus network", "[pf]") {
    const GridModel g = two_bus_grid();
    Eigen::VectorXd vm = Eigen::VectorXd::Ones(2), va = Eigen::VectorXd::Zero(2);
    const Injection flat = power_injections(g, vm, va);
    CHECK(flat.p.cwiseAbs().maxCoeff() < 1e-14);
    CHECK(flat.q.cwiseAbs().maxCoeff() < 1e-14);

    va[1] = -0.05;
    const Injection s = power_injections(g, vm, va);
    CHECK_THAT(s.p[0], WithinRel(10.0 * std::sin(0.05), 1e-12));
    CHECK_THAT(s.p[1], WithinRel(-10.0 * std::sin(0.05), 1e-12));
    const Injection oracle = double_sum(g, vm, va);
    CHECK((s.p - oracle.p).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s.q - oracle.q).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("injections agree with the double sum and account for losses", "[pf][property]") {
    const GridModel& g = fixtures::grid57();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const BusState st = expand_state(g, nominal_prediction(g), perturbed_state(g, seed));
        const Injection s = power_injections(g, st.vm, st.va);
        const Injection oracle = double_sum(g, st.vm, st.va);
        CHECK((s.p - oracle.p).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((s.q - oracle.q).cwiseAbs().maxCoeff() < 1e-10);

        // network loss = sum of branch end flows + shunt conductance draw
        double branch_loss = 0.0;
        for (const auto& f : branch_flows(g, st.vm, st.va)) branch_loss += f.from.real() + f.to.real();
        const double shunt = (g.shunt_g.array() * st.vm.array().square()).sum();
        CHECK_THAT(s.p.sum(), WithinAbs(branch_loss + shunt, 1e-10));
        CHECK(branch_loss >= 0.0);
    }
}

TEST_CASE("completion residual", "[pf]") {
    const GridModel g = two_bus_grid();
    const Eigen::VectorXd x = Eigen::VectorXd::Ones(1);  // slack voltage only
    const Eigen::VectorXd r = completion_residual(g, flat_start(g), x, two_bus_load(0.5, 0.1));
    REQUIRE(r.size() == 2);
    CHECK_THAT(r[0], WithinAbs(0.5, 1e-14));
    CHECK_THAT(r[1], WithinAbs(0.1, 1e-14));

    const GridModel& g57 = fixtures::grid57();
    const Eigen::VectorXd x57 = nominal_prediction(g57);
    const SolveResult s = tight_newton(g57, x57, g57.nominal_load);
    CHECK(completion_residual(g57, s.z_star, x57, g57.nominal_load).cwiseAbs().maxCoeff() < 1e-10);

    SECTION("a single load perturbation touches one entry") {
        const Eigen::VectorXd z = perturbed_state(g57, 3);
        const Eigen::VectorXd base = completion_residual(g57, z, x57, g57.nominal_load);
        const int bus = g57.partition.load[4];
        Eigen::VectorXd d = g57.nominal_load;
        d[bus] += 0.25;
        const Eigen::VectorXd diff = completion_residual(g57, z, x57, d) - base;
        Eigen::Index changed = 0;
        for (Eigen::Index i = 0; i < diff.size(); ++i) changed += std::abs(diff[i]) > 1e-14;
        CHECK(changed == 1);
        CHECK_THAT(diff.cwiseAbs().maxCoeff(), WithinAbs(0.25, 1e-14));
    }
}

TEST_CASE("power-flow Jacobians", "[pf]") {
    const GridModel& g = fixtures::grid57();
    const Eigen::VectorXd x = nominal_prediction(g);
    const Eigen::VectorXd& d = g.nominal_load;

    SECTION("match central differences on random states") {
        for (std::uint64_t seed = 10; seed < 13; ++seed) {
            const Eigen::VectorXd z = perturbed_state(g, seed);
            const Eigen::MatrixXd fz = finite_diff_jacobian(
                [&](const Eigen::VectorXd& zz) { return completion_residual(g, zz, x, d); }, z, 1e-6);
            const Eigen::MatrixXd fx = finite_diff_jacobian(
                [&](const Eigen::VectorXd& xx) { return completion_residual(g, z, xx, d); }, x, 1e-6);
            CHECK(frob_rel(pf_jacobian_z(g, z, x), fz) < 1e-6);
            CHECK(frob_rel(pf_jacobian_x(g, z, x), fx) < 1e-6);
        }
    }
    SECTION("two-bus closed form") {
        const GridModel t = two_bus_grid();
        const Eigen::MatrixXd jz = pf_jacobian_z(t, flat_start(t), Eigen::VectorXd::Ones(1));
        CHECK_THAT(jz(0, 0), WithinAbs(10.0, 1e-12));
        CHECK_THAT(jz(1, 1), WithinAbs(10.0, 1e-12));
    }
    SECTION("generator dispatch block of the x Jacobian") {
        const Eigen::MatrixXd jx = pf_jacobian_x(g, perturbed_state(g, 4), x);
        const Partition& p = g.partition;
        for (Eigen::Index k = 0; k < p.n_gen(); ++k) {
            const int row = p.pos_non_slack[static_cast<std::size_t>(p.gen[static_cast<std::size_t>(k)])];
            for (Eigen::Index c = 0; c < p.n_gen(); ++c) CHECK(jx(row, c) == (c == k ? -1.0 : 0.0));
        }
        // Q rows at load buses ignore P^g
        CHECK(jx.bottomLeftCorner(p.n_load(), p.n_gen()).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("invertible at the nominal solution") {
        const SolveResult s = tight_newton(g, x, d);
        const Eigen::MatrixXd jz = pf_jacobian_z(g, s.z_star, x);
        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(jz.rows(), jz.cols());
        CHECK((jz * jz.partialPivLu().inverse() - eye).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("FDPF step", "[pf]") {
    const GridModel& g = fixtures::grid57();
    const FdpfFactors f = build_fdpf_matrices(g);
    const Eigen::VectorXd x = nominal_prediction(g);
    const Eigen::VectorXd& d = g.nominal_load;

    SECTION("fixed point at the solution") {
        const SolveResult s = tight_newton(g, x, d);
        CHECK((fdpf_step(g, f, s.z_star, x, d) - s.z_star).cwiseAbs().maxCoeff() < 1e-10);
    }
    SECTION("first angle update on the two-bus network") {
        const GridModel t = two_bus_grid();
        const FdpfFactors ft = build_fdpf_matrices(t);
        const FdpfStepDetail det =
            fdpf_step_detail(t, ft, flat_start(t), Eigen::VectorXd::Ones(1), two_bus_load(0.5, 0.1));
        CHECK_THAT(det.after_angle.v.array().arg()(1), WithinAbs(-0.05, 1e-14));
    }
    SECTION("twenty steps converge") {
        Eigen::VectorXd z = flat_start(g);
        for (int k = 0; k < 20; ++k) z = fdpf_step(g, f, z, x, d);
        CHECK(completion_residual(g, z, x, d).cwiseAbs().maxCoeff() < 1e-6);
    }
    SECTION("non-finite mismatch diverges") {
        Eigen::VectorXd z = flat_start(g);
        z[0] = std::nan("");
        CHECK_THROWS_AS(fdpf_step(g, f, z, x, d), DivergenceError);
    }
}

TEST_CASE("Newton step", "[pf]") {
    const GridModel& g = fixtures::grid57();
    const FdpfFactors f = build_fdpf_matrices(g);
    const Eigen::VectorXd x = nominal_prediction(g);
    const Eigen::VectorXd& d = g.nominal_load;
    const SolveResult s = tight_newton(g, x, d);

    CHECK((nr_step(g, s.z_star, x, d) - s.z_star).cwiseAbs().maxCoeff() < 1e-12);

    SECTION("one step after ten FDPF steps") {
        Eigen::VectorXd z = flat_start(g);
        for (int k = 0; k < 10; ++k) z = fdpf_step(g, f, z, x, d);
        CHECK(completion_residual(g, nr_step(g, z, x, d), x, d).cwiseAbs().maxCoeff() < 1e-10);
    }
    SECTION("quadratic convergence") {
        // Push z* along a fixed direction until the mismatch reaches each target.
        const Eigen::VectorXd dir = (perturbed_state(g, 8) - flat_start(g)).normalized();
        std::vector<double> la, lb;
        for (double target : {1e-3, 1e-4, 1e-5}) {
            double lo = 0.0, hi = 1.0;
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double r = completion_residual(g, s.z_star + mid * dir, x, d).cwiseAbs().maxCoeff();
                (r < target ? lo : hi) = mid;
            }
            const Eigen::VectorXd z = s.z_star + lo * dir;
            const double a = completion_residual(g, z, x, d).cwiseAbs().maxCoeff();
            const double b = completion_residual(g, nr_step(g, z, x, d), x, d).cwiseAbs().maxCoeff();
            la.push_back(std::log10(a));
            lb.push_back(std::log10(b));
            CHECK(b <= 1e3 * a * a);
        }
        const double slope = (lb[1] - lb[0]) / (la[1] - la[0]);
        CHECK_THAT(slope, WithinAbs(2.0, 0.3));
    }
}

TEST_CASE("hybrid solver budgets", "[pf]") {
    const GridModel& g = fixtures::grid57();
    const FdpfFactors f = build_fdpf_matrices(g);
    const Eigen::VectorXd x = nominal_prediction(g);
    const Eigen::VectorXd& d = g.nominal_load;

    SolverConfig nr;
    nr.guide_iterations = 9;
    nr.refinement = RefinementKind::SingleNR;
    nr.refinement_iterations = 1;
    const SolveResult a = hybrid_solve(g, f, x, d, nr);
    CHECK(a.converged);
    CHECK(a.iterations_used <= 10);

    const SolverConfig kstep;  // 8 guide + 4 refinement
    const SolveResult b = hybrid_solve(g, f, x, d, kstep);
    CHECK(b.converged);
    CHECK(b.iterations_used <= 12);
    CHECK(b.refinement_inputs.size() == 4);

    const SolveResult oracle = tight_newton(g, x, d);
    CHECK((a.z_star - oracle.z_star).cwiseAbs().maxCoeff() < 1e-8);

    SECTION("converged implies the tolerance holds") {
        for (const auto& r : {a, b}) {
            if (r.converged) CHECK(r.final_mismatch_inf_norm < 1e-5);
            CHECK(r.trace.back() == r.final_mismatch_inf_norm);
        }
    }
    SECTION("guide phase values equal a plain FDPF run") {
        Eigen::VectorXd z = flat_start(g);
        for (int k = 0; k < kstep.guide_iterations; ++k) z = fdpf_step(g, f, z, x, d);
        CHECK(z == b.z_entry);
        Eigen::VectorXd zr = z;
        for (int k = 0; k < kstep.refinement_iterations; ++k) zr = fdpf_step(g, f, zr, x, d);
        CHECK(zr == b.z_star);
    }
    SECTION("excessive load diverges without throwing") {
        SolveResult r;
        REQUIRE_NOTHROW(r = hybrid_solve(g, f, x, 40.0 * d, kstep));
        CHECK_FALSE(r.converged);
    }
    SECTION("invalid configurations") {
        SolverConfig c;
        c.refinement_iterations = 0;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        c = SolverConfig{};
        c.tolerance = 0.0;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        c = SolverConfig{};
        c.guide_iterations = -1;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    }
}

TEST_CASE("FDPF and Newton share the fixed point", "[pf][property]") {
    for (const char* name : {"case9.m", "case14.m", "case57.m", "case118.m"}) {
        const GridModel g = build_grid(load_matpower_file(fixtures::data(name)));
        const FdpfFactors f = build_fdpf_matrices(g);
        const Eigen::VectorXd x = nominal_prediction(g);
        const SolveResult a = fdpf_solve(g, f, x, g.nominal_load, 1e-8, 100);
        const SolveResult b = newton_solve(g, x, g.nominal_load, 1e-8, 30);
        INFO(name);
        REQUIRE(a.converged);
        REQUIRE(b.converged);
        CHECK((a.z_star - b.z_star).cwiseAbs().maxCoeff() < 1e-6);

        // linear decay after the first two steps
        double worst = 0.0;
        for (std::size_t k = 2; k + 1 < a.trace.size(); ++k) worst = std::max(worst, a.trace[k + 1] / a.trace[k]);
        CHECK(worst < 1.0);
    }
}

TEST_CASE("post-completion", "[pf]") {
    SECTION("balance holds at a converged state") {
        const GridModel& g = fixtures::grid57();
        const Eigen::VectorXd x = nominal_prediction(g);
        const SolveResult s = tight_newton(g, x, g.nominal_load);
        const Eigen::VectorXd zt = post_complete(g, x, s.z_star, g.nominal_load);
        REQUIRE(zt.size() == g.partition.n_post());
        const AssembledState y = assemble(g, x, s.z_star, zt);
        CHECK(equality_values(g, y, g.nominal_load).cwiseAbs().maxCoeff() < 1e-10);
    }
    SECTION("lossless two-bus energy balance") {
        const GridModel t = two_bus_grid();
        const Eigen::VectorXd x = Eigen::VectorXd::Ones(1);
        const Eigen::VectorXd d = two_bus_load(0.5, 0.1);
        const SolveResult s = newton_solve(t, x, d, 1e-13, 30);
        REQUIRE(s.converged);
        const Eigen::VectorXd zt = post_complete(t, x, s.z_star, d);
        CHECK_THAT(zt[0], WithinAbs(0.5, 1e-12));  // slack P^g
    }
    SECTION("zero load at flat start") {
        const GridModel t = two_bus_grid();
        const Eigen::VectorXd zt =
            post_complete(t, Eigen::VectorXd::Ones(1), flat_start(t), Eigen::VectorXd::Zero(4));
        CHECK(zt.cwiseAbs().maxCoeff() < 1e-14);
    }
}

TEST_CASE("branch flows", "[pf]") {
    SECTION("charging-only flow") {
        RawCase rc = parse_matpower(std::string_view(fixtures::kTwoBus));
        rc.branches[0].b = 0.2;
        const GridModel t = build_grid(rc);
        const double v = 1.03;
        const auto flows = branch_flows(t, Eigen::VectorXd::Constant(2, v), Eigen::VectorXd::Zero(2));
        REQUIRE(flows.size() == 1);
        for (const Complex s : {flows[0].from, flows[0].to}) {
            CHECK_THAT(s.real(), WithinAbs(0.0, 1e-14));
            CHECK_THAT(s.imag(), WithinAbs(-v * v * 0.1, 1e-14));
        }
    }
    SECTION("Kirchhoff cross-check and per-branch losses") {
        const GridModel& g = fixtures::grid57();
        const BusState st = expand_state(g, nominal_prediction(g), perturbed_state(g, 21));
        const Injection s = power_injections(g, st.vm, st.va);
        const auto flows = branch_flows(g, st.vm, st.va);
        Eigen::VectorXd p = g.shunt_g.array() * st.vm.array().square();
        Eigen::VectorXd q = -g.shunt_b.array() * st.vm.array().square();
        for (std::size_t k = 0; k < flows.size(); ++k) {
            const Branch& b = g.branches[k];
            p[b.from] += flows[k].from.real();
            q[b.from] += flows[k].from.imag();
            p[b.to] += flows[k].to.real();
            q[b.to] += flows[k].to.imag();
            CHECK(flows[k].from.real() + flows[k].to.real() >= -1e-14);
        }
        CHECK((p - s.p).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((q - s.q).cwiseAbs().maxCoeff() < 1e-10);
    }
}
