#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "opflayer/diffgrad.hpp"
#include "opflayer/pf.hpp"

using namespace opflayer;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Setup57 {
    const GridModel& g = fixtures::grid57();
    FdpfFactors f = build_fdpf_matrices(g);
    Eigen::VectorXd x = nominal_prediction(g);
    Eigen::VectorXd d = g.nominal_load;
    Eigen::VectorXd z_star = newton_solve(g, x, d, 1e-13, 30).z_star;
};

const Setup57& s57() {
    static const Setup57 s;
    return s;
}

double frob_rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

// Slack at bus 1 feeding a generator bus over a lossless x = 0.1 line.
GridModel slack_pv_grid() {
    RawCase rc = parse_matpower(std::string_view(fixtures::kTwoBus));
    rc.buses[1].type = 2;
    GenRecord gr = rc.gens[0];
    gr.bus = 2;
    gr.pg = 20;
    gr.vg = 1.02;
    rc.gens.push_back(gr);
    rc.gencosts.push_back(rc.gencosts[0]);
    return build_grid(rc);
}

}  // namespace

TEST_CASE("finite-difference oracle itself", "[diffgrad]") {
    const Eigen::VectorXd at = Eigen::VectorXd::LinSpaced(4, -1.0, 2.0);
    const Eigen::MatrixXd id = finite_diff_jacobian([](const Eigen::VectorXd& v) { return v; }, at, 1e-6);
    CHECK((id - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-9);

    const Eigen::Vector2d p(1.0, 2.0);
    const VectorMap poly = [](const Eigen::VectorXd& v) {
        return Eigen::VectorXd(Eigen::Vector2d(v[0] * v[0], v[0] * v[1]));
    };
    Eigen::Matrix2d want;
    want << 2, 0, 2, 1;
    CHECK((finite_diff_jacobian(poly, p, 1e-6) - want).cwiseAbs().maxCoeff() < 1e-8);

    // second-order accuracy: halving the step quarters the error
    const VectorMap smooth = [](const Eigen::VectorXd& v) {
        return Eigen::VectorXd(Eigen::VectorXd::Constant(1, std::exp(v[0]) * std::sin(v[0])));
    };
    const Eigen::VectorXd a = Eigen::VectorXd::Constant(1, 0.7);
    const double exact = std::exp(0.7) * (std::sin(0.7) + std::cos(0.7));
    const double e1 = std::abs(finite_diff_jacobian(smooth, a, 1e-2)(0, 0) - exact);
    const double e2 = std::abs(finite_diff_jacobian(smooth, a, 5e-3)(0, 0) - exact);
    CHECK_THAT(e1 / e2, WithinAbs(4.0, 0.1));
}

TEST_CASE("exact Jacobian through the balance equations", "[diffgrad]") {
    const auto& s = s57();
    const Eigen::MatrixXd jh = exact_implicit_jacobian_h(s.g, s.z_star, s.x, s.d);
    REQUIRE(jh.rows() == 106);
    REQUIRE(jh.cols() == 13);

    SECTION("matches differences through a tightened solve") {
        const Eigen::MatrixXd fd = finite_diff_jacobian(
            [&](const Eigen::VectorXd& xx) { return newton_solve(s.g, xx, s.d, 1e-13, 30).z_star; }, s.x, 1e-6);
        CHECK(frob_rel(jh, fd) < 1e-4);
        const SolverConfig tight{30, RefinementKind::KStepFDPF, 10, 1e-12, 1e3};
        const Eigen::MatrixXd fd_hybrid = finite_diff_jacobian(
            [&](const Eigen::VectorXd& xx) { return hybrid_solve(s.g, s.f, xx, s.d, tight).z_star; }, s.x, 1e-6);
        CHECK(frob_rel(jh, fd_hybrid) < 1e-4);
    }
    SECTION("first-order action of a dispatch perturbation") {
        const double delta = 1e-5;
        Eigen::VectorXd xp = s.x;
        xp[2] += delta;
        const Eigen::VectorXd moved = newton_solve(s.g, xp, s.d, 1e-13, 30).z_star - s.z_star;
        const Eigen::VectorXd predicted = jh.col(2) * delta;
        CHECK((moved - predicted).norm() < 1e-3 * predicted.norm());
    }
    SECTION("cotangent form agrees with the dense Jacobian") {
        std::mt19937_64 rng(2);
        std::normal_distribution<double> n;
        Eigen::VectorXd cot(106);
        for (auto& v : cot) v = n(rng);
        CHECK((exact_vjp(s.g, s.z_star, s.x, cot) - jh.transpose() * cot).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("fixed-point and balance formulations agree", "[diffgrad][property]") {
    for (const char* name : {"case9.m", "case14.m", "case57.m", "case118.m"}) {
        const GridModel g = build_grid(load_matpower_file(fixtures::data(name)));
        const FdpfFactors f = build_fdpf_matrices(g);
        const Eigen::VectorXd x = nominal_prediction(g);
        const SolveResult r = newton_solve(g, x, g.nominal_load, 1e-12, 30);
        REQUIRE(r.final_mismatch_inf_norm < 1e-8);
        INFO(name);
        CHECK(frob_rel(exact_implicit_jacobian_T(g, f, r.z_star, x, g.nominal_load),
                       exact_implicit_jacobian_h(g, r.z_star, x, g.nominal_load)) < 1e-6);
    }
}

TEST_CASE("slack plus generator bus closed form", "[diffgrad]") {
    const GridModel g = slack_pv_grid();
    REQUIRE(g.partition.n() == 1);  // only the generator-bus angle
    REQUIRE(g.partition.m() == 3);  // [P^g_2 | V_1, V_2]
    const FdpfFactors f = build_fdpf_matrices(g);
    const Eigen::VectorXd x = nominal_prediction(g);
    const SolveResult r = newton_solve(g, x, g.nominal_load, 1e-14, 30);
    REQUIRE(r.converged);
    // 10 V1 V2 sin(theta2) = P^g_2 - P^d_2  =>  d theta2 / d V1 = -tan(theta2) / V1
    const double th = r.z_star[0] - g.slack_angle;
    const double v1 = x[1], v2 = x[2];
    const double dv1 = -std::tan(th) / v1;
    const double dv2 = -std::tan(th) / v2;
    const double dpg = 1.0 / (10.0 * v1 * v2 * std::cos(th));
    for (const Eigen::MatrixXd& j :
         {exact_implicit_jacobian_h(g, r.z_star, x, g.nominal_load),
          exact_implicit_jacobian_T(g, f, r.z_star, x, g.nominal_load)}) {
        CHECK_THAT(j(0, 0), WithinAbs(dpg, 1e-10));
        CHECK_THAT(j(0, 1), WithinAbs(dv1, 1e-10));
        CHECK_THAT(j(0, 2), WithinAbs(dv2, 1e-10));
    }
}

TEST_CASE("zero-load network dispatch column", "[diffgrad]") {
    const GridModel& g = fixtures::grid57();
    const FdpfFactors f = build_fdpf_matrices(g);
    Eigen::VectorXd x = nominal_prediction(g);
    x.head(g.partition.n_gen()).setZero();
    const Eigen::VectorXd d = Eigen::VectorXd::Zero(g.nominal_load.size());
    const SolveResult r = newton_solve(g, x, d, 1e-13, 30);
    REQUIRE(r.converged);
    const Eigen::MatrixXd fd = finite_diff_jacobian(
        [&](const Eigen::VectorXd& xx) { return newton_solve(g, xx, d, 1e-13, 30).z_star; }, x, 1e-6);
    const Eigen::MatrixXd jh = exact_implicit_jacobian_h(g, r.z_star, x, d);
    const Eigen::MatrixXd jt = exact_implicit_jacobian_T(g, f, r.z_star, x, d);
    for (Eigen::Index c = 0; c < g.partition.n_gen(); ++c) {
        CHECK((jh.col(c) - fd.col(c)).norm() < 1e-5 * fd.col(c).norm());
        CHECK((jt.col(c) - fd.col(c)).norm() < 1e-5 * fd.col(c).norm());
    }
}

TEST_CASE("FDPF step Jacobians", "[diffgrad]") {
    const auto& s = s57();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-0.02, 0.02);
    Eigen::VectorXd z = s.z_star;
    for (auto& v : z) v += u(rng);
    const StepJacobians j = fdpf_step_jacobians(s.g, s.f, z, s.x, s.d);
    const Eigen::MatrixXd fz = finite_diff_jacobian(
        [&](const Eigen::VectorXd& zz) { return fdpf_step(s.g, s.f, zz, s.x, s.d); }, z, 1e-6);
    const Eigen::MatrixXd fx = finite_diff_jacobian(
        [&](const Eigen::VectorXd& xx) { return fdpf_step(s.g, s.f, z, xx, s.d); }, s.x, 1e-6);
    CHECK(frob_rel(j.tz, fz) < 1e-5);
    CHECK(frob_rel(j.tx, fx) < 1e-5);

    SECTION("composite map chains the step Jacobians") {
        CHECK((composite_z_jacobian(s.g, s.f, z, s.x, s.d, 1) - j.tz).cwiseAbs().maxCoeff() < 1e-12);
        const Eigen::VectorXd z1 = fdpf_step(s.g, s.f, z, s.x, s.d);
        const Eigen::MatrixXd two = fdpf_step_jacobians(s.g, s.f, z1, s.x, s.d).tz * j.tz;
        CHECK(frob_rel(composite_z_jacobian(s.g, s.f, z, s.x, s.d, 2), two) < 1e-12);
    }
}

TEST_CASE("K-step Jacobian", "[diffgrad]") {
    const auto& s = s57();
    SECTION("one step at the fixed point is the step's x Jacobian") {
        const Eigen::MatrixXd k1 = kstep_jacobian(s.g, s.f, s.z_star, s.x, s.d, 1, RefinementKind::KStepFDPF);
        CHECK(k1 == fdpf_step_jacobians(s.g, s.f, s.z_star, s.x, s.d).tx);
    }
    SECTION("frozen-entry unrolled differences") {
        const SolveResult entry = hybrid_solve(s.g, s.f, s.x, s.d, SolverConfig{4, RefinementKind::KStepFDPF, 1, 1e-5, 1e3});
        for (int k_r : {1, 2, 4, 8}) {
            const Eigen::MatrixXd jk = kstep_jacobian(s.g, s.f, entry.z_entry, s.x, s.d, k_r, RefinementKind::KStepFDPF);
            const Eigen::MatrixXd fd = finite_diff_jacobian(
                [&](const Eigen::VectorXd& xx) {
                    Eigen::VectorXd z = entry.z_entry;
                    for (int k = 0; k < k_r; ++k) z = fdpf_step(s.g, s.f, z, xx, s.d);
                    return z;
                },
                s.x, 1e-6);
            INFO("K_R = " << k_r);
            CHECK(frob_rel(jk, fd) < 1e-5);
        }
    }
    SECTION("Newton refinement at the solution is exact") {
        const Eigen::MatrixXd nr = kstep_jacobian(s.g, s.f, s.z_star, s.x, s.d, 1, RefinementKind::SingleNR);
        CHECK(frob_rel(nr, exact_implicit_jacobian_h(s.g, s.z_star, s.x, s.d)) < 1e-10);
    }
    SECTION("alignment improves with more refinement steps") {
        const Eigen::MatrixXd exact = exact_implicit_jacobian_T(s.g, s.f, s.z_star, s.x, s.d);
        const SolveResult entry = hybrid_solve(s.g, s.f, s.x, s.d, SolverConfig{});
        const double c1 = cosine_similarity(kstep_jacobian(s.g, s.f, entry.z_entry, s.x, s.d, 1, RefinementKind::KStepFDPF), exact);
        const double c4 = cosine_similarity(kstep_jacobian(s.g, s.f, entry.z_entry, s.x, s.d, 4, RefinementKind::KStepFDPF), exact);
        CHECK(c1 < c4);
        CHECK(c4 > 0.9);
    }
    SECTION("error shrinks as the guide phase lengthens") {
        const Eigen::MatrixXd exact = exact_implicit_jacobian_h(s.g, s.z_star, s.x, s.d);
        double previous = std::numeric_limits<double>::infinity();
        for (int k : {2, 4, 8, 16}) {
            Eigen::VectorXd z = flat_start(s.g);
            for (int i = 0; i < k; ++i) z = fdpf_step(s.g, s.f, z, s.x, s.d);
            const double err =
                (kstep_jacobian(s.g, s.f, z, s.x, s.d, 1, RefinementKind::KStepFDPF) - exact).norm();
            INFO("guide steps = " << k);
            CHECK(err <= 1.05 * previous);
            previous = err;
        }
    }
    SECTION("the entry point changes the value but is not differentiated") {
        Eigen::VectorXd moved = s.z_star;
        moved.array() += 1e-3;
        const Eigen::MatrixXd a = kstep_jacobian(s.g, s.f, s.z_star, s.x, s.d, 2, RefinementKind::KStepFDPF);
        const Eigen::MatrixXd b = kstep_jacobian(s.g, s.f, moved, s.x, s.d, 2, RefinementKind::KStepFDPF);
        CHECK((a - b).norm() > 0.0);
        CHECK(a.cols() == s.x.size());  // only x columns exist
    }
}

TEST_CASE("refinement cotangents", "[diffgrad][property]") {
    const auto& s = s57();
    for (const auto kind : {RefinementKind::KStepFDPF, RefinementKind::SingleNR}) {
        SolverConfig cfg;
        if (kind == RefinementKind::SingleNR) cfg = SolverConfig{9, kind, 1, 1e-5, 1e3};
        const SolveResult r = hybrid_solve(s.g, s.f, s.x, s.d, cfg);
        const Eigen::MatrixXd jk =
            kstep_jacobian(s.g, s.f, r.z_entry, s.x, s.d, cfg.refinement_iterations, kind);
        std::mt19937_64 rng(17);
        std::normal_distribution<double> n;
        double worst = 0.0;
        for (int t = 0; t < 20; ++t) {
            Eigen::VectorXd cot(jk.rows());
            for (auto& v : cot) v = n(rng);
            const Eigen::VectorXd recorded = refinement_vjp(s.g, s.f, r.refinement_inputs, s.x, s.d, kind, cot);
            const Eigen::VectorXd replayed =
                refinement_vjp(s.g, s.f, r.z_entry, s.x, s.d, cfg.refinement_iterations, kind, cot);
            worst = std::max(worst, (recorded - jk.transpose() * cot).cwiseAbs().maxCoeff());
            worst = std::max(worst, (replayed - recorded).cwiseAbs().maxCoeff());
        }
        CHECK(worst < 1e-10);

        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(jk.rows());
        CHECK(refinement_vjp(s.g, s.f, r.refinement_inputs, s.x, s.d, kind, zero).isZero(0.0));
        const Eigen::VectorXd e5 = Eigen::VectorXd::Unit(jk.rows(), 5);
        CHECK((refinement_vjp(s.g, s.f, r.refinement_inputs, s.x, s.d, kind, e5) - jk.row(5).transpose())
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
    }
}

TEST_CASE("comparison helpers", "[diffgrad]") {
    const Eigen::Vector3d a(1.0, 2.0, 2.0);
    CHECK_THAT(cosine_similarity(a, a), WithinAbs(1.0, 1e-15));
    CHECK_THAT(cosine_similarity(a, -a), WithinAbs(-1.0, 1e-15));
    CHECK_THAT(relative_error(Eigen::Vector3d(2.0, 2.0, 2.0), a), WithinAbs(1.0 / 3.0, 1e-15));

    SECTION("spectral norm against a dense SVD") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> n;
        for (Eigen::Index rows : {Eigen::Index{40}, kDenseNormRows + 50}) {
            Eigen::MatrixXd m(rows, 30);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
            const double oracle = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()[0];
            CHECK_THAT(spectral_norm(m), WithinRel(oracle, 1e-8));
        }
    }
}

TEST_CASE("sensitivity report", "[diffgrad]") {
    const auto& s = s57();
    const SolveResult r = hybrid_solve(s.g, s.f, s.x, s.d, SolverConfig{});
    const SensitivityReport rep = sensitivity_report(s.g, s.f, r, s.x, s.d, 4, RefinementKind::KStepFDPF);
    CHECK(frob_rel(rep.exact_via_T, rep.exact_via_h) < 1e-6);
    CHECK(rep.cosine_to_exact > 0.9);
    CHECK_THAT(rep.relative_error, WithinAbs(relative_error(rep.kstep, rep.exact_via_h), 1e-12));
}
