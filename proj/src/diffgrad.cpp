#include "opflayer/diffgrad.hpp"

#include <cmath>

#include <Eigen/LU>
#include <Eigen/SVD>

namespace opflayer {

namespace {

// Per-bus tangent columns for tangent columns of (z, x).
void bus_tangents(const GridModel& grid, const Eigen::MatrixXd& dz, const Eigen::MatrixXd& dx, Eigen::MatrixXd& dvm,
                  Eigen::MatrixXd& dva) {
    const auto& part = grid.partition;
    const Eigen::Index cols = dz.cols();
    const Eigen::Index nns = part.n_non_slack(), ng = part.n_gen();
    dvm = Eigen::MatrixXd::Zero(grid.n_bus, cols);
    dva = Eigen::MatrixXd::Zero(grid.n_bus, cols);
    for (Eigen::Index k = 0; k < nns; ++k) dva.row(part.non_slack[static_cast<std::size_t>(k)]) = dz.row(k);
    for (Eigen::Index k = 0; k < part.n_load(); ++k) dvm.row(part.load[static_cast<std::size_t>(k)]) = dz.row(nns + k);
    for (std::size_t k = 0; k < part.gen_or_slack.size(); ++k)
        dvm.row(part.gen_or_slack[k]) = dx.row(ng + static_cast<Eigen::Index>(k));
}

Eigen::PartialPivLU<Eigen::MatrixXd> factor_jacobian(const Eigen::MatrixXd& j) {
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(j);
    if (!(lu.rcond() > 1e-14)) throw SingularJacobianError("power-flow Jacobian is singular");
    return lu;
}

}  // namespace

Eigen::MatrixXd fdpf_step_jvp(const GridModel& grid, const FdpfFactors& factors, const FdpfStepDetail& det,
                              const Eigen::MatrixXd& dz, const Eigen::MatrixXd& dx) {
    const auto& part = grid.partition;
    const Eigen::Index nns = part.n_non_slack(), nd = part.n_load();
    const Eigen::Index cols = dz.cols();
    Eigen::MatrixXd dvm, dva;
    bus_tangents(grid, dz, dx, dvm, dva);
    const Eigen::VectorXd& vm = det.before.vm;

    // angle half-step: theta' = theta - B'^{-1} a, a = r_P / |V|
    const InjectionTangents s0 = injection_jvp_columns(grid, det.before, dvm, dva);
    Eigen::MatrixXd rp = s0.p(part.non_slack, Eigen::all);
    for (Eigen::Index k = 0; k < part.n_gen(); ++k)
        rp.row(part.pos_non_slack[static_cast<std::size_t>(part.gen[static_cast<std::size_t>(k)])]) -= dx.row(k);
    Eigen::MatrixXd adot(nns, cols);
    for (Eigen::Index k = 0; k < nns; ++k) {
        const int bus = part.non_slack[static_cast<std::size_t>(k)];
        adot.row(k) = (rp.row(k) - det.a[k] * dvm.row(bus)) / vm[bus];
    }
    const Eigen::MatrixXd dtheta = dz.topRows(nns) - factors.solve_prime(adot);
    for (Eigen::Index k = 0; k < nns; ++k) dva.row(part.non_slack[static_cast<std::size_t>(k)]) = dtheta.row(k);

    // voltage half-step on the refreshed angles: v' = v - B''^{-1} b, b = r_Q / |V|
    const InjectionTangents s1 = injection_jvp_columns(grid, det.after_angle, dvm, dva);
    Eigen::MatrixXd bdot(nd, cols);
    for (Eigen::Index k = 0; k < nd; ++k) {
        const int bus = part.load[static_cast<std::size_t>(k)];
        bdot.row(k) = (s1.q.row(bus) - det.b[k] * dvm.row(bus)) / vm[bus];
    }
    Eigen::MatrixXd dv = dz.bottomRows(nd) - factors.solve_double_prime(bdot);
    for (Eigen::Index k = 0; k < nd; ++k)
        if (det.clamped[static_cast<std::size_t>(k)]) dv.row(k).setZero();

    Eigen::MatrixXd out(part.n(), cols);
    out.topRows(nns) = dtheta;
    out.bottomRows(nd) = dv;
    return out;
}

StepCotangent fdpf_step_vjp(const GridModel& grid, const FdpfFactors& factors, const FdpfStepDetail& det,
                            const Eigen::VectorXd& z_next_bar) {
    const auto& part = grid.partition;
    const Eigen::Index nns = part.n_non_slack(), nd = part.n_load(), ng = part.n_gen();
    const Eigen::VectorXd& vm = det.before.vm;
    const Eigen::Index nb = grid.n_bus;

    Eigen::VectorXd vbar_next = z_next_bar.tail(nd);
    for (Eigen::Index k = 0; k < nd; ++k)
        if (det.clamped[static_cast<std::size_t>(k)]) vbar_next[k] = 0.0;

    Eigen::VectorXd vm_bar = Eigen::VectorXd::Zero(nb);
    // voltage half-step
    const Eigen::VectorXd bbar = -factors.solve_double_prime_transposed(vbar_next);
    Eigen::VectorXd wq = Eigen::VectorXd::Zero(nb);
    for (Eigen::Index k = 0; k < nd; ++k) {
        const int bus = part.load[static_cast<std::size_t>(k)];
        vm_bar[bus] += vbar_next[k] - bbar[k] * det.b[k] / vm[bus];
        wq[bus] = bbar[k] / vm[bus];
    }
    const BusState g1 = injection_vjp(grid, det.after_angle, Eigen::VectorXd::Zero(nb), wq);
    vm_bar += g1.vm;
    Eigen::VectorXd theta_bar = g1.va(part.non_slack) + z_next_bar.head(nns);

    // angle half-step
    const Eigen::VectorXd abar = -factors.solve_prime_transposed(theta_bar);
    Eigen::VectorXd wp = Eigen::VectorXd::Zero(nb);
    for (Eigen::Index k = 0; k < nns; ++k) {
        const int bus = part.non_slack[static_cast<std::size_t>(k)];
        wp[bus] = abar[k] / vm[bus];
        vm_bar[bus] -= abar[k] * det.a[k] / vm[bus];
    }
    const BusState g0 = injection_vjp(grid, det.before, wp, Eigen::VectorXd::Zero(nb));
    vm_bar += g0.vm;
    theta_bar += g0.va(part.non_slack);

    StepCotangent out;
    out.z.resize(part.n());
    out.z.head(nns) = theta_bar;
    out.z.tail(nd) = vm_bar(part.load);
    out.x.resize(part.m());
    for (Eigen::Index k = 0; k < ng; ++k) out.x[k] = -wp[part.gen[static_cast<std::size_t>(k)]];
    out.x.tail(part.m() - ng) = vm_bar(part.gen_or_slack);
    return out;
}

Eigen::MatrixXd nr_step_jvp(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                            const Eigen::MatrixXd& dx) {
    const auto lu = factor_jacobian(pf_jacobian_z(grid, z, x));
    return -lu.solve(pf_jacobian_x(grid, z, x) * dx);
}

StepCotangent nr_step_vjp(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& z_next_bar) {
    const auto lu = factor_jacobian(pf_jacobian_z(grid, z, x));
    const Eigen::VectorXd u = lu.transpose().solve(z_next_bar);
    return {Eigen::VectorXd::Zero(z.size()), -pf_jacobian_x(grid, z, x).transpose() * u};
}

Eigen::MatrixXd exact_implicit_jacobian_h(const GridModel& grid, const Eigen::VectorXd& z_star,
                                          const Eigen::VectorXd& x, const Eigen::VectorXd& /*d*/) {
    const auto lu = factor_jacobian(pf_jacobian_z(grid, z_star, x));
    return -lu.solve(pf_jacobian_x(grid, z_star, x));
}

StepJacobians fdpf_step_jacobians(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                  const Eigen::VectorXd& x, const Eigen::VectorXd& d) {
    const Eigen::Index n = grid.partition.n(), m = grid.partition.m();
    const FdpfStepDetail det = fdpf_step_detail(grid, factors, z, x, d);
    StepJacobians j;
    j.tz = fdpf_step_jvp(grid, factors, det, Eigen::MatrixXd::Identity(n, n), Eigen::MatrixXd::Zero(m, n));
    j.tx = fdpf_step_jvp(grid, factors, det, Eigen::MatrixXd::Zero(n, m), Eigen::MatrixXd::Identity(m, m));
    return j;
}

Eigen::MatrixXd exact_implicit_jacobian_T(const GridModel& grid, const FdpfFactors& factors,
                                          const Eigen::VectorXd& z_star, const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& d) {
    const StepJacobians j = fdpf_step_jacobians(grid, factors, z_star, x, d);
    const Eigen::Index n = grid.partition.n();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(Eigen::MatrixXd::Identity(n, n) - j.tz);
    if (!(lu.rcond() > 1e-14)) throw SingularJacobianError("fixed-point resolvent I - dT/dz is singular");
    return lu.solve(j.tx);
}

std::vector<Eigen::VectorXd> replay_refinement(const GridModel& grid, const FdpfFactors& factors,
                                               const Eigen::VectorXd& z_entry, const Eigen::VectorXd& x,
                                               const Eigen::VectorXd& d, int k_r, RefinementKind kind) {
    std::vector<Eigen::VectorXd> inputs;
    Eigen::VectorXd z = z_entry;
    const int steps = kind == RefinementKind::SingleNR ? 1 : k_r;
    for (int k = 0; k < steps; ++k) {
        inputs.push_back(z);
        if (k + 1 < steps) z = fdpf_step(grid, factors, z, x, d);
    }
    return inputs;
}

Eigen::MatrixXd kstep_jacobian(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z_entry,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r, RefinementKind kind) {
    const Eigen::Index n = grid.partition.n(), m = grid.partition.m();
    if (kind == RefinementKind::SingleNR) return nr_step_jvp(grid, z_entry, x, Eigen::MatrixXd::Identity(m, m));
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, m);
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(m, m);
    for (const auto& z : replay_refinement(grid, factors, z_entry, x, d, k_r, kind))
        jac = fdpf_step_jvp(grid, factors, fdpf_step_detail(grid, factors, z, x, d), jac, eye);
    return jac;
}

Eigen::MatrixXd composite_z_jacobian(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                     const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k) {
    const Eigen::Index n = grid.partition.n(), m = grid.partition.m();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(m, n);
    Eigen::VectorXd zk = z;
    for (int i = 0; i < k; ++i) {
        const FdpfStepDetail det = fdpf_step_detail(grid, factors, zk, x, d);
        jac = fdpf_step_jvp(grid, factors, det, jac, zero);
        zk = det.z_next;
    }
    return jac;
}

Eigen::VectorXd refinement_vjp(const GridModel& grid, const FdpfFactors& factors,
                               const std::vector<Eigen::VectorXd>& step_inputs, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& d, RefinementKind kind, const Eigen::VectorXd& cotangent) {
    if (kind == RefinementKind::SingleNR) return nr_step_vjp(grid, step_inputs.front(), x, cotangent).x;
    Eigen::VectorXd zbar = cotangent;
    Eigen::VectorXd xbar = Eigen::VectorXd::Zero(grid.partition.m());
    for (auto it = step_inputs.rbegin(); it != step_inputs.rend(); ++it) {
        const StepCotangent c = fdpf_step_vjp(grid, factors, fdpf_step_detail(grid, factors, *it, x, d), zbar);
        xbar += c.x;
        zbar = c.z;
    }
    // zbar now belongs to the detached entry point and is dropped.
    return xbar;
}

Eigen::VectorXd refinement_vjp(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z_entry,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r, RefinementKind kind,
                               const Eigen::VectorXd& cotangent) {
    return refinement_vjp(grid, factors, replay_refinement(grid, factors, z_entry, x, d, k_r, kind), x, d, kind,
                          cotangent);
}

Eigen::VectorXd exact_vjp(const GridModel& grid, const Eigen::VectorXd& z_star, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& cotangent) {
    return nr_step_vjp(grid, z_star, x, cotangent).x;
}

Eigen::MatrixXd finite_diff_jacobian(const VectorMap& f, const Eigen::VectorXd& at, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
    Eigen::MatrixXd jac;
    Eigen::VectorXd p = at;
    for (Eigen::Index j = 0; j < at.size(); ++j) {
        p[j] = at[j] + step;
        const Eigen::VectorXd fp = f(p);
        p[j] = at[j] - step;
        const Eigen::VectorXd fm = f(p);
        p[j] = at[j];
        if (j == 0) jac.resize(fp.size(), at.size());
        jac.col(j) = (fp - fm) / (2.0 * step);
    }
    return jac;
}

double cosine_similarity(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.cwiseProduct(b).sum() / (na * nb);
}

double relative_error(const Eigen::Ref<const Eigen::MatrixXd>& approx, const Eigen::Ref<const Eigen::MatrixXd>& exact) {
    return (approx - exact).norm() / exact.norm();
}

double spectral_norm(const Eigen::MatrixXd& a) {
    if (a.size() == 0) return 0.0;
    if (a.rows() < kDenseNormRows) {
        Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
        return svd.singularValues()[0];
    }
    // power iteration on a^T a from a fixed start
    Eigen::VectorXd v = Eigen::VectorXd::Ones(a.cols()).normalized();
    double sigma = 0.0;
    for (int it = 0; it < 500; ++it) {
        Eigen::VectorXd w = a.transpose() * (a * v);
        const double nw = w.norm();
        if (nw == 0.0) return 0.0;
        const double next = std::sqrt(nw);
        v = w / nw;
        if (std::abs(next - sigma) <= 1e-12 * next) return next;
        sigma = next;
    }
    return sigma;
}

SensitivityReport sensitivity_report(const GridModel& grid, const FdpfFactors& factors, const SolveResult& solve,
                                     const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r,
                                     RefinementKind kind) {
    SensitivityReport r;
    r.exact_via_h = exact_implicit_jacobian_h(grid, solve.z_star, x, d);
    r.exact_via_T = exact_implicit_jacobian_T(grid, factors, solve.z_star, x, d);
    r.kstep = kstep_jacobian(grid, factors, solve.z_entry, x, d, k_r, kind);
    r.cosine_to_exact = cosine_similarity(r.kstep, r.exact_via_h);
    r.relative_error = relative_error(r.kstep, r.exact_via_h);
    return r;
}

}  // namespace opflayer
