#include "opflayer/pf.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/LU>

namespace opflayer {

namespace {

double inf_norm(const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

Eigen::VectorXd residual_at(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& d) {
    const auto& part = grid.partition;
    const Injection s = power_injections(pt);
    const Eigen::Index nns = part.n_non_slack();
    Eigen::VectorXd r(part.n());
    for (Eigen::Index k = 0; k < nns; ++k) {
        const int bus = part.non_slack[static_cast<std::size_t>(k)];
        const int g = part.pos_gen[static_cast<std::size_t>(bus)];
        r[k] = s.p[bus] + d[bus] - (g >= 0 ? x[g] : 0.0);
    }
    for (Eigen::Index k = 0; k < part.n_load(); ++k) {
        const int bus = part.load[static_cast<std::size_t>(k)];
        r[nns + k] = s.q[bus] + d[grid.n_bus + bus];
    }
    return r;
}

}  // namespace

BusState expand_state(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z) {
    const auto& part = grid.partition;
    BusState s;
    s.vm.resize(grid.n_bus);
    s.va.resize(grid.n_bus);
    for (int bus : part.slack) s.va[bus] = grid.slack_angle;
    const Eigen::Index nns = part.n_non_slack();
    for (Eigen::Index k = 0; k < nns; ++k) s.va[part.non_slack[static_cast<std::size_t>(k)]] = z[k];
    for (Eigen::Index k = 0; k < part.n_load(); ++k) s.vm[part.load[static_cast<std::size_t>(k)]] = z[nns + k];
    const Eigen::Index ng = part.n_gen();
    for (std::size_t k = 0; k < part.gen_or_slack.size(); ++k)
        s.vm[part.gen_or_slack[k]] = x[ng + static_cast<Eigen::Index>(k)];
    return s;
}

Eigen::VectorXd completion_vector(const GridModel& grid, const BusState& state) {
    const auto& part = grid.partition;
    const Eigen::Index nns = part.n_non_slack();
    Eigen::VectorXd z(part.n());
    for (Eigen::Index k = 0; k < nns; ++k) z[k] = state.va[part.non_slack[static_cast<std::size_t>(k)]];
    for (Eigen::Index k = 0; k < part.n_load(); ++k) z[nns + k] = state.vm[part.load[static_cast<std::size_t>(k)]];
    return z;
}

BusState expand_tangent(const GridModel& grid, const Eigen::VectorXd& dx, const Eigen::VectorXd& dz) {
    BusState t = expand_state(grid, dx, dz);
    for (int bus : grid.partition.slack) t.va[bus] = 0.0;
    return t;
}

Eigen::VectorXd flat_start(const GridModel& grid) {
    const auto& part = grid.partition;
    Eigen::VectorXd z(part.n());
    z.head(part.n_non_slack()).setConstant(grid.slack_angle);
    z.tail(part.n_load()).setOnes();
    return z;
}

Eigen::VectorXd completion_residual(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                    const Eigen::VectorXd& d) {
    const BusState s = expand_state(grid, x, z);
    return residual_at(grid, make_point(grid, s.vm, s.va), x, d);
}

Eigen::MatrixXd pf_jacobian_z(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x) {
    const auto& part = grid.partition;
    const BusState s = expand_state(grid, x, z);
    const InjectionDerivatives ds = injection_derivatives(grid, make_point(grid, s.vm, s.va));
    const Eigen::Index nns = part.n_non_slack(), nd = part.n_load();
    Eigen::MatrixXd j(part.n(), part.n());
    j.topLeftCorner(nns, nns) = ds.ds_dva(part.non_slack, part.non_slack).real();
    j.topRightCorner(nns, nd) = ds.ds_dvm(part.non_slack, part.load).real();
    j.bottomLeftCorner(nd, nns) = ds.ds_dva(part.load, part.non_slack).imag();
    j.bottomRightCorner(nd, nd) = ds.ds_dvm(part.load, part.load).imag();
    return j;
}

Eigen::MatrixXd pf_jacobian_x(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x) {
    const auto& part = grid.partition;
    const BusState s = expand_state(grid, x, z);
    const InjectionDerivatives ds = injection_derivatives(grid, make_point(grid, s.vm, s.va));
    const Eigen::Index nns = part.n_non_slack(), nd = part.n_load(), ng = part.n_gen();
    const auto ngr = static_cast<Eigen::Index>(part.gen_or_slack.size());
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(part.n(), part.m());
    for (Eigen::Index k = 0; k < ng; ++k) j(part.pos_non_slack[static_cast<std::size_t>(part.gen[static_cast<std::size_t>(k)])], k) = -1.0;
    j.block(0, ng, nns, ngr) = ds.ds_dvm(part.non_slack, part.gen_or_slack).real();
    j.block(nns, ng, nd, ngr) = ds.ds_dvm(part.load, part.gen_or_slack).imag();
    return j;
}

FdpfStepDetail fdpf_step_detail(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& x, const Eigen::VectorXd& d) {
    const auto& part = grid.partition;
    const Eigen::Index nns = part.n_non_slack(), nd = part.n_load();
    FdpfStepDetail out;

    BusState s = expand_state(grid, x, z);
    out.before = make_point(grid, s.vm, s.va);
    const Eigen::VectorXd r0 = residual_at(grid, out.before, x, d);
    if (!all_finite(r0)) throw DivergenceError("non-finite active power mismatch");
    out.a = r0.head(nns).cwiseQuotient(s.vm(part.non_slack));
    const Eigen::VectorXd dtheta = factors.solve_prime(out.a);
    for (Eigen::Index k = 0; k < nns; ++k) s.va[part.non_slack[static_cast<std::size_t>(k)]] -= dtheta[k];

    out.after_angle = make_point(grid, s.vm, s.va);
    const Eigen::VectorXd r1 = residual_at(grid, out.after_angle, x, d);
    if (!all_finite(r1)) throw DivergenceError("non-finite reactive power mismatch");
    out.b = r1.tail(nd).cwiseQuotient(s.vm(part.load));
    const Eigen::VectorXd dv = factors.solve_double_prime(out.b);

    out.z_next.resize(part.n());
    out.z_next.head(nns) = s.va(part.non_slack);
    out.clamped.assign(static_cast<std::size_t>(nd), false);
    for (Eigen::Index k = 0; k < nd; ++k) {
        const double v = s.vm[part.load[static_cast<std::size_t>(k)]] - dv[k];
        const double c = std::clamp(v, kVoltageFloor, kVoltageCeiling);
        out.clamped[static_cast<std::size_t>(k)] = c != v;
        out.z_next[nns + k] = c;
    }
    if (!all_finite(out.z_next)) throw DivergenceError("non-finite FDPF iterate");
    return out;
}

Eigen::VectorXd fdpf_step(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                          const Eigen::VectorXd& x, const Eigen::VectorXd& d, bool* clamped) {
    FdpfStepDetail det = fdpf_step_detail(grid, factors, z, x, d);
    if (clamped) *clamped = std::find(det.clamped.begin(), det.clamped.end(), true) != det.clamped.end();
    return std::move(det.z_next);
}

Eigen::VectorXd nr_step(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& d) {
    const Eigen::VectorXd r = completion_residual(grid, z, x, d);
    if (!all_finite(r)) throw DivergenceError("non-finite mismatch before Newton step");
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(pf_jacobian_z(grid, z, x));
    if (!(lu.rcond() > 1e-14)) throw SingularJacobianError("power-flow Jacobian is singular at the current iterate");
    return z - lu.solve(r);
}

void SolverConfig::validate() const {
    if (guide_iterations < 0) throw std::invalid_argument("guide_iterations must be >= 0");
    if (refinement_iterations < 1) throw std::invalid_argument("refinement_iterations must be >= 1");
    if (refinement == RefinementKind::SingleNR && refinement_iterations != 1)
        throw std::invalid_argument("SingleNR refinement uses exactly one iteration");
    if (!(tolerance > 0.0)) throw std::invalid_argument("tolerance must be positive");
    if (!(divergence_cap > 0.0)) throw std::invalid_argument("divergence_cap must be positive");
}

namespace {

// Appends the mismatch of z to the trace; returns false when the iterate
// has left the admissible region.
bool record(SolveResult& res, const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
            const Eigen::VectorXd& d, double cap) {
    const Eigen::VectorXd r = completion_residual(grid, z, x, d);
    const double m = all_finite(r) ? inf_norm(r) : std::numeric_limits<double>::infinity();
    res.trace.push_back(m);
    res.final_mismatch_inf_norm = m;
    if (!std::isfinite(m) || m > cap) {
        res.diverged = true;
        return false;
    }
    return true;
}

}  // namespace

SolveResult hybrid_solve(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& d, const SolverConfig& cfg) {
    cfg.validate();
    SolveResult res;
    Eigen::VectorXd z = flat_start(grid);
    res.z_star = z;
    try {
        for (int k = 0; k < cfg.guide_iterations; ++k) {
            bool clamped = false;
            z = fdpf_step(grid, factors, z, x, d, &clamped);
            res.clamp_events += clamped ? 1 : 0;
            ++res.iterations_used;
            if (!record(res, grid, z, x, d, cfg.divergence_cap)) {
                res.z_star = z;
                return res;
            }
        }
        res.z_entry = z;
        const int kr = cfg.refinement == RefinementKind::SingleNR ? 1 : cfg.refinement_iterations;
        for (int k = 0; k < kr; ++k) {
            res.refinement_inputs.push_back(z);
            if (cfg.refinement == RefinementKind::SingleNR) {
                z = nr_step(grid, z, x, d);
            } else {
                bool clamped = false;
                z = fdpf_step(grid, factors, z, x, d, &clamped);
                res.clamp_events += clamped ? 1 : 0;
            }
            ++res.iterations_used;
            if (!record(res, grid, z, x, d, cfg.divergence_cap)) {
                res.z_star = z;
                return res;
            }
        }
    } catch (const DivergenceError&) {
        res.diverged = true;
        res.final_mismatch_inf_norm = std::numeric_limits<double>::infinity();
        res.z_star = z;
        return res;
    } catch (const SingularJacobianError&) {
        res.diverged = true;
        res.final_mismatch_inf_norm = std::numeric_limits<double>::infinity();
        res.z_star = z;
        return res;
    }
    res.z_star = z;
    res.converged = res.final_mismatch_inf_norm < cfg.tolerance;
    return res;
}

namespace {

template <typename Step>
SolveResult iterate_to_tolerance(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& d, double tol,
                                 int max_iterations, Step step) {
    SolveResult res;
    Eigen::VectorXd z = flat_start(grid);
    res.z_entry = z;
    Eigen::VectorXd r = completion_residual(grid, z, x, d);
    res.final_mismatch_inf_norm = inf_norm(r);
    try {
        while (res.final_mismatch_inf_norm >= tol && res.iterations_used < max_iterations) {
            z = step(z, res);
            ++res.iterations_used;
            if (!record(res, grid, z, x, d, 1e3)) break;
        }
    } catch (const Error&) {
        res.diverged = true;
        res.final_mismatch_inf_norm = std::numeric_limits<double>::infinity();
    }
    res.z_star = z;
    res.converged = !res.diverged && res.final_mismatch_inf_norm < tol;
    return res;
}

}  // namespace

SolveResult newton_solve(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& d, double tol,
                         int max_iterations) {
    return iterate_to_tolerance(grid, x, d, tol, max_iterations,
                                [&](const Eigen::VectorXd& z, SolveResult&) { return nr_step(grid, z, x, d); });
}

SolveResult fdpf_solve(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& d, double tol, int max_iterations) {
    return iterate_to_tolerance(grid, x, d, tol, max_iterations, [&](const Eigen::VectorXd& z, SolveResult& res) {
        bool clamped = false;
        Eigen::VectorXd next = fdpf_step(grid, factors, z, x, d, &clamped);
        res.clamp_events += clamped ? 1 : 0;
        return next;
    });
}

Eigen::VectorXd post_complete(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& d) {
    const auto& part = grid.partition;
    const BusState s = expand_state(grid, x, z);
    const Injection inj = power_injections(grid, s.vm, s.va);
    const auto nr = static_cast<Eigen::Index>(part.slack.size());
    Eigen::VectorXd zt(part.n_post());
    for (Eigen::Index k = 0; k < nr; ++k) {
        const int bus = part.slack[static_cast<std::size_t>(k)];
        zt[k] = inj.p[bus] + d[bus];
    }
    for (std::size_t k = 0; k < part.gen_or_slack.size(); ++k) {
        const int bus = part.gen_or_slack[k];
        zt[nr + static_cast<Eigen::Index>(k)] = inj.q[bus] + d[grid.n_bus + bus];
    }
    return zt;
}

std::vector<BranchFlow> branch_flows(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    std::vector<BranchFlow> out;
    out.reserve(grid.branches.size());
    for (const auto& br : grid.branches) {
        const Complex vf = std::polar(vm[br.from], va[br.from]);
        const Complex vt = std::polar(vm[br.to], va[br.to]);
        const Complex i_f = br.yff * vf + br.yft * vt;
        const Complex i_t = br.ytf * vf + br.ytt * vt;
        out.push_back({vf * std::conj(i_f), vt * std::conj(i_t)});
    }
    return out;
}

}  // namespace opflayer
