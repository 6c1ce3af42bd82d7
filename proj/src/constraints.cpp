#include "opflayer/constraints.hpp"

#include <algorithm>

#include "opflayer/pf.hpp"

namespace opflayer {

namespace {

double poly(const std::vector<double>& c, double v) {
    double acc = 0.0;
    for (double k : c) acc = acc * v + k;
    return acc;
}

double poly_derivative(const std::vector<double>& c, double v) {
    double acc = 0.0;
    const auto deg = static_cast<int>(c.size()) - 1;
    for (int i = 0; i < deg; ++i) acc = acc * v + c[static_cast<std::size_t>(i)] * (deg - i);
    return acc;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

AssembledState assemble(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                        const Eigen::VectorXd& z_tilde) {
    const auto& part = grid.partition;
    const BusState s = expand_state(grid, x, z);
    AssembledState y{s.vm, s.va, Eigen::VectorXd(grid.n_gens()), Eigen::VectorXd(grid.n_gens())};
    const auto nr = static_cast<Eigen::Index>(part.slack.size());
    for (Eigen::Index k = 0; k < grid.n_gens(); ++k) {
        const int bus = grid.gens[static_cast<std::size_t>(k)].bus;
        const int g = part.pos_gen[static_cast<std::size_t>(bus)];
        if (g >= 0) {
            y.pg[k] = x[g];
        } else {
            const auto it = std::find(part.slack.begin(), part.slack.end(), bus);
            y.pg[k] = z_tilde[it - part.slack.begin()];
        }
        y.qg[k] = z_tilde[nr + part.pos_gen_or_slack[static_cast<std::size_t>(bus)]];
    }
    return y;
}

void disassemble(const GridModel& grid, const AssembledState& y, Eigen::VectorXd& x, Eigen::VectorXd& z,
                 Eigen::VectorXd& z_tilde) {
    const auto& part = grid.partition;
    const Eigen::Index ng = part.n_gen();
    const auto nr = static_cast<Eigen::Index>(part.slack.size());
    x.resize(part.m());
    z_tilde.resize(part.n_post());
    for (Eigen::Index k = 0; k < grid.n_gens(); ++k) {
        const int bus = grid.gens[static_cast<std::size_t>(k)].bus;
        const int g = part.pos_gen[static_cast<std::size_t>(bus)];
        if (g >= 0) {
            x[g] = y.pg[k];
        } else {
            const auto it = std::find(part.slack.begin(), part.slack.end(), bus);
            z_tilde[it - part.slack.begin()] = y.pg[k];
        }
        const int gr = part.pos_gen_or_slack[static_cast<std::size_t>(bus)];
        z_tilde[nr + gr] = y.qg[k];
        x[ng + gr] = y.vm[bus];
    }
    z = completion_vector(grid, BusState{y.vm, y.va});
}

InequalityLayout inequality_layout(const GridModel& grid) {
    InequalityLayout l;
    const Eigen::Index ng = grid.n_gens(), nb = grid.n_bus, nl = grid.n_branches();
    l.pg_lower = 0;
    l.pg_upper = l.pg_lower + ng;
    l.qg_lower = l.pg_upper + ng;
    l.qg_upper = l.qg_lower + ng;
    l.v_lower = l.qg_upper + ng;
    l.v_upper = l.v_lower + nb;
    l.flow_from = l.v_upper + nb;
    l.flow_to = l.flow_from + nl;
    l.angle = l.flow_to + nl;
    for (std::size_t k = 0; k < grid.branches.size(); ++k)
        if (grid.branches[k].angle_limits) l.angle_branches.push_back(static_cast<int>(k));
    l.size = l.angle + 2 * static_cast<Eigen::Index>(l.angle_branches.size());
    return l;
}

Eigen::VectorXd inequality_values(const GridModel& grid, const AssembledState& y) {
    const InequalityLayout l = inequality_layout(grid);
    Eigen::VectorXd g(l.size);
    for (Eigen::Index k = 0; k < grid.n_gens(); ++k) {
        const auto& gen = grid.gens[static_cast<std::size_t>(k)];
        g[l.pg_lower + k] = gen.pmin - y.pg[k];
        g[l.pg_upper + k] = y.pg[k] - gen.pmax;
        g[l.qg_lower + k] = gen.qmin - y.qg[k];
        g[l.qg_upper + k] = y.qg[k] - gen.qmax;
    }
    g.segment(l.v_lower, grid.n_bus) = grid.vmin - y.vm;
    g.segment(l.v_upper, grid.n_bus) = y.vm - grid.vmax;
    const auto flows = branch_flows(grid, y.vm, y.va);
    for (Eigen::Index k = 0; k < grid.n_branches(); ++k) {
        const double cap = grid.branches[static_cast<std::size_t>(k)].rating;
        g[l.flow_from + k] = std::norm(flows[static_cast<std::size_t>(k)].from) - cap * cap;
        g[l.flow_to + k] = std::norm(flows[static_cast<std::size_t>(k)].to) - cap * cap;
    }
    const auto na = static_cast<Eigen::Index>(l.angle_branches.size());
    for (Eigen::Index k = 0; k < na; ++k) {
        const auto& br = grid.branches[static_cast<std::size_t>(l.angle_branches[static_cast<std::size_t>(k)])];
        const double diff = y.va[br.from] - y.va[br.to];
        g[l.angle + k] = br.angle_limits->first - diff;
        g[l.angle + na + k] = diff - br.angle_limits->second;
    }
    return g;
}

Eigen::VectorXd equality_values(const GridModel& grid, const AssembledState& y, const Eigen::VectorXd& d) {
    const Injection s = power_injections(grid, y.vm, y.va);
    Eigen::VectorXd h(2 * grid.n_bus);
    h.head(grid.n_bus) = s.p + d.head(grid.n_bus);
    h.tail(grid.n_bus) = s.q + d.tail(grid.n_bus);
    for (Eigen::Index k = 0; k < grid.n_gens(); ++k) {
        const int bus = grid.gens[static_cast<std::size_t>(k)].bus;
        h[bus] -= y.pg[k];
        h[grid.n_bus + bus] -= y.qg[k];
    }
    return h;
}

double objective_cost(const GridModel& grid, const AssembledState& y) {
    double total = 0.0;
    for (Eigen::Index k = 0; k < grid.n_gens(); ++k)
        total += poly(grid.gens[static_cast<std::size_t>(k)].cost, y.pg[k] * grid.base_mva);
    return total;
}

DualState DualState::zeros(const GridModel& grid) {
    DualState d;
    d.lambda = Eigen::VectorXd::Zero(inequality_layout(grid).size);
    d.nu = Eigen::VectorXd::Zero(2 * grid.n_bus);
    return d;
}

double lagrangian_value(double f, const Eigen::VectorXd& g, const Eigen::VectorXd& h, const DualState& duals) {
    return duals.objective_scale * f + duals.lambda.dot(g.cwiseMax(0.0)) + duals.nu.dot(h.cwiseAbs());
}

LossPartials loss_partials(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                           const Eigen::VectorXd& d, const DualState& duals) {
    const auto& part = grid.partition;
    const Eigen::Index nb = grid.n_bus, ng = grid.n_gens();
    const BusState s = expand_state(grid, x, z);
    const InjectionPoint pt = make_point(grid, s.vm, s.va);

    const AssembledState y = assemble(grid, x, z, post_complete(grid, x, z, d));
    LossPartials out;
    out.g = inequality_values(grid, y);
    out.h = equality_values(grid, y, d);
    out.objective = objective_cost(grid, y);
    out.value = lagrangian_value(out.objective, out.g, out.h, duals);

    Eigen::VectorXd pg_bar = Eigen::VectorXd::Zero(ng), qg_bar = Eigen::VectorXd::Zero(ng);
    Eigen::VectorXd vm_bar = Eigen::VectorXd::Zero(nb), va_bar = Eigen::VectorXd::Zero(nb);
    Eigen::VectorXd wp = Eigen::VectorXd::Zero(nb), wq = Eigen::VectorXd::Zero(nb);
    Eigen::VectorXcd c = Eigen::VectorXcd::Zero(nb);

    for (Eigen::Index k = 0; k < ng; ++k)
        pg_bar[k] += duals.objective_scale * grid.base_mva * poly_derivative(grid.gens[static_cast<std::size_t>(k)].cost, y.pg[k] * grid.base_mva);

    // inequality penalties, active rows only
    const InequalityLayout l = inequality_layout(grid);
    auto mult = [&](Eigen::Index row) { return out.g[row] > 0.0 ? duals.lambda[row] : 0.0; };
    for (Eigen::Index k = 0; k < ng; ++k) {
        pg_bar[k] += mult(l.pg_upper + k) - mult(l.pg_lower + k);
        qg_bar[k] += mult(l.qg_upper + k) - mult(l.qg_lower + k);
    }
    for (Eigen::Index i = 0; i < nb; ++i) vm_bar[i] += mult(l.v_upper + i) - mult(l.v_lower + i);
    for (Eigen::Index k = 0; k < grid.n_branches(); ++k) {
        const double mf = mult(l.flow_from + k), mt = mult(l.flow_to + k);
        if (mf == 0.0 && mt == 0.0) continue;
        const auto& br = grid.branches[static_cast<std::size_t>(k)];
        const Complex vf = pt.v[br.from], vt = pt.v[br.to];
        const Complex i_f = br.yff * vf + br.yft * vt, i_t = br.ytf * vf + br.ytt * vt;
        // d|S|^2 = Re(conj(2 S) dS)
        if (mf != 0.0) {
            const Complex w = 2.0 * mf * vf * std::conj(i_f);
            c[br.from] += std::conj(w * i_f) + w * std::conj(vf) * br.yff;
            c[br.to] += w * std::conj(vf) * br.yft;
        }
        if (mt != 0.0) {
            const Complex w = 2.0 * mt * vt * std::conj(i_t);
            c[br.to] += std::conj(w * i_t) + w * std::conj(vt) * br.ytt;
            c[br.from] += w * std::conj(vt) * br.ytf;
        }
    }
    const auto na = static_cast<Eigen::Index>(l.angle_branches.size());
    for (Eigen::Index k = 0; k < na; ++k) {
        const auto& br = grid.branches[static_cast<std::size_t>(l.angle_branches[static_cast<std::size_t>(k)])];
        const double m = mult(l.angle + na + k) - mult(l.angle + k);
        va_bar[br.from] += m;
        va_bar[br.to] -= m;
    }

    // equality penalties
    for (Eigen::Index i = 0; i < nb; ++i) {
        wp[i] += duals.nu[i] * sign(out.h[i]);
        wq[i] += duals.nu[nb + i] * sign(out.h[nb + i]);
    }
    for (Eigen::Index k = 0; k < ng; ++k) {
        const int bus = grid.gens[static_cast<std::size_t>(k)].bus;
        pg_bar[k] -= wp[bus];
        qg_bar[k] -= wq[bus];
    }

    // post-completion: P^g at R and Q^g at G u R are injections plus demand
    Eigen::VectorXd xp = Eigen::VectorXd::Zero(part.m());
    for (Eigen::Index k = 0; k < ng; ++k) {
        const int bus = grid.gens[static_cast<std::size_t>(k)].bus;
        const int g = part.pos_gen[static_cast<std::size_t>(bus)];
        if (g >= 0)
            xp[g] = pg_bar[k];
        else
            wp[bus] += pg_bar[k];
        wq[bus] += qg_bar[k];
    }

    c += injection_vjp_complex(grid, pt, wp, wq);
    const BusState gb = polar_gradient(pt, c);
    vm_bar += gb.vm;
    va_bar += gb.va;

    xp.tail(part.m() - part.n_gen()) = vm_bar(part.gen_or_slack);
    out.x_partial = std::move(xp);
    out.z_total = completion_vector(grid, BusState{vm_bar, va_bar});
    return out;
}

}  // namespace opflayer
