#include "opflayer/grid.hpp"

#include <cmath>
#include <numbers>
#include <unordered_map>

namespace opflayer {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
// Unrated branches keep a flow row with a limit that is never reached.
// 1e4 MVA on a 100 MVA base; kept in per-unit so the model is base invariant.
constexpr double kUnratedPu = 100.0;

struct BranchModel {
    Complex yff, yft, ytf, ytt;
};

BranchModel pi_model(Complex ys, double b, double tap, double shift) {
    const Complex tc = std::polar(tap, shift);
    const Complex ytt = ys + Complex(0.0, b / 2.0);
    return {ytt / (tap * tap), -ys / std::conj(tc), -ys / tc, ytt};
}

void stamp(Eigen::MatrixXcd& y, int f, int t, const BranchModel& m) {
    y(f, f) += m.yff;
    y(f, t) += m.yft;
    y(t, f) += m.ytf;
    y(t, t) += m.ytt;
}

Eigen::MatrixXd reduce(const Eigen::MatrixXd& full, const std::vector<int>& idx) {
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd out(k, k);
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j) out(i, j) = full(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    return out;
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::uint64_t Partition::fingerprint() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto* list : {&slack, &gen, &load}) {
        h = fnv1a(h, list->size());
        for (int b : *list) h = fnv1a(h, static_cast<std::uint64_t>(b));
    }
    return h;
}

GridModel build_grid(const RawCase& rc) {
    GridModel g;
    g.base_mva = rc.base_mva;
    g.n_bus = static_cast<Eigen::Index>(rc.buses.size());
    const auto nb = static_cast<std::size_t>(g.n_bus);

    std::unordered_map<int, int> index_of;
    for (std::size_t i = 0; i < nb; ++i) {
        index_of[rc.buses[i].id] = static_cast<int>(i);
        g.bus_ids.push_back(rc.buses[i].id);
    }

    // generators
    g.gen_at_bus.assign(nb, -1);
    std::vector<int> raw_gen_at_bus(nb, -1);
    for (std::size_t k = 0; k < rc.gens.size(); ++k) {
        const auto& gr = rc.gens[k];
        if (!gr.in_service) continue;
        const int b = index_of.at(gr.bus);
        if (raw_gen_at_bus[static_cast<std::size_t>(b)] >= 0)
            throw TopologyError("more than one in-service generator at bus " + std::to_string(gr.bus));
        raw_gen_at_bus[static_cast<std::size_t>(b)] = static_cast<int>(k);
    }

    auto& part = g.partition;
    for (std::size_t i = 0; i < nb; ++i) {
        const auto& bus = rc.buses[i];
        const bool has_gen = raw_gen_at_bus[i] >= 0;
        const int bi = static_cast<int>(i);
        if (bus.type == 3) {
            if (!has_gen) throw TopologyError("reference bus " + std::to_string(bus.id) + " has no in-service generator");
            part.slack.push_back(bi);
        } else if (bus.type == 2 && has_gen) {
            part.gen.push_back(bi);
        } else {
            if (has_gen)
                throw TopologyError("in-service generator at non-PV bus " + std::to_string(bus.id) + " is unsupported");
            part.load.push_back(bi);
        }
    }
    part.pos_gen.assign(nb, -1);
    part.pos_load.assign(nb, -1);
    part.pos_non_slack.assign(nb, -1);
    part.pos_gen_or_slack.assign(nb, -1);
    for (std::size_t i = 0; i < nb; ++i) {
        const int bi = static_cast<int>(i);
        if (rc.buses[i].type != 3) {
            part.pos_non_slack[i] = static_cast<int>(part.non_slack.size());
            part.non_slack.push_back(bi);
        }
        if (raw_gen_at_bus[i] >= 0) {
            part.pos_gen_or_slack[i] = static_cast<int>(part.gen_or_slack.size());
            part.gen_or_slack.push_back(bi);
        }
    }
    for (std::size_t k = 0; k < part.gen.size(); ++k) part.pos_gen[static_cast<std::size_t>(part.gen[k])] = static_cast<int>(k);
    for (std::size_t k = 0; k < part.load.size(); ++k) part.pos_load[static_cast<std::size_t>(part.load[k])] = static_cast<int>(k);

    for (std::size_t i = 0; i < nb; ++i) {
        const int k = raw_gen_at_bus[i];
        if (k < 0) continue;
        const auto& gr = rc.gens[static_cast<std::size_t>(k)];
        const auto& cost = rc.gencosts[static_cast<std::size_t>(k)];
        if (cost.model != 2)
            throw StructuralError("generator at bus " + std::to_string(gr.bus) +
                                  " uses cost model " + std::to_string(cost.model) + "; only polynomial (model 2) is supported");
        Generator gen;
        gen.bus = static_cast<int>(i);
        gen.pmin = gr.pmin / rc.base_mva;
        gen.pmax = gr.pmax / rc.base_mva;
        gen.qmin = gr.qmin / rc.base_mva;
        gen.qmax = gr.qmax / rc.base_mva;
        if (gen.qmin > gen.qmax) throw StructuralError("generator at bus " + std::to_string(gr.bus) + " has Qmin > Qmax");
        gen.pg0 = gr.pg / rc.base_mva;
        gen.vg = gr.vg;
        gen.cost = cost.coeffs;
        g.gen_at_bus[i] = static_cast<int>(g.gens.size());
        g.gens.push_back(std::move(gen));
    }

    // buses
    g.vmin.resize(g.n_bus);
    g.vmax.resize(g.n_bus);
    g.shunt_g.resize(g.n_bus);
    g.shunt_b.resize(g.n_bus);
    for (std::size_t i = 0; i < nb; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        g.vmin[ii] = rc.buses[i].vmin;
        g.vmax[ii] = rc.buses[i].vmax;
        g.shunt_g[ii] = rc.buses[i].gs / rc.base_mva;
        g.shunt_b[ii] = rc.buses[i].bs / rc.base_mva;
    }
    g.slack_angle = rc.buses[static_cast<std::size_t>(part.slack.front())].va_deg * kDeg;
    g.nominal_load = nominal_load(rc);

    // branches and admittance matrix
    g.ybus = Eigen::MatrixXcd::Zero(g.n_bus, g.n_bus);
    for (const auto& br : rc.branches) {
        if (!br.in_service) continue;
        Branch b;
        b.from = index_of.at(br.from);
        b.to = index_of.at(br.to);
        b.ys = 1.0 / Complex(br.r, br.x);
        b.b_charging = br.b;
        b.tap = br.tap == 0.0 ? 1.0 : br.tap;
        b.shift = br.shift_deg * kDeg;
        b.rating = br.rate_a > 0.0 ? br.rate_a / rc.base_mva : kUnratedPu;
        const bool unconstrained_angle =
            (br.angmin_deg <= -360.0 && br.angmax_deg >= 360.0) || (br.angmin_deg == 0.0 && br.angmax_deg == 0.0);
        if (!unconstrained_angle) b.angle_limits = std::make_pair(br.angmin_deg * kDeg, br.angmax_deg * kDeg);
        const auto m = pi_model(b.ys, b.b_charging, b.tap, b.shift);
        b.yff = m.yff;
        b.yft = m.yft;
        b.ytf = m.ytf;
        b.ytt = m.ytt;
        stamp(g.ybus, b.from, b.to, m);
        g.branches.push_back(b);
    }
    for (Eigen::Index i = 0; i < g.n_bus; ++i) g.ybus(i, i) += Complex(g.shunt_g[i], g.shunt_b[i]);

    for (Eigen::Index i = 0; i < g.n_bus; ++i) {
        if (g.ybus.row(i).cwiseAbs().maxCoeff() == 0.0)
            throw TopologyError("bus " + std::to_string(g.bus_ids[static_cast<std::size_t>(i)]) + " is isolated");
    }
    return g;
}

Eigen::VectorXd nominal_prediction(const GridModel& grid) {
    const auto& part = grid.partition;
    Eigen::VectorXd x(part.m());
    for (Eigen::Index k = 0; k < part.n_gen(); ++k) {
        const int bus = part.gen[static_cast<std::size_t>(k)];
        x[k] = grid.gens[static_cast<std::size_t>(grid.gen_at_bus[static_cast<std::size_t>(bus)])].pg0;
    }
    for (std::size_t k = 0; k < part.gen_or_slack.size(); ++k) {
        const int bus = part.gen_or_slack[k];
        x[part.n_gen() + static_cast<Eigen::Index>(k)] =
            grid.gens[static_cast<std::size_t>(grid.gen_at_bus[static_cast<std::size_t>(bus)])].vg;
    }
    return x;
}

FdpfFactors::FdpfFactors(Eigen::MatrixXd b_prime, Eigen::MatrixXd b_double_prime)
    : b_prime_(std::move(b_prime)), b_double_prime_(std::move(b_double_prime)) {
    if (b_prime_.size() > 0) {
        lu_prime_.compute(b_prime_);
        if (!(lu_prime_.rcond() > 1e-14)) throw FactorizationError("B' is singular");
    }
    if (b_double_prime_.size() > 0) {
        lu_double_prime_.compute(b_double_prime_);
        if (!(lu_double_prime_.rcond() > 1e-14)) throw FactorizationError("B'' is singular");
    }
}

FdpfFactors build_fdpf_matrices(const GridModel& grid) {
    const auto nb = grid.n_bus;
    // B': series reactance only, unit taps, no charging or shunts; phase shifts kept.
    Eigen::MatrixXcd yp = Eigen::MatrixXcd::Zero(nb, nb);
    // B'': full branch model without phase shifters, bus shunts included.
    Eigen::MatrixXcd ypp = Eigen::MatrixXcd::Zero(nb, nb);
    for (const auto& br : grid.branches) {
        const double x = (1.0 / br.ys).imag();
        stamp(yp, br.from, br.to, pi_model(Complex(0.0, -1.0 / x), 0.0, 1.0, br.shift));
        stamp(ypp, br.from, br.to, pi_model(br.ys, br.b_charging, br.tap, 0.0));
    }
    for (Eigen::Index i = 0; i < nb; ++i) ypp(i, i) += Complex(grid.shunt_g[i], grid.shunt_b[i]);

    const Eigen::MatrixXd bp = -yp.imag();
    const Eigen::MatrixXd bpp = -ypp.imag();
    return FdpfFactors(reduce(bp, grid.partition.non_slack), reduce(bpp, grid.partition.load));
}

}  // namespace opflayer
