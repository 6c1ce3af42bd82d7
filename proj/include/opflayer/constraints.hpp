#pragma once

// The assembled AC-OPF point y = (V, theta, P^g, Q^g), its constraint vectors,
// the generation cost and the Lagrangian with its partial derivatives.

#include <Eigen/Core>

#include "opflayer/grid.hpp"
#include "opflayer/injections.hpp"

namespace opflayer {

/// y in per-unit. pg and qg follow GridModel::gens (ascending bus order).
struct AssembledState {
    Eigen::VectorXd vm, va;
    Eigen::VectorXd pg, qg;
};

AssembledState assemble(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                        const Eigen::VectorXd& z_tilde);

/// Splits y back into (x, z, z~).
void disassemble(const GridModel& grid, const AssembledState& y, Eigen::VectorXd& x, Eigen::VectorXd& z,
                 Eigen::VectorXd& z_tilde);

/// Row layout of the inequality vector.
struct InequalityLayout {
    Eigen::Index pg_lower = 0, pg_upper = 0, qg_lower = 0, qg_upper = 0;
    Eigen::Index v_lower = 0, v_upper = 0, flow_from = 0, flow_to = 0, angle = 0;
    Eigen::Index size = 0;
    std::vector<int> angle_branches;
};

InequalityLayout inequality_layout(const GridModel& grid);

/// Signed slacks, positive when violated: P^g, Q^g and V boxes, squared
/// apparent flow minus squared rating at both ends, then finite angle limits.
Eigen::VectorXd inequality_values(const GridModel& grid, const AssembledState& y);

/// All-bus balance residuals: P rows then Q rows.
Eigen::VectorXd equality_values(const GridModel& grid, const AssembledState& y, const Eigen::VectorXd& d);

/// Total cost with the polynomial evaluated in MW.
double objective_cost(const GridModel& grid, const AssembledState& y);

struct DualState {
    Eigen::VectorXd lambda;  // one per inequality row
    Eigen::VectorXd nu;      // one per equality row
    double eta_lambda = 0.0;
    double eta_nu = 0.0;
    double eta_phi = 0.0;
    // Weight on the cost term of the Lagrangian.
    double objective_scale = 1.0;

    static DualState zeros(const GridModel& grid);
};

/// s f + lambda . max(g, 0) + nu . |h| with s = duals.objective_scale
double lagrangian_value(double f, const Eigen::VectorXd& g, const Eigen::VectorXd& h, const DualState& duals);

/// Loss partials at a completed point. x_partial holds the derivative with z
/// fixed (z~ follows through post-completion); z_total holds the derivative
/// with respect to z including the post-completion path.
struct LossPartials {
    double value = 0.0;
    double objective = 0.0;
    Eigen::VectorXd g, h;
    Eigen::VectorXd x_partial;
    Eigen::VectorXd z_total;
};

LossPartials loss_partials(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                           const Eigen::VectorXd& d, const DualState& duals);

}  // namespace opflayer
