#pragma once

// Power-flow completion: residuals, Jacobians, FDPF and Newton steps, the
// two-phase forward solver, post-completion and branch flows.

#include <vector>

#include <Eigen/Core>

#include "opflayer/grid.hpp"
#include "opflayer/injections.hpp"

namespace opflayer {

/// Per-bus (|V|, theta) from the prediction x and the completion z.
BusState expand_state(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z);

/// Inverse of expand_state restricted to the z entries.
Eigen::VectorXd completion_vector(const GridModel& grid, const BusState& state);

/// Per-bus tangent (d|V|, dtheta) for a tangent pair (dx, dz); the slack angle
/// is fixed so its tangent is zero.
BusState expand_tangent(const GridModel& grid, const Eigen::VectorXd& dx, const Eigen::VectorXd& dz);

/// Flat start: V = 1 at D, theta = slack angle at G u D.
Eigen::VectorXd flat_start(const GridModel& grid);

/// Rows: P balance at G u D, then Q balance at D.
Eigen::VectorXd completion_residual(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                                    const Eigen::VectorXd& d);

Eigen::MatrixXd pf_jacobian_z(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x);
Eigen::MatrixXd pf_jacobian_x(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x);

/// Lower and upper clamp on V at load buses inside the iterations.
inline constexpr double kVoltageFloor = 0.1;
inline constexpr double kVoltageCeiling = 2.5;

/// One successive FDPF iteration (angle half-step, then voltage half-step on
/// the refreshed angles). Throws DivergenceError on non-finite mismatch.
/// When clamped is non-null it is set to true if a voltage hit the guard.
Eigen::VectorXd fdpf_step(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                          const Eigen::VectorXd& x, const Eigen::VectorXd& d, bool* clamped = nullptr);

/// Intermediates of one FDPF iteration, reused by its derivatives.
struct FdpfStepDetail {
    InjectionPoint before;       // at (z, x)
    InjectionPoint after_angle;  // after the angle half-step
    Eigen::VectorXd a;           // P residual / |V| over G u D
    Eigen::VectorXd b;           // Q residual / |V| over D
    std::vector<bool> clamped;   // per load bus
    Eigen::VectorXd z_next;
};

FdpfStepDetail fdpf_step_detail(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& x, const Eigen::VectorXd& d);

/// Full Newton update. Throws SingularJacobianError.
Eigen::VectorXd nr_step(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& d);

enum class RefinementKind { SingleNR, KStepFDPF };

struct SolverConfig {
    int guide_iterations = 8;
    RefinementKind refinement = RefinementKind::KStepFDPF;
    int refinement_iterations = 4;
    double tolerance = 1e-5;
    double divergence_cap = 1e3;

    /// Throws std::invalid_argument when a field is out of range.
    void validate() const;
};

struct SolveResult {
    Eigen::VectorXd z_star;
    int iterations_used = 0;
    double final_mismatch_inf_norm = 0.0;
    bool converged = false;
    bool diverged = false;
    std::vector<double> trace;  // mismatch inf-norm after each iteration
    int clamp_events = 0;
    // Detached guide-phase output and the inputs of every recorded
    // refinement step; guide steps leave nothing behind.
    Eigen::VectorXd z_entry;
    std::vector<Eigen::VectorXd> refinement_inputs;
};

SolveResult hybrid_solve(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& d, const SolverConfig& cfg);

/// Plain iterative solvers run to a tolerance from flat start.
SolveResult newton_solve(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& d, double tol,
                         int max_iterations);
SolveResult fdpf_solve(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& d, double tol, int max_iterations);

/// z~ = [P^g at R | Q^g at G u R] from the balance equations.
Eigen::VectorXd post_complete(const GridModel& grid, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& d);

struct BranchFlow {
    Complex from;  // S at the from end, p.u.
    Complex to;
};

std::vector<BranchFlow> branch_flows(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);

}  // namespace opflayer
