#pragma once

// Sensitivities of the completion map z*(x): exact implicit Jacobians, the
// K-step approximation through the recorded refinement steps, and the
// matching reverse-mode products.

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "opflayer/grid.hpp"
#include "opflayer/pf.hpp"

namespace opflayer {

/// Tangent of one FDPF step: columns of (dz, dx) map to columns of dz'.
Eigen::MatrixXd fdpf_step_jvp(const GridModel& grid, const FdpfFactors& factors, const FdpfStepDetail& det,
                              const Eigen::MatrixXd& dz, const Eigen::MatrixXd& dx);

struct StepCotangent {
    Eigen::VectorXd z;
    Eigen::VectorXd x;
};

/// Cotangent of one FDPF step.
StepCotangent fdpf_step_vjp(const GridModel& grid, const FdpfFactors& factors, const FdpfStepDetail& det,
                            const Eigen::VectorXd& z_next_bar);

/// Newton step with its Jacobian frozen at the input iterate. Its z-tangent
/// vanishes identically, so only the x-path survives.
Eigen::MatrixXd nr_step_jvp(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                            const Eigen::MatrixXd& dx);
StepCotangent nr_step_vjp(const GridModel& grid, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& z_next_bar);

/// dz*/dx = -J_z^{-1} J_x at a converged state.
Eigen::MatrixXd exact_implicit_jacobian_h(const GridModel& grid, const Eigen::VectorXd& z_star,
                                          const Eigen::VectorXd& x, const Eigen::VectorXd& d);

/// dz*/dx = (I - dT/dz)^{-1} dT/dx with T the FDPF operator.
Eigen::MatrixXd exact_implicit_jacobian_T(const GridModel& grid, const FdpfFactors& factors,
                                          const Eigen::VectorXd& z_star, const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& d);

/// Dense partials of one FDPF step at z.
struct StepJacobians {
    Eigen::MatrixXd tz;  // n x n
    Eigen::MatrixXd tx;  // n x m
};
StepJacobians fdpf_step_jacobians(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                  const Eigen::VectorXd& x, const Eigen::VectorXd& d);

/// Forward values of the refinement steps started from the detached z_entry;
/// element k is the input of step k.
std::vector<Eigen::VectorXd> replay_refinement(const GridModel& grid, const FdpfFactors& factors,
                                               const Eigen::VectorXd& z_entry, const Eigen::VectorXd& x,
                                               const Eigen::VectorXd& d, int k_r, RefinementKind kind);

/// d T^{K_R}(z_entry, x) / dx with z_entry held constant.
Eigen::MatrixXd kstep_jacobian(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z_entry,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r, RefinementKind kind);

/// d T^{K}(z, x) / dz for FDPF steps; the contraction of the composite map.
Eigen::MatrixXd composite_z_jacobian(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z,
                                     const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k);

/// cotangent^T kstep_jacobian using the recorded step inputs.
Eigen::VectorXd refinement_vjp(const GridModel& grid, const FdpfFactors& factors,
                               const std::vector<Eigen::VectorXd>& step_inputs, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& d, RefinementKind kind, const Eigen::VectorXd& cotangent);

/// Same, replaying the refinement from z_entry first.
Eigen::VectorXd refinement_vjp(const GridModel& grid, const FdpfFactors& factors, const Eigen::VectorXd& z_entry,
                               const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r, RefinementKind kind,
                               const Eigen::VectorXd& cotangent);

/// cotangent^T dz*/dx through the implicit-function route (shared factorization).
Eigen::VectorXd exact_vjp(const GridModel& grid, const Eigen::VectorXd& z_star, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& cotangent);

using VectorMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Central differences, one column per input coordinate.
Eigen::MatrixXd finite_diff_jacobian(const VectorMap& f, const Eigen::VectorXd& at, double step);

/// Cosine of the angle between two flattened arrays; 0 if either is zero.
double cosine_similarity(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b);
/// ||approx - exact|| / ||exact|| in the Frobenius norm.
double relative_error(const Eigen::Ref<const Eigen::MatrixXd>& approx, const Eigen::Ref<const Eigen::MatrixXd>& exact);

/// Dense SVD below kDenseNormRows rows, power iteration above.
inline constexpr Eigen::Index kDenseNormRows = 600;
double spectral_norm(const Eigen::MatrixXd& a);

struct SensitivityReport {
    Eigen::MatrixXd exact_via_h;
    Eigen::MatrixXd exact_via_T;
    Eigen::MatrixXd kstep;
    double cosine_to_exact = 0.0;
    double relative_error = 0.0;
};

SensitivityReport sensitivity_report(const GridModel& grid, const FdpfFactors& factors, const SolveResult& solve,
                                     const Eigen::VectorXd& x, const Eigen::VectorXd& d, int k_r,
                                     RefinementKind kind);

}  // namespace opflayer
