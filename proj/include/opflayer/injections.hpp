#pragma once

// Bus power injections S = V . conj(Y V) and their first-order derivatives.
// The tangent and cotangent routines work on polar coordinates (|V|, theta)
// and never form a dense Jacobian; the dense blocks are only built where a
// factorization needs them.

#include <Eigen/Core>

#include "opflayer/grid.hpp"

namespace opflayer {

/// Full per-bus polar state.
struct BusState {
    Eigen::VectorXd vm;
    Eigen::VectorXd va;
};

struct Injection {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
};

/// Complex voltages and currents at one operating point, reused by every
/// derivative evaluated there.
struct InjectionPoint {
    Eigen::VectorXcd v;
    Eigen::VectorXcd i;
    Eigen::VectorXd vm;
};

InjectionPoint make_point(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);

Injection power_injections(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);
Injection power_injections(const InjectionPoint& pt);

/// Directional derivative of (P, Q) along (dvm, dva).
Injection injection_jvp(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& dvm,
                        const Eigen::VectorXd& dva);

/// Column-wise directional derivatives: each column of (dvm, dva) is one
/// tangent; the result holds the matching columns of dP and dQ.
struct InjectionTangents {
    Eigen::MatrixXd p;
    Eigen::MatrixXd q;
};

InjectionTangents injection_jvp_columns(const GridModel& grid, const InjectionPoint& pt, const Eigen::MatrixXd& dvm,
                                        const Eigen::MatrixXd& dva);

/// Cotangent of a real functional L with dL = Re(c . dV), c complex per bus,
/// contributed by the weights (wp, wq) on (P, Q). Add branch terms to c
/// before calling polar_gradient.
Eigen::VectorXcd injection_vjp_complex(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& wp,
                                       const Eigen::VectorXd& wq);

/// Converts a complex cotangent c into gradients with respect to |V| and theta.
BusState polar_gradient(const InjectionPoint& pt, const Eigen::VectorXcd& c);

/// Gradient of wp.P + wq.Q with respect to (|V|, theta).
BusState injection_vjp(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& wp,
                       const Eigen::VectorXd& wq);

/// Dense dS/d|V| and dS/dtheta (nb x nb complex).
struct InjectionDerivatives {
    Eigen::MatrixXcd ds_dvm;
    Eigen::MatrixXcd ds_dva;
};

InjectionDerivatives injection_derivatives(const GridModel& grid, const InjectionPoint& pt);

}  // namespace opflayer
