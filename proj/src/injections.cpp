#include "opflayer/injections.hpp"

namespace opflayer {

InjectionPoint make_point(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    InjectionPoint pt;
    pt.vm = vm;
    pt.v.resize(vm.size());
    for (Eigen::Index k = 0; k < vm.size(); ++k) pt.v[k] = std::polar(vm[k], va[k]);
    pt.i = grid.ybus * pt.v;
    return pt;
}

Injection power_injections(const InjectionPoint& pt) {
    const Eigen::VectorXcd s = pt.v.cwiseProduct(pt.i.conjugate());
    return {s.real(), s.imag()};
}

Injection power_injections(const GridModel& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    return power_injections(make_point(grid, vm, va));
}

Injection injection_jvp(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& dvm,
                        const Eigen::VectorXd& dva) {
    // dV = e^{j theta} d|V| + j V dtheta
    Eigen::VectorXcd dv(pt.v.size());
    for (Eigen::Index k = 0; k < dv.size(); ++k) {
        const Complex unit = pt.v[k] / pt.vm[k];
        dv[k] = unit * dvm[k] + Complex(0.0, 1.0) * pt.v[k] * dva[k];
    }
    const Eigen::VectorXcd di = grid.ybus * dv;
    const Eigen::VectorXcd ds = dv.cwiseProduct(pt.i.conjugate()) + pt.v.cwiseProduct(di.conjugate());
    return {ds.real(), ds.imag()};
}

InjectionTangents injection_jvp_columns(const GridModel& grid, const InjectionPoint& pt, const Eigen::MatrixXd& dvm,
                                const Eigen::MatrixXd& dva) {
    const Eigen::Index nb = pt.v.size();
    Eigen::VectorXcd unit(nb), jv(nb);
    for (Eigen::Index k = 0; k < nb; ++k) {
        unit[k] = pt.v[k] / pt.vm[k];
        jv[k] = Complex(0.0, 1.0) * pt.v[k];
    }
    const Eigen::MatrixXcd dv = unit.asDiagonal() * dvm.cast<Complex>() + jv.asDiagonal() * dva.cast<Complex>();
    const Eigen::MatrixXcd di = grid.ybus * dv;
    const Eigen::MatrixXcd ds = pt.i.conjugate().asDiagonal() * dv + pt.v.asDiagonal() * di.conjugate();
    return {ds.real(), ds.imag()};
}

Eigen::VectorXcd injection_vjp_complex(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& wp,
                                       const Eigen::VectorXd& wq) {
    // L = Re(conj(w) . S) with w = wp + j wq and S = V . conj(I)
    Eigen::VectorXcd w(wp.size());
    for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = Complex(wp[k], wq[k]);
    const Eigen::VectorXcd wv = w.cwiseProduct(pt.v.conjugate());
    return w.cwiseProduct(pt.i).conjugate() + grid.ybus.transpose() * wv;
}

BusState polar_gradient(const InjectionPoint& pt, const Eigen::VectorXcd& c) {
    BusState g;
    g.vm.resize(c.size());
    g.va.resize(c.size());
    for (Eigen::Index k = 0; k < c.size(); ++k) {
        const Complex cv = c[k] * pt.v[k];
        g.vm[k] = cv.real() / pt.vm[k];
        g.va[k] = -cv.imag();
    }
    return g;
}

BusState injection_vjp(const GridModel& grid, const InjectionPoint& pt, const Eigen::VectorXd& wp,
                       const Eigen::VectorXd& wq) {
    return polar_gradient(pt, injection_vjp_complex(grid, pt, wp, wq));
}

InjectionDerivatives injection_derivatives(const GridModel& grid, const InjectionPoint& pt) {
    const Eigen::Index nb = pt.v.size();
    Eigen::VectorXcd vnorm(nb);
    for (Eigen::Index k = 0; k < nb; ++k) vnorm[k] = pt.v[k] / pt.vm[k];

    InjectionDerivatives d;
    // dS/d|V| = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    d.ds_dvm = pt.v.asDiagonal() * (grid.ybus * vnorm.asDiagonal()).conjugate();
    d.ds_dvm.diagonal() += pt.i.conjugate().cwiseProduct(vnorm);
    // dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
    Eigen::MatrixXcd t = -(grid.ybus * pt.v.asDiagonal());
    t.diagonal() += pt.i;
    d.ds_dva = Complex(0.0, 1.0) * (pt.v.asDiagonal() * t.conjugate());
    return d;
}

}  // namespace opflayer
