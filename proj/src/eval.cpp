#include "opflayer/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "opflayer/diffgrad.hpp"
#include "opflayer/parallel.hpp"

namespace opflayer {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kVanishingGradient = 1e-12;

}  // namespace

void MetricsAccumulator::add(const Eigen::VectorXd& g, const Eigen::VectorXd& h, double objective,
                             std::optional<double> reference_cost) {
    const Eigen::ArrayXd eq = h.array().abs();
    const Eigen::ArrayXd ineq = g.array().max(0.0);
    eq_sum_ += eq.sum();
    eq_rows_ += static_cast<std::size_t>(eq.size());
    if (eq.size() > 0) eq_max_ = std::max(eq_max_, eq.maxCoeff());
    eq_viol_ += static_cast<double>((eq > kViolationTolerance).count());
    ineq_sum_ += ineq.sum();
    ineq_rows_ += static_cast<std::size_t>(ineq.size());
    if (ineq.size() > 0) ineq_max_ = std::max(ineq_max_, ineq.maxCoeff());
    ineq_viol_ += static_cast<double>((ineq > kViolationTolerance).count());
    cost_sum_ += objective;
    if (reference_cost) {
        gap_sum_ += (objective - *reference_cost) / *reference_cost;
        ++gap_samples_;
    }
    ++samples_;
}

MetricsRecord MetricsAccumulator::finish(int epoch) const {
    MetricsRecord r;
    r.epoch = epoch;
    if (samples_ == 0) {
        r.eq_mean_mismatch = r.eq_max_mismatch = r.ineq_mean_mismatch = r.ineq_max_mismatch = kNaN;
        r.objective_cost = r.objective_gap_pct = kNaN;
        return r;
    }
    const auto n = static_cast<double>(samples_);
    r.eq_mean_mismatch = eq_rows_ ? eq_sum_ / static_cast<double>(eq_rows_) : 0.0;
    r.eq_max_mismatch = eq_max_;
    r.eq_viol_num = eq_viol_ / n;
    r.ineq_mean_mismatch = ineq_rows_ ? ineq_sum_ / static_cast<double>(ineq_rows_) : 0.0;
    r.ineq_max_mismatch = ineq_max_;
    r.ineq_viol_num = ineq_viol_ / n;
    r.objective_cost = cost_sum_ / n;
    r.objective_gap_pct = gap_samples_ == samples_ ? 100.0 * gap_sum_ / n : kNaN;
    return r;
}

EvalResult evaluate(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                    const LoadDataset& ds, const std::vector<std::size_t>& indices, const ReferenceSet* refs,
                    const SolverConfig& cfg, int workers) {
    for (auto i : indices)
        if (i >= ds.size()) throw StructuralError("sample index " + std::to_string(i) + " is outside the dataset");
    if (refs) {
        std::ostringstream missing;
        std::size_t n_missing = 0;
        for (auto i : indices)
            if (!refs->contains(i)) missing << (n_missing++ ? ", " : "") << i;
        if (n_missing)
            throw StructuralError("no reference cost for " + std::to_string(n_missing) +
                                  " sample(s): " + missing.str());
    }

    struct Slot {
        bool usable = false;
        double objective = 0.0;
        Eigen::VectorXd g, h;
    };
    std::vector<Slot> slots(indices.size());
    parallel_for(indices.size(), workers, [&](std::size_t k) {
        const ForwardRecord rec = forward_full(params, grid, factors, ds.samples[indices[k]], cfg);
        if (rec.solve.diverged || !rec.g.allFinite() || !rec.h.allFinite()) return;
        slots[k] = {true, rec.objective, rec.g, rec.h};
    });

    EvalResult out;
    MetricsAccumulator acc;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& s = slots[k];
        if (!s.usable) {
            out.failed.push_back(indices[k]);
            continue;
        }
        std::optional<double> ref;
        if (refs) ref = refs->cost(indices[k]);
        acc.add(s.g, s.h, s.objective, ref);
        out.costs.push_back(s.objective);
    }
    out.evaluated = acc.samples();
    out.metrics = acc.finish();
    if (!refs) out.metrics.objective_gap_pct = kNaN;
    return out;
}

double composite_spectral_norm(const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& step_jacobian,
                               const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& step,
                               const std::vector<Eigen::VectorXd>& states, int k) {
    if (k < 1) throw std::invalid_argument("composite power must be >= 1");
    double worst = 0.0;
    for (const auto& z0 : states) {
        Eigen::VectorXd z = z0;
        Eigen::MatrixXd j = Eigen::MatrixXd::Identity(z.size(), z.size());
        for (int i = 0; i < k; ++i) {
            j = step_jacobian(z) * j;
            if (i + 1 < k) z = step(z);
        }
        worst = std::max(worst, spectral_norm(j));
    }
    return worst;
}

double estimate_contraction(const GridModel& grid, const FdpfFactors& factors,
                            const std::vector<Eigen::VectorXd>& states, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& d, int k_r) {
    return composite_spectral_norm(
        [&](const Eigen::VectorXd& z) { return fdpf_step_jacobians(grid, factors, z, x, d).tz; },
        [&](const Eigen::VectorXd& z) { return fdpf_step(grid, factors, z, x, d); }, states, k_r);
}

MeanStd mean_std(const std::vector<double>& v) {
    if (v.empty()) return {kNaN, kNaN};
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double e : v) var += (e - mean) * (e - mean);
    return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
}

double alignment_eps(double sigma_A, double C_g, double rho, double L_T, double C_z, double d_0, double C_1,
                     double k_iter) {
    if (!(C_g >= kVanishingGradient) || !(rho < 1.0)) return kInf;
    const double eps = (sigma_A / C_g) * (rho * L_T * C_z / (1.0 - rho) + std::pow(rho, k_iter) * d_0 * C_1);
    return std::isfinite(eps) ? eps : kInf;
}

double alignment_bound(double eps) { return eps < 1.0 ? (1.0 - eps) / (1.0 + eps) : kNaN; }

double TheoremConstants::c1_identity() const {
    return rho.mean * (L_x.mean + L_z.mean * sigma_J.mean) + C_z.mean * L_J.mean;
}

double TheoremConstants::eps_at(double k_iter) const {
    return alignment_eps(sigma_A.mean, C_g.mean, rho.mean, L_T.mean, C_z.mean, d_0.mean, C_1, k_iter);
}

std::vector<Eigen::VectorXd> stencil_directions(Eigen::Index n, const StencilConfig& stencil, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    std::vector<Eigen::VectorXd> dirs;
    for (int k = 0; k < stencil.directions; ++k) {
        Eigen::VectorXd u(n);
        for (auto& e : u) e = normal(rng);
        dirs.push_back(u.normalized());
    }
    return dirs;
}

double difference_quotient(const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& at,
                           const std::vector<Eigen::VectorXd>& directions, double radius) {
    const Eigen::MatrixXd base = f(at);
    double q = 0.0;
    for (const auto& u : directions) {
        const Eigen::MatrixXd diff = f(at + radius * u) - base;
        q = std::max(q, (diff.cols() == 1 ? diff.norm() : spectral_norm(diff)) / radius);
    }
    return q;
}

GradientPair gradient_pair(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                           const Eigen::VectorXd& d, const DualState& duals, const SolverConfig& cfg) {
    GradientPair out;
    const ForwardRecord rec = forward_full(params, grid, factors, d, cfg);
    if (!rec.converged()) return out;
    const SolveResult exact = newton_solve(grid, rec.x, d, 1e-12, 30);
    if (!exact.converged) return out;
    out.approx = parameter_gradient(rec, params, duals, grid, factors, cfg, GradientMode::KStep);
    ForwardRecord at_fixed_point = rec;
    at_fixed_point.solve.z_star = exact.z_star;
    out.exact = parameter_gradient(at_fixed_point, params, duals, grid, factors, cfg, GradientMode::Exact);
    out.ok = out.exact.allFinite() && out.approx.allFinite();
    return out;
}

double prediction_jacobian_norm(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& scale,
                                int iterations, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Eigen::VectorXd v(params.size());
    for (auto& e : v) e = normal(rng);
    v.normalize();
    double sigma = 0.0;
    for (int it = 0; it < iterations; ++it) {
        const Eigen::VectorXd u = scale.cwiseProduct(mlp_jvp(params, cache, v));
        sigma = u.norm();
        const Eigen::VectorXd w = mlp_backward(params, cache, scale.cwiseProduct(u));
        const double nw = w.norm();
        if (nw == 0.0) return 0.0;
        v = w / nw;
    }
    return std::max(sigma, scale.cwiseProduct(mlp_jvp(params, cache, v)).norm());
}

namespace {

struct SampleSlot {
    bool ok = false;
    SampleConstants c;
};

SampleSlot sample_constants(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                            const Eigen::VectorXd& d, const DualState& duals, const SolverConfig& cfg,
                            const StencilConfig& stencil, std::uint64_t seed) {
    SampleSlot slot;
    std::mt19937_64 rng(seed);
    const GradientPair pair = gradient_pair(params, grid, factors, d, duals, cfg);
    if (!pair.ok) return slot;

    MlpCache cache;
    const Eigen::VectorXd raw = mlp_forward(params, d, &cache);
    const Eigen::VectorXd x = decode_prediction(raw, grid);
    const SolveResult exact = newton_solve(grid, x, d, 1e-12, 30);
    if (!exact.converged) return slot;
    const Eigen::VectorXd& zs = exact.z_star;
    const int k = cfg.refinement_iterations;
    auto& c = slot.c;

    c.cosine = cosine_similarity(pair.approx, pair.exact);
    c.relative_error = relative_error(pair.approx, pair.exact);
    c.C_g = pair.exact.norm();
    c.d_0 = (flat_start(grid) - zs).norm();
    c.rho = spectral_norm(composite_z_jacobian(grid, factors, zs, x, d, k));
    const Eigen::MatrixXd jx = kstep_jacobian(grid, factors, zs, x, d, k, RefinementKind::KStepFDPF);
    c.L_T = spectral_norm(jx);
    c.sigma_J = spectral_norm(exact_implicit_jacobian_T(grid, factors, zs, x, d));
    const LossPartials lp = loss_partials(grid, x, zs, d, duals);
    c.C_z = lp.z_total.norm();

    const auto dirs = stencil_directions(zs.size(), stencil, rng);
    c.L_x = difference_quotient([&](const Eigen::VectorXd& z) { return loss_partials(grid, x, z, d, duals).x_partial; },
                                zs, dirs, stencil.radius);
    c.L_z = difference_quotient([&](const Eigen::VectorXd& z) { return loss_partials(grid, x, z, d, duals).z_total; },
                                zs, dirs, stencil.radius);
    c.L_J = difference_quotient(
        [&](const Eigen::VectorXd& z) { return kstep_jacobian(grid, factors, z, x, d, k, RefinementKind::KStepFDPF); },
        zs, dirs, stencil.radius);
    c.sigma_A = prediction_jacobian_norm(params, cache, decode_derivative(raw, grid), stencil.power_iterations, rng);
    slot.ok = true;
    return slot;
}

}  // namespace

TheoremConstants estimate_constants(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                                    const std::vector<Eigen::VectorXd>& samples, const DualState& duals,
                                    const SolverConfig& cfg, const StencilConfig& stencil, int workers) {
    if (samples.size() < 2) throw std::invalid_argument("constant estimation needs at least 2 samples");
    if (stencil.radius <= 0.0 || stencil.directions < 1 || stencil.power_iterations < 1)
        throw std::invalid_argument("stencil radius, directions and power iterations must be positive");
    SolverConfig kcfg = cfg;
    kcfg.refinement = RefinementKind::KStepFDPF;
    kcfg.validate();

    std::vector<SampleSlot> slots(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t i) {
        slots[i] = sample_constants(params, grid, factors, samples[i], duals, kcfg, stencil, stencil.seed + i);
    });

    TheoremConstants t;
    t.k_r = kcfg.refinement_iterations;
    t.k = static_cast<double>(kcfg.guide_iterations) / static_cast<double>(kcfg.refinement_iterations);
    for (const auto& s : slots)
        if (s.ok) t.samples.push_back(s.c);
    if (t.samples.empty()) throw DivergenceError("no sample converged during constant estimation");

    auto collect = [&](double SampleConstants::*field) {
        std::vector<double> v;
        for (const auto& s : t.samples) v.push_back(s.*field);
        return mean_std(v);
    };
    t.rho = collect(&SampleConstants::rho);
    t.L_T = collect(&SampleConstants::L_T);
    t.L_J = collect(&SampleConstants::L_J);
    t.L_x = collect(&SampleConstants::L_x);
    t.L_z = collect(&SampleConstants::L_z);
    t.C_z = collect(&SampleConstants::C_z);
    t.sigma_J = collect(&SampleConstants::sigma_J);
    t.C_g = collect(&SampleConstants::C_g);
    t.sigma_A = collect(&SampleConstants::sigma_A);
    t.d_0 = collect(&SampleConstants::d_0);
    t.vanishing_gradient = !(t.C_g.mean >= kVanishingGradient);
    t.C_1 = t.c1_identity();
    t.eps_k = t.eps_at(t.k);
    t.eps_inf = t.eps_at(kInf);  // rho^k vanishes
    t.bound = alignment_bound(t.eps_k);
    t.bound_inf = alignment_bound(t.eps_inf);
    return t;
}

std::vector<AlignmentRow> alignment_report(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                                           const std::vector<Eigen::VectorXd>& samples, const DualState& duals,
                                           const SolverConfig& cfg, const std::vector<int>& k_r_list,
                                           const StencilConfig& stencil, int workers) {
    std::vector<AlignmentRow> rows;
    for (int k_r : k_r_list) {
        SolverConfig c = cfg;
        c.refinement = RefinementKind::KStepFDPF;
        c.refinement_iterations = k_r;
        AlignmentRow row;
        row.k_r = k_r;
        row.constants = estimate_constants(params, grid, factors, samples, duals, c, stencil, workers);
        std::vector<double> cos, rel;
        for (const auto& s : row.constants.samples) {
            cos.push_back(s.cosine);
            rel.push_back(s.relative_error);
        }
        row.cosine = mean_std(cos);
        row.relerr = mean_std(rel);
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_alignment_csv(const std::vector<AlignmentRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << kAlignmentHeader << '\n' << std::setprecision(10);
    for (const auto& r : rows) {
        const auto& c = r.constants;
        out << r.k_r << ',' << r.cosine.mean << ',' << r.cosine.std << ',' << r.relerr.mean << ',' << r.relerr.std
            << ',' << c.rho.mean << ',' << c.L_T.mean << ',' << c.L_J.mean << ',' << c.C_1 << ',' << c.eps_k << ','
            << c.eps_inf << ',' << c.bound << ',' << c.bound_inf << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace opflayer
