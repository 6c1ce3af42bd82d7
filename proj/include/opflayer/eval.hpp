#pragma once

// Feasibility and optimality metrics, contraction estimates, the constants of
// the gradient alignment bound and the alignment report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "opflayer/case_io.hpp"
#include "opflayer/constraints.hpp"
#include "opflayer/model.hpp"

namespace opflayer {

/// Rows whose violation exceeds this count as violated.
inline constexpr double kViolationTolerance = 1e-4;

/// Streams per-sample constraint vectors into a MetricsRecord. Means are
/// over all rows of all samples, maxima over the dataset, violation counts
/// are per-sample averages.
class MetricsAccumulator {
  public:
    void add(const Eigen::VectorXd& g, const Eigen::VectorXd& h, double objective,
             std::optional<double> reference_cost = std::nullopt);
    [[nodiscard]] MetricsRecord finish(int epoch = 0) const;
    [[nodiscard]] std::size_t samples() const { return samples_; }

  private:
    std::size_t samples_ = 0, eq_rows_ = 0, ineq_rows_ = 0, gap_samples_ = 0;
    double eq_sum_ = 0.0, eq_max_ = 0.0, eq_viol_ = 0.0;
    double ineq_sum_ = 0.0, ineq_max_ = 0.0, ineq_viol_ = 0.0;
    double cost_sum_ = 0.0, gap_sum_ = 0.0;
};

struct EvalResult {
    MetricsRecord metrics;
    std::size_t evaluated = 0;
    std::vector<std::size_t> failed;  // dataset indices whose solve did not converge
    std::vector<double> costs;        // per evaluated sample, split order
};

/// Forward passes over the given dataset indices. With refs, every index
/// must have a reference cost; the gap column is NaN without refs.
EvalResult evaluate(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                    const LoadDataset& ds, const std::vector<std::size_t>& indices, const ReferenceSet* refs,
                    const SolverConfig& cfg, int workers = 1);

/// Largest spectral norm of the composite Jacobian d(step^k)/dz over the
/// states. step_jacobian(z) is the one-step Jacobian and step(z) the map.
double composite_spectral_norm(const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& step_jacobian,
                               const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& step,
                               const std::vector<Eigen::VectorXd>& states, int k);

/// rho of T^{K_R} for the FDPF operator over near-solution states.
double estimate_contraction(const GridModel& grid, const FdpfFactors& factors,
                            const std::vector<Eigen::VectorXd>& states, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& d, int k_r);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v);

/// Difference-quotient stencil for Lipschitz estimates.
struct StencilConfig {
    double radius = 1e-2;
    int directions = 8;
    int power_iterations = 20;
    std::uint64_t seed = 7;
};

/// stencil.directions random unit vectors of length n.
std::vector<Eigen::VectorXd> stencil_directions(Eigen::Index n, const StencilConfig& stencil, std::mt19937_64& rng);

/// max over directions u of ||f(at + r u) - f(at)||_2 / r, with the spectral
/// norm when f returns a matrix.
double difference_quotient(const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& at,
                           const std::vector<Eigen::VectorXd>& directions, double radius);

/// Largest singular value of diag(scale) * d(raw output)/d(params) at the
/// cached forward pass, by power iteration with forward and reverse products.
double prediction_jacobian_norm(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& scale,
                                int iterations, std::mt19937_64& rng);

/// Per-sample estimates for one refinement depth.
struct SampleConstants {
    double rho = 0.0, L_T = 0.0, L_J = 0.0, L_x = 0.0, L_z = 0.0, C_z = 0.0;
    double sigma_J = 0.0, C_g = 0.0, sigma_A = 0.0, d_0 = 0.0;
    double cosine = 0.0, relative_error = 0.0;  // exact vs K-step parameter gradient
};

struct TheoremConstants {
    int k_r = 1;
    double k = 0.0;  // guide iterations counted in composite steps
    MeanStd rho, L_T, L_J, L_x, L_z, C_z, sigma_J, C_g, sigma_A, d_0;
    double C_1 = 0.0;
    double eps_k = 0.0;
    double eps_inf = 0.0;
    double bound = 0.0;      // (1 - eps_k)/(1 + eps_k), NaN when eps_k >= 1
    double bound_inf = 0.0;  // same with eps_inf
    bool vanishing_gradient = false;
    std::vector<SampleConstants> samples;

    /// C_1 = rho (L_x + L_z sigma_J) + C_z L_J from the mean estimates.
    [[nodiscard]] double c1_identity() const;
    /// eps for an arbitrary iteration count with these constants.
    [[nodiscard]] double eps_at(double k_iter) const;
};

/// eps_k from its parts; infinite when rho >= 1 or C_g vanishes.
double alignment_eps(double sigma_A, double C_g, double rho, double L_T, double C_z, double d_0, double C_1,
                     double k_iter);
double alignment_bound(double eps);

/// Exact-mode and K-step parameter gradients for one load sample.
struct GradientPair {
    Eigen::VectorXd exact;
    Eigen::VectorXd approx;
    bool ok = false;
};

GradientPair gradient_pair(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                           const Eigen::VectorXd& d, const DualState& duals, const SolverConfig& cfg);

TheoremConstants estimate_constants(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                                    const std::vector<Eigen::VectorXd>& samples, const DualState& duals,
                                    const SolverConfig& cfg, const StencilConfig& stencil = {}, int workers = 1);

struct AlignmentRow {
    int k_r = 1;
    MeanStd cosine, relerr;
    TheoremConstants constants;
};

/// One row per refinement depth; the guide iterations of cfg stay fixed.
std::vector<AlignmentRow> alignment_report(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                                           const std::vector<Eigen::VectorXd>& samples, const DualState& duals,
                                           const SolverConfig& cfg, const std::vector<int>& k_r_list,
                                           const StencilConfig& stencil = {}, int workers = 1);

inline constexpr const char* kAlignmentHeader =
    "K_R,cosine_mean,cosine_std,relerr_mean,relerr_std,rho_k,L_T,L_J,C_1,eps_k,eps_inf,bound,bound_inf";

void write_alignment_csv(const std::vector<AlignmentRow>& rows, const std::filesystem::path& path);

}  // namespace opflayer
