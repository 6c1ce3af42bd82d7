#pragma once

// The prediction network, the box decoding of its outputs and the full
// forward pass through the power-flow layer with its parameter gradient.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "opflayer/constraints.hpp"
#include "opflayer/grid.hpp"
#include "opflayer/pf.hpp"

namespace opflayer {

/// Fully connected ELU network. All weights and biases live in one flat
/// vector so optimizers and gradient checks see a single array; weight
/// blocks are column-major views into it.
class MlpParams {
  public:
    MlpParams() = default;
    explicit MlpParams(std::vector<int> widths);

    [[nodiscard]] const std::vector<int>& widths() const { return widths_; }
    [[nodiscard]] int n_layers() const { return static_cast<int>(widths_.size()) - 1; }
    [[nodiscard]] Eigen::Index size() const { return flat.size(); }

    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> bias(int layer) const;
    Eigen::Map<Eigen::MatrixXd> weight(int layer);
    Eigen::Map<Eigen::VectorXd> bias(int layer);

    Eigen::VectorXd flat;
    // Input standardization; identity when left empty.
    Eigen::VectorXd input_mean;
    Eigen::VectorXd input_std;

  private:
    std::vector<int> widths_;
    std::vector<Eigen::Index> offsets_;  // weight start per layer; bias follows
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
MlpParams init_mlp(const std::vector<int>& widths, std::uint64_t seed);

/// Sets input_mean/input_std from training samples; zero spread maps to 1.
void fit_standardizer(MlpParams& params, const std::vector<Eigen::VectorXd>& samples);

double elu(double v);

/// Activations kept for the reverse and tangent sweeps.
struct MlpCache {
    std::vector<Eigen::VectorXd> inputs;  // input of each layer
    std::vector<Eigen::VectorXd> pre;     // pre-activation of each layer
};

Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& d, MlpCache* cache = nullptr);
/// Gradient over the flat parameters of raw_bar . raw.
Eigen::VectorXd mlp_backward(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& raw_bar);
/// Tangent of raw along a parameter direction.
Eigen::VectorXd mlp_jvp(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& dflat);

/// Box limits of x: P^g limits at G, V limits at G u R.
void prediction_bounds(const GridModel& grid, Eigen::VectorXd& lower, Eigen::VectorXd& upper);

/// x = lower + sigmoid(raw) (upper - lower)
Eigen::VectorXd decode_prediction(const Eigen::VectorXd& raw, const GridModel& grid);
/// Diagonal of dx/draw.
Eigen::VectorXd decode_derivative(const Eigen::VectorXd& raw, const GridModel& grid);

struct ForwardRecord {
    Eigen::VectorXd d;
    Eigen::VectorXd raw;
    Eigen::VectorXd x;
    SolveResult solve;
    Eigen::VectorXd z_tilde;
    AssembledState y;
    double objective = 0.0;
    Eigen::VectorXd g, h;
    MlpCache cache;

    [[nodiscard]] bool converged() const { return solve.converged; }
};

ForwardRecord forward_full(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                           const Eigen::VectorXd& d, const SolverConfig& cfg);

/// Completion map derivative used in the backward pass: the K-step product
/// through the recorded refinement, or the exact implicit one.
enum class GradientMode { KStep, Exact };

/// dL/dx including the completion path.
Eigen::VectorXd prediction_gradient(const ForwardRecord& record, const DualState& duals, const GridModel& grid,
                                    const FdpfFactors& factors, const SolverConfig& cfg, GradientMode mode);

/// dL/dphi over the flat parameter vector.
Eigen::VectorXd parameter_gradient(const ForwardRecord& record, const MlpParams& params, const DualState& duals,
                                   const GridModel& grid, const FdpfFactors& factors, const SolverConfig& cfg,
                                   GradientMode mode);

/// Checkpoint round trip; loading rejects a fingerprint from another grid.
inline constexpr int kCheckpointVersion = 1;
void save_checkpoint(const MlpParams& params, std::uint64_t fingerprint, const std::filesystem::path& path);
MlpParams load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_fingerprint);

}  // namespace opflayer
