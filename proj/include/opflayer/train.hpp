#pragma once

// Primal-dual training of the prediction network on the Lagrangian.

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "opflayer/case_io.hpp"
#include "opflayer/constraints.hpp"
#include "opflayer/model.hpp"

namespace opflayer {

/// How per-sample violations are combined into one dual increment.
/// Mean keeps the step sizes independent of the dataset size; Sum is the
/// literal sum over samples.
enum class DualReduction { Mean, Sum };

struct TrainConfig {
    std::vector<int> hidden{200, 200};
    std::uint64_t seed = 1;
    int outer_iterations = 20;
    int inner_iterations = 25;
    int batch_size = 200;
    double eta_phi = 1e-3;
    double eta_lambda = 0.1;
    double eta_nu = 0.5;
    double objective_scale = 1.0;  // cost weight in the Lagrangian
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 10.0;  // <= 0 disables clipping
    SolverConfig solver;
    GradientMode gradient = GradientMode::KStep;
    DualReduction dual_reduction = DualReduction::Mean;
    int workers = 1;

    [[nodiscard]] int epochs() const { return outer_iterations * inner_iterations; }
    void validate() const;
};

/// Adam with bias correction over a flat parameter vector.
class Adam {
  public:
    Adam(Eigen::Index size, double lr, double beta1, double beta2, double eps);
    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
    [[nodiscard]] long steps() const { return t_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    Eigen::VectorXd m_, v_;
};

/// Rescales grad in place so its norm is at most max_norm; returns the
/// norm before clipping.
double clip_gradient(Eigen::VectorXd& grad, double max_norm);

/// f + lambda . g+ + nu . |h| of a converged forward record.
double lagrangian(const ForwardRecord& record, const DualState& duals);

/// lambda += eta_lambda g+, nu += eta_nu |h|, then clamp at zero.
DualState dual_update(const DualState& duals, const Eigen::VectorXd& g_plus, const Eigen::VectorXd& h_abs);

struct DualSummary {
    double lambda_l1 = 0.0, lambda_max = 0.0;
    double nu_l1 = 0.0, nu_max = 0.0;
};

/// Batch-averaged Lagrangian and its parts over one epoch.
struct LossSummary {
    double lagrangian = 0.0;
    double objective = 0.0;
    double ineq_penalty = 0.0;
    double eq_penalty = 0.0;
};

struct TrainHistory {
    std::vector<MetricsRecord> train;
    std::vector<MetricsRecord> test;
    std::vector<DualSummary> duals;  // after the epoch's dual update, if any
    std::vector<LossSummary> loss;
    std::vector<std::size_t> skipped;

    [[nodiscard]] std::size_t epochs() const { return train.size(); }
};

struct TrainResult {
    MlpParams params;
    DualState duals;
    TrainHistory history;
};

using EpochCallback = std::function<void(int epoch, const TrainHistory& history)>;

/// Runs outer_iterations x inner_iterations epochs of minibatch Adam on the
/// Lagrangian over ds.train, with one dual update per outer iteration from
/// the last inner pass. Test metrics use ds.test and refs when given.
/// Throws DivergenceError if more than half the samples of an epoch fail.
TrainResult primal_dual_train(const GridModel& grid, const FdpfFactors& factors, const LoadDataset& ds,
                              const TrainConfig& cfg, const ReferenceSet* refs = nullptr,
                              const EpochCallback& on_epoch = {});

/// Same loop continuing from given parameters and duals.
TrainResult primal_dual_train(const GridModel& grid, const FdpfFactors& factors, const LoadDataset& ds,
                              const TrainConfig& cfg, MlpParams params, DualState duals,
                              const ReferenceSet* refs = nullptr, const EpochCallback& on_epoch = {});

}  // namespace opflayer
