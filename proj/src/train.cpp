#include "opflayer/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "opflayer/eval.hpp"
#include "opflayer/parallel.hpp"

namespace opflayer {

void TrainConfig::validate() const {
    if (outer_iterations < 1 || inner_iterations < 1 || batch_size < 1)
        throw std::invalid_argument("outer, inner iterations and batch size must be >= 1");
    if (!(objective_scale > 0.0)) throw std::invalid_argument("objective scale must be positive");
    if (!(eta_phi >= 0.0) || !(eta_lambda >= 0.0) || !(eta_nu >= 0.0))
        throw std::invalid_argument("step sizes must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
        throw std::invalid_argument("Adam betas must lie in [0, 1) and epsilon must be positive");
    for (int w : hidden)
        if (w < 1) throw std::invalid_argument("hidden widths must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    solver.validate();
}

Adam::Adam(Eigen::Index size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(size)),
      v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (grad.size() != params.size() || grad.size() != m_.size())
        throw std::invalid_argument("Adam step with mismatched sizes");
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

double clip_gradient(Eigen::VectorXd& grad, double max_norm) {
    const double norm = grad.norm();
    if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
    return norm;
}

double lagrangian(const ForwardRecord& record, const DualState& duals) {
    return lagrangian_value(record.objective, record.g, record.h, duals);
}

DualState dual_update(const DualState& duals, const Eigen::VectorXd& g_plus, const Eigen::VectorXd& h_abs) {
    DualState next = duals;
    next.lambda = (duals.lambda + duals.eta_lambda * g_plus).cwiseMax(0.0);
    next.nu = (duals.nu + duals.eta_nu * h_abs).cwiseMax(0.0);
    return next;
}

namespace {

struct SampleOutcome {
    bool ok = false;
    Eigen::VectorXd grad;
    double cost = 0.0, objective = 0.0, ineq_penalty = 0.0, eq_penalty = 0.0;
    Eigen::VectorXd g, h;
};

DualSummary summarize(const DualState& d) {
    return {d.lambda.lpNorm<1>(), d.lambda.size() ? d.lambda.maxCoeff() : 0.0, d.nu.lpNorm<1>(),
            d.nu.size() ? d.nu.maxCoeff() : 0.0};
}

}  // namespace

TrainResult primal_dual_train(const GridModel& grid, const FdpfFactors& factors, const LoadDataset& ds,
                              const TrainConfig& cfg, const ReferenceSet* refs, const EpochCallback& on_epoch) {
    cfg.validate();
    if (ds.train.empty()) throw std::invalid_argument("training split is empty");
    std::vector<int> widths{static_cast<int>(2 * grid.n_bus)};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(static_cast<int>(grid.partition.m()));
    MlpParams params = init_mlp(widths, cfg.seed);
    std::vector<Eigen::VectorXd> train_samples;
    for (auto i : ds.train) train_samples.push_back(ds.samples.at(i));
    fit_standardizer(params, train_samples);
    DualState duals = DualState::zeros(grid);
    return primal_dual_train(grid, factors, ds, cfg, std::move(params), std::move(duals), refs, on_epoch);
}

TrainResult primal_dual_train(const GridModel& grid, const FdpfFactors& factors, const LoadDataset& ds,
                              const TrainConfig& cfg, MlpParams params, DualState duals, const ReferenceSet* refs,
                              const EpochCallback& on_epoch) {
    cfg.validate();
    if (ds.train.empty()) throw std::invalid_argument("training split is empty");
    duals.eta_lambda = cfg.eta_lambda;
    duals.eta_nu = cfg.eta_nu;
    duals.eta_phi = cfg.eta_phi;
    duals.objective_scale = cfg.objective_scale;

    TrainResult result;
    Adam adam(params.size(), cfg.eta_phi, cfg.beta1, cfg.beta2, cfg.adam_eps);
    // Shuffling draws from its own stream so it does not depend on the
    // initialization path taken by the caller.
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order = ds.train;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);

    for (int outer = 0; outer < cfg.outer_iterations; ++outer) {
        for (int inner = 0; inner < cfg.inner_iterations; ++inner) {
            const int epoch = outer * cfg.inner_iterations + inner + 1;
            std::shuffle(order.begin(), order.end(), rng);

            MetricsAccumulator acc;
            LossSummary loss;
            Eigen::VectorXd g_plus = Eigen::VectorXd::Zero(duals.lambda.size());
            Eigen::VectorXd h_abs = Eigen::VectorXd::Zero(duals.nu.size());
            std::size_t skipped = 0, used = 0;

            for (std::size_t start = 0; start < order.size(); start += batch) {
                const std::size_t count = std::min(batch, order.size() - start);
                std::vector<SampleOutcome> out(count);
                parallel_for(count, cfg.workers, [&](std::size_t k) {
                    const Eigen::VectorXd& d = ds.samples.at(order[start + k]);
                    auto& o = out[k];
                    const ForwardRecord rec = forward_full(params, grid, factors, d, cfg.solver);
                    if (!rec.converged()) return;
                    try {
                        o.grad = parameter_gradient(rec, params, duals, grid, factors, cfg.solver, cfg.gradient);
                    } catch (const SingularJacobianError&) {
                        return;
                    }
                    if (!o.grad.allFinite()) return;
                    o.cost = rec.objective;
                    o.objective = duals.objective_scale * rec.objective;
                    o.ineq_penalty = duals.lambda.dot(rec.g.cwiseMax(0.0));
                    o.eq_penalty = duals.nu.dot(rec.h.cwiseAbs());
                    o.g = rec.g;
                    o.h = rec.h;
                    o.ok = true;
                });

                // ordered reduction keeps results independent of scheduling
                Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
                std::size_t ok = 0;
                for (const auto& o : out) {
                    if (!o.ok) {
                        ++skipped;
                        continue;
                    }
                    ++ok;
                    grad += o.grad;
                    loss.objective += o.objective;
                    loss.ineq_penalty += o.ineq_penalty;
                    loss.eq_penalty += o.eq_penalty;
                    g_plus += o.g.cwiseMax(0.0);
                    h_abs += o.h.cwiseAbs();
                    acc.add(o.g, o.h, o.cost);
                }
                used += ok;
                if (ok == 0) continue;
                grad /= static_cast<double>(ok);
                clip_gradient(grad, cfg.clip_norm);
                adam.step(params.flat, grad);
            }

            if (2 * skipped > order.size()) {
                std::ostringstream msg;
                msg << "epoch " << epoch << ": " << skipped << " of " << order.size()
                    << " training samples failed to converge";
                throw DivergenceError(msg.str());
            }
            if (used > 0) {
                const double inv = 1.0 / static_cast<double>(used);
                loss.objective *= inv;
                loss.ineq_penalty *= inv;
                loss.eq_penalty *= inv;
                loss.lagrangian = loss.objective + loss.ineq_penalty + loss.eq_penalty;
            }

            if (inner + 1 == cfg.inner_iterations && used > 0) {
                if (cfg.dual_reduction == DualReduction::Mean) {
                    g_plus /= static_cast<double>(used);
                    h_abs /= static_cast<double>(used);
                }
                duals = dual_update(duals, g_plus, h_abs);
            }

            const EvalResult test =
                ds.test.empty() ? EvalResult{}
                                : evaluate(params, grid, factors, ds, ds.test, refs, cfg.solver, cfg.workers);
            MetricsRecord train_rec = acc.finish(epoch);
            MetricsRecord test_rec = test.metrics;
            test_rec.epoch = epoch;
            result.history.train.push_back(train_rec);
            result.history.test.push_back(test_rec);
            result.history.duals.push_back(summarize(duals));
            result.history.loss.push_back(loss);
            result.history.skipped.push_back(skipped);
            if (on_epoch) on_epoch(epoch, result.history);
        }
    }
    result.params = std::move(params);
    result.duals = std::move(duals);
    return result;
}

}  // namespace opflayer
