#include "opflayer/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "opflayer/diffgrad.hpp"

namespace opflayer {

MlpParams::MlpParams(std::vector<int> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw std::invalid_argument("an MLP needs at least input and output widths");
    Eigen::Index total = 0;
    for (int l = 0; l + 1 < static_cast<int>(widths_.size()); ++l) {
        offsets_.push_back(total);
        total += static_cast<Eigen::Index>(widths_[static_cast<std::size_t>(l)] + 1) * widths_[static_cast<std::size_t>(l) + 1];
    }
    flat = Eigen::VectorXd::Zero(total);
}

Eigen::Map<const Eigen::MatrixXd> MlpParams::weight(int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    return {flat.data() + offsets_[l], widths_[l + 1], widths_[l]};
}

Eigen::Map<const Eigen::VectorXd> MlpParams::bias(int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    return {flat.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
}

Eigen::Map<Eigen::MatrixXd> MlpParams::weight(int layer) {
    const auto l = static_cast<std::size_t>(layer);
    return {flat.data() + offsets_[l], widths_[l + 1], widths_[l]};
}

Eigen::Map<Eigen::VectorXd> MlpParams::bias(int layer) {
    const auto l = static_cast<std::size_t>(layer);
    return {flat.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
}

MlpParams init_mlp(const std::vector<int>& widths, std::uint64_t seed) {
    MlpParams p(widths);
    std::mt19937_64 rng(seed);
    for (int l = 0; l < p.n_layers(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths[static_cast<std::size_t>(l)]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        auto w = p.weight(l);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    return p;
}

void fit_standardizer(MlpParams& params, const std::vector<Eigen::VectorXd>& samples) {
    if (samples.empty()) throw std::invalid_argument("cannot fit a standardizer on zero samples");
    const Eigen::Index dim = samples.front().size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    for (const auto& s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(dim);
    for (const auto& s : samples) var += (s - mean).cwiseAbs2();
    var /= static_cast<double>(samples.size());
    params.input_mean = mean;
    params.input_std = var.cwiseSqrt();
    for (Eigen::Index i = 0; i < dim; ++i)
        if (!(params.input_std[i] > 1e-12)) params.input_std[i] = 1.0;
}

double elu(double v) { return v > 0.0 ? v : std::expm1(v); }

namespace {

double elu_derivative(double v) { return v > 0.0 ? 1.0 : std::exp(v); }

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& d, MlpCache* cache) {
    if (d.size() != params.widths().front())
        throw std::invalid_argument("network input has size " + std::to_string(d.size()) + ", expected " +
                                    std::to_string(params.widths().front()));
    Eigen::VectorXd a = d;
    if (params.input_mean.size() == d.size()) a = (d - params.input_mean).cwiseQuotient(params.input_std);
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    const int nl = params.n_layers();
    for (int l = 0; l < nl; ++l) {
        Eigen::VectorXd pre = params.weight(l) * a + params.bias(l);
        if (cache) {
            cache->inputs.push_back(a);
            cache->pre.push_back(pre);
        }
        a = l + 1 < nl ? pre.unaryExpr(&elu) : pre;
    }
    return a;
}

Eigen::VectorXd mlp_backward(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& raw_bar) {
    MlpParams grad(params.widths());
    Eigen::VectorXd delta = raw_bar;
    for (int l = params.n_layers() - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        grad.weight(l).noalias() = delta * cache.inputs[li].transpose();
        grad.bias(l) = delta;
        if (l > 0) delta = (params.weight(l).transpose() * delta).cwiseProduct(cache.pre[li - 1].unaryExpr(&elu_derivative));
    }
    return grad.flat;
}

Eigen::VectorXd mlp_jvp(const MlpParams& params, const MlpCache& cache, const Eigen::VectorXd& dflat) {
    MlpParams dir(params.widths());
    dir.flat = dflat;
    Eigen::VectorXd t = Eigen::VectorXd::Zero(params.widths().front());
    const int nl = params.n_layers();
    for (int l = 0; l < nl; ++l) {
        const auto li = static_cast<std::size_t>(l);
        Eigen::VectorXd dz = dir.weight(l) * cache.inputs[li] + dir.bias(l) + params.weight(l) * t;
        t = l + 1 < nl ? Eigen::VectorXd(dz.cwiseProduct(cache.pre[li].unaryExpr(&elu_derivative))) : dz;
    }
    return t;
}

void prediction_bounds(const GridModel& grid, Eigen::VectorXd& lower, Eigen::VectorXd& upper) {
    const auto& part = grid.partition;
    lower.resize(part.m());
    upper.resize(part.m());
    const Eigen::Index ng = part.n_gen();
    for (Eigen::Index k = 0; k < ng; ++k) {
        const auto& gen = grid.gens[static_cast<std::size_t>(grid.gen_at_bus[static_cast<std::size_t>(part.gen[static_cast<std::size_t>(k)])])];
        lower[k] = gen.pmin;
        upper[k] = gen.pmax;
    }
    for (std::size_t k = 0; k < part.gen_or_slack.size(); ++k) {
        const int bus = part.gen_or_slack[k];
        lower[ng + static_cast<Eigen::Index>(k)] = grid.vmin[bus];
        upper[ng + static_cast<Eigen::Index>(k)] = grid.vmax[bus];
    }
}

Eigen::VectorXd decode_prediction(const Eigen::VectorXd& raw, const GridModel& grid) {
    Eigen::VectorXd lo, hi;
    prediction_bounds(grid, lo, hi);
    if (raw.size() != lo.size()) throw std::invalid_argument("raw prediction has the wrong size");
    Eigen::VectorXd x(raw.size());
    for (Eigen::Index i = 0; i < raw.size(); ++i) x[i] = lo[i] + sigmoid(raw[i]) * (hi[i] - lo[i]);
    return x;
}

Eigen::VectorXd decode_derivative(const Eigen::VectorXd& raw, const GridModel& grid) {
    Eigen::VectorXd lo, hi;
    prediction_bounds(grid, lo, hi);
    Eigen::VectorXd dx(raw.size());
    for (Eigen::Index i = 0; i < raw.size(); ++i) {
        const double s = sigmoid(raw[i]);
        dx[i] = s * (1.0 - s) * (hi[i] - lo[i]);
    }
    return dx;
}

ForwardRecord forward_full(const MlpParams& params, const GridModel& grid, const FdpfFactors& factors,
                           const Eigen::VectorXd& d, const SolverConfig& cfg) {
    ForwardRecord r;
    r.d = d;
    r.raw = mlp_forward(params, d, &r.cache);
    r.x = decode_prediction(r.raw, grid);
    r.solve = hybrid_solve(grid, factors, r.x, d, cfg);
    if (r.solve.diverged) return r;
    r.z_tilde = post_complete(grid, r.x, r.solve.z_star, d);
    r.y = assemble(grid, r.x, r.solve.z_star, r.z_tilde);
    r.objective = objective_cost(grid, r.y);
    r.g = inequality_values(grid, r.y);
    r.h = equality_values(grid, r.y, d);
    return r;
}

Eigen::VectorXd prediction_gradient(const ForwardRecord& record, const DualState& duals, const GridModel& grid,
                                    const FdpfFactors& factors, const SolverConfig& cfg, GradientMode mode) {
    const LossPartials lp = loss_partials(grid, record.x, record.solve.z_star, record.d, duals);
    const Eigen::VectorXd through_z =
        mode == GradientMode::Exact
            ? exact_vjp(grid, record.solve.z_star, record.x, lp.z_total)
            : refinement_vjp(grid, factors, record.solve.refinement_inputs, record.x, record.d, cfg.refinement,
                             lp.z_total);
    return lp.x_partial + through_z;
}

Eigen::VectorXd parameter_gradient(const ForwardRecord& record, const MlpParams& params, const DualState& duals,
                                   const GridModel& grid, const FdpfFactors& factors, const SolverConfig& cfg,
                                   GradientMode mode) {
    const Eigen::VectorXd xbar = prediction_gradient(record, duals, grid, factors, cfg, mode);
    return mlp_backward(params, record.cache, xbar.cwiseProduct(decode_derivative(record.raw, grid)));
}

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_json(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void save_checkpoint(const MlpParams& params, std::uint64_t fingerprint, const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["partition_fingerprint"] = hex64(fingerprint);
    j["widths"] = params.widths();
    j["activation"] = "elu";
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < params.n_layers(); ++l) {
        const auto w = params.weight(l);
        std::vector<double> rows;
        rows.reserve(static_cast<std::size_t>(w.size()));
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index k = 0; k < w.cols(); ++k) rows.push_back(w(i, k));
        layers.push_back({{"weight_row_major", rows}, {"bias", to_vector(params.bias(l))}});
    }
    j["layers"] = layers;
    j["input_mean"] = to_vector(params.input_mean);
    j["input_std"] = to_vector(params.input_std);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

MlpParams load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_fingerprint) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw StructuralError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    if (j.value("version", -1) != kCheckpointVersion) throw StructuralError("unsupported checkpoint version");
    if (j.at("partition_fingerprint").get<std::string>() != hex64(expected_fingerprint))
        throw StructuralError("checkpoint was trained on a different grid partition");
    MlpParams p(j.at("widths").get<std::vector<int>>());
    const auto& layers = j.at("layers");
    if (static_cast<int>(layers.size()) != p.n_layers()) throw StructuralError("checkpoint layer count mismatch");
    for (int l = 0; l < p.n_layers(); ++l) {
        const auto& lj = layers[static_cast<std::size_t>(l)];
        const auto rows = lj.at("weight_row_major").get<std::vector<double>>();
        auto w = p.weight(l);
        if (static_cast<Eigen::Index>(rows.size()) != w.size()) throw StructuralError("checkpoint weight size mismatch");
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index k = 0; k < w.cols(); ++k) w(i, k) = rows[static_cast<std::size_t>(i * w.cols() + k)];
        const Eigen::VectorXd b = from_json(lj.at("bias"));
        if (b.size() != p.bias(l).size()) throw StructuralError("checkpoint bias size mismatch");
        p.bias(l) = b;
    }
    p.input_mean = from_json(j.at("input_mean"));
    p.input_std = from_json(j.at("input_std"));
    return p;
}

}  // namespace opflayer
