#include "opflayer/run_config.hpp"

#include <fstream>
#include <set>
#include <string>

namespace opflayer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() ? p : base / p; }

std::optional<fs::path> read_path(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    if (!j.at(key).is_string()) throw ConfigError(std::string("'") + key + "' must be a path string");
    return resolve(j.at(key).get<std::string>(), base);
}

RefinementKind refinement_from(const std::string& s) {
    if (s == "nr") return RefinementKind::SingleNR;
    if (s == "fdpf") return RefinementKind::KStepFDPF;
    throw ConfigError("refinement must be 'nr' or 'fdpf', got '" + s + "'");
}

}  // namespace

json solver_to_json(const SolverConfig& s) {
    return {{"guide_iterations", s.guide_iterations},
            {"refinement", s.refinement == RefinementKind::SingleNR ? "nr" : "fdpf"},
            {"refinement_iterations", s.refinement_iterations},
            {"tolerance", s.tolerance},
            {"divergence_cap", s.divergence_cap}};
}

SolverConfig solver_from_json(const json& j) {
    const std::string where = "solver";
    reject_unknown(j, {"guide_iterations", "refinement", "refinement_iterations", "tolerance", "divergence_cap"},
                   where);
    SolverConfig s;
    read(j, "guide_iterations", s.guide_iterations, where);
    read(j, "refinement_iterations", s.refinement_iterations, where);
    read(j, "tolerance", s.tolerance, where);
    read(j, "divergence_cap", s.divergence_cap, where);
    if (j.contains("refinement")) {
        std::string r;
        read(j, "refinement", r, where);
        s.refinement = refinement_from(r);
    }
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("solver: ") + e.what());
    }
    return s;
}

RunConfig parse_run_config(const json& j, const fs::path& base) {
    reject_unknown(j, {"case", "output_dir", "references", "checkpoint", "duals", "dataset", "solver", "train",
                       "constants", "seed", "workers"},
                   "config");
    RunConfig cfg;
    const auto case_path = read_path(j, "case", base);
    if (!case_path) throw ConfigError("config needs a 'case' path");
    cfg.case_path = *case_path;
    cfg.output_dir = read_path(j, "output_dir", base);
    cfg.references = read_path(j, "references", base);
    cfg.checkpoint = read_path(j, "checkpoint", base);
    cfg.duals = read_path(j, "duals", base);

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        reject_unknown(d, {"count", "low", "high", "split", "seed", "path"}, "dataset");
        read(d, "count", cfg.dataset.count, "dataset");
        read(d, "low", cfg.dataset.low, "dataset");
        read(d, "high", cfg.dataset.high, "dataset");
        read(d, "split", cfg.dataset.split, "dataset");
        read(d, "seed", cfg.dataset.seed, "dataset");
        cfg.dataset.path = read_path(d, "path", base);
    }
    if (j.contains("solver")) cfg.train.solver = solver_from_json(j.at("solver"));

    auto& t = cfg.train;
    read(j, "seed", t.seed, "config");
    read(j, "workers", t.workers, "config");
    if (j.contains("train")) {
        const auto& tj = j.at("train");
        const std::string w = "train";
        reject_unknown(tj, {"hidden", "outer_iterations", "inner_iterations", "batch_size", "eta_phi", "eta_lambda",
                            "eta_nu", "objective_scale", "beta1", "beta2", "adam_eps", "clip_norm", "gradient",
                            "dual_reduction"},
                       w);
        read(tj, "hidden", t.hidden, w);
        read(tj, "outer_iterations", t.outer_iterations, w);
        read(tj, "inner_iterations", t.inner_iterations, w);
        read(tj, "batch_size", t.batch_size, w);
        read(tj, "eta_phi", t.eta_phi, w);
        read(tj, "eta_lambda", t.eta_lambda, w);
        read(tj, "eta_nu", t.eta_nu, w);
        read(tj, "objective_scale", t.objective_scale, w);
        read(tj, "beta1", t.beta1, w);
        read(tj, "beta2", t.beta2, w);
        read(tj, "adam_eps", t.adam_eps, w);
        read(tj, "clip_norm", t.clip_norm, w);
        std::string s;
        if (tj.contains("gradient")) {
            read(tj, "gradient", s, w);
            if (s == "kstep")
                t.gradient = GradientMode::KStep;
            else if (s == "exact")
                t.gradient = GradientMode::Exact;
            else
                throw ConfigError("train.gradient must be 'kstep' or 'exact'");
        }
        if (tj.contains("dual_reduction")) {
            read(tj, "dual_reduction", s, w);
            if (s == "mean")
                t.dual_reduction = DualReduction::Mean;
            else if (s == "sum")
                t.dual_reduction = DualReduction::Sum;
            else
                throw ConfigError("train.dual_reduction must be 'mean' or 'sum'");
        }
    }
    if (j.contains("constants")) {
        const auto& c = j.at("constants");
        const std::string w = "constants";
        reject_unknown(c, {"samples", "k_r", "radius", "directions", "power_iterations", "seed"}, w);
        read(c, "samples", cfg.constants.samples, w);
        read(c, "k_r", cfg.constants.k_r, w);
        read(c, "radius", cfg.constants.stencil.radius, w);
        read(c, "directions", cfg.constants.stencil.directions, w);
        read(c, "power_iterations", cfg.constants.stencil.power_iterations, w);
        read(c, "seed", cfg.constants.stencil.seed, w);
    }

    if (cfg.dataset.count < 2) throw ConfigError("dataset.count must be >= 2");
    if (!(cfg.dataset.low > 0.0 && cfg.dataset.low <= cfg.dataset.high))
        throw ConfigError("dataset range must satisfy 0 < low <= high");
    if (!(cfg.dataset.split > 0.0 && cfg.dataset.split < 1.0)) throw ConfigError("dataset.split must lie in (0, 1)");
    for (int k : cfg.constants.k_r)
        if (k < 1) throw ConfigError("constants.k_r entries must be >= 1");
    try {
        cfg.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("train: ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j, fs::absolute(path).parent_path());
}

json to_json(const RunConfig& cfg) {
    const auto& t = cfg.train;
    auto opt = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
    json j;
    j["case"] = cfg.case_path.string();
    j["output_dir"] = opt(cfg.output_dir);
    j["references"] = opt(cfg.references);
    j["checkpoint"] = opt(cfg.checkpoint);
    j["duals"] = opt(cfg.duals);
    j["seed"] = t.seed;
    j["workers"] = t.workers;
    j["dataset"] = {{"count", cfg.dataset.count}, {"low", cfg.dataset.low},   {"high", cfg.dataset.high},
                    {"split", cfg.dataset.split}, {"seed", cfg.dataset.seed}, {"path", opt(cfg.dataset.path)}};
    j["solver"] = solver_to_json(t.solver);
    j["train"] = {{"hidden", t.hidden},
                  {"outer_iterations", t.outer_iterations},
                  {"inner_iterations", t.inner_iterations},
                  {"batch_size", t.batch_size},
                  {"eta_phi", t.eta_phi},
                  {"eta_lambda", t.eta_lambda},
                  {"eta_nu", t.eta_nu},
                  {"objective_scale", t.objective_scale},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"adam_eps", t.adam_eps},
                  {"clip_norm", t.clip_norm},
                  {"gradient", t.gradient == GradientMode::KStep ? "kstep" : "exact"},
                  {"dual_reduction", t.dual_reduction == DualReduction::Mean ? "mean" : "sum"}};
    j["constants"] = {{"samples", cfg.constants.samples},
                      {"k_r", cfg.constants.k_r},
                      {"radius", cfg.constants.stencil.radius},
                      {"directions", cfg.constants.stencil.directions},
                      {"power_iterations", cfg.constants.stencil.power_iterations},
                      {"seed", cfg.constants.stencil.seed}};
    return j;
}

LoadDataset make_dataset(const RunConfig& cfg, const RawCase& rc) {
    if (cfg.dataset.path) return read_dataset_csv(*cfg.dataset.path);
    return generate_dataset(rc, cfg.dataset.low, cfg.dataset.high, cfg.dataset.count, cfg.dataset.split,
                            cfg.dataset.seed);
}

void save_duals(const DualState& duals, const fs::path& path) {
    json j;
    j["lambda"] = std::vector<double>(duals.lambda.data(), duals.lambda.data() + duals.lambda.size());
    j["nu"] = std::vector<double>(duals.nu.data(), duals.nu.data() + duals.nu.size());
    j["eta_lambda"] = duals.eta_lambda;
    j["eta_nu"] = duals.eta_nu;
    j["eta_phi"] = duals.eta_phi;
    j["objective_scale"] = duals.objective_scale;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

DualState load_duals(const fs::path& path, const GridModel& grid) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read duals file " + path.string());
    DualState d = DualState::zeros(grid);
    try {
        const json j = json::parse(in);
        const auto lambda = j.at("lambda").get<std::vector<double>>();
        const auto nu = j.at("nu").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(lambda.size()) != d.lambda.size() ||
            static_cast<Eigen::Index>(nu.size()) != d.nu.size())
            throw StructuralError("duals file " + path.string() + " does not match the grid's constraint counts");
        d.lambda = Eigen::Map<const Eigen::VectorXd>(lambda.data(), d.lambda.size());
        d.nu = Eigen::Map<const Eigen::VectorXd>(nu.data(), d.nu.size());
        d.eta_lambda = j.value("eta_lambda", 0.0);
        d.eta_nu = j.value("eta_nu", 0.0);
        d.eta_phi = j.value("eta_phi", 0.0);
        d.objective_scale = j.value("objective_scale", 1.0);
    } catch (const json::exception& e) {
        throw StructuralError("duals file " + path.string() + " is malformed: " + e.what());
    }
    return d;
}

}  // namespace opflayer
