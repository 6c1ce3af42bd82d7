#include "opflayer/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "opflayer/diffgrad.hpp"
#include "opflayer/eval.hpp"
#include "opflayer/model.hpp"
#include "opflayer/parallel.hpp"
#include "opflayer/run_config.hpp"
#include "opflayer/train.hpp"

namespace opflayer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string out_dir;
    std::string config;
    std::string case_path;
    std::string checkpoint;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
    bool verbose = false;
    // pf
    std::string solver = "hybrid";
    std::string refine = "fdpf";
    int kg = 8;
    int kr = 4;
    bool kr_set = false;
    double tol = 1e-5;
    int max_iter = 50;
};

fs::path output_directory(const Options& o, const std::optional<fs::path>& from_config) {
    fs::path dir;
    if (!o.out_dir.empty())
        dir = o.out_dir;
    else if (from_config)
        dir = *from_config;
    else if (const char* env = std::getenv("OPFLAYER_OUT"); env && *env)
        dir = env;
    else
        dir = "opflayer_out";
    fs::create_directories(dir);
    return dir;
}

void write_manifest(const fs::path& dir, const std::string& subcommand, int argc, const char* const* argv,
                    const json& config) {
    json m;
    m["subcommand"] = subcommand;
    std::vector<std::string> args(argv, argv + argc);
    m["argv"] = args;
    m["config"] = config;
    m["versions"] = {{"opflayer", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"compiler", __VERSION__},
                     {"cplusplus", static_cast<long>(__cplusplus)}};
    std::ofstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir.string());
    f << m.dump(1) << '\n';
}

RunConfig load_config(const Options& o) {
    RunConfig cfg = load_run_config(o.config);
    if (o.seed_set) cfg.train.seed = o.seed;
    if (o.workers > 0) cfg.train.workers = o.workers;
    if (!o.checkpoint.empty()) cfg.checkpoint = fs::absolute(o.checkpoint);
    if (!fs::exists(cfg.case_path)) throw ConfigError("case file not found: " + cfg.case_path.string());
    for (const auto& p : {cfg.references, cfg.checkpoint, cfg.duals, cfg.dataset.path})
        if (p && !fs::exists(*p)) throw ConfigError("file not found: " + p->string());
    return cfg;
}

void print_metrics(std::ostream& out, const char* label, const MetricsRecord& m) {
    out << label << ": eq_mean=" << m.eq_mean_mismatch << " eq_max=" << m.eq_max_mismatch
        << " eq_viol=" << m.eq_viol_num << " ineq_mean=" << m.ineq_mean_mismatch << " ineq_max=" << m.ineq_max_mismatch
        << " ineq_viol=" << m.ineq_viol_num << " cost=" << m.objective_cost << " gap%=" << m.objective_gap_pct
        << '\n';
}

int cmd_parse(const Options& o, std::ostream& out) {
    const RawCase rc = load_matpower_file(o.case_path);
    const GridModel grid = build_grid(rc);
    out << grid.n_bus << " buses, " << grid.n_gens() << " generators, " << grid.n_branches() << " branches, n="
        << grid.partition.n() << ", m=" << grid.partition.m() << '\n';
    return kExitOk;
}

int cmd_pf(const Options& o, std::ostream& out) {
    const RawCase rc = load_matpower_file(o.case_path);
    const GridModel grid = build_grid(rc);
    const Eigen::VectorXd x = nominal_prediction(grid);
    const Eigen::VectorXd& d = grid.nominal_load;
    SolveResult r;
    if (o.solver == "nr") {
        r = newton_solve(grid, x, d, o.tol, o.max_iter);
    } else {
        const FdpfFactors factors = build_fdpf_matrices(grid);
        if (o.solver == "fdpf") {
            r = fdpf_solve(grid, factors, x, d, o.tol, o.max_iter);
        } else {
            SolverConfig cfg;
            cfg.guide_iterations = o.kg;
            cfg.refinement = o.refine == "nr" ? RefinementKind::SingleNR : RefinementKind::KStepFDPF;
            cfg.refinement_iterations = o.kr_set ? o.kr : (cfg.refinement == RefinementKind::SingleNR ? 1 : 4);
            cfg.tolerance = o.tol;
            cfg.validate();
            r = hybrid_solve(grid, factors, x, d, cfg);
        }
    }
    out << std::scientific << std::setprecision(3);
    for (std::size_t k = 0; k < r.trace.size(); ++k) out << "iter " << (k + 1) << " mismatch " << r.trace[k] << '\n';
    if (r.diverged) {
        out << "diverged after " << r.iterations_used << " iterations\n";
        return kExitDomainError;
    }
    out << (r.converged ? "converged" : "not converged") << " after " << r.iterations_used
        << " iterations, final mismatch " << r.final_mismatch_inf_norm << '\n';
    return r.converged ? kExitOk : kExitDomainError;
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
    const RawCase rc = load_matpower_file(cfg.case_path);
    const LoadDataset ds = make_dataset(cfg, rc);
    write_dataset_csv(ds, rc, dir / "dataset.csv");
    out << "wrote " << ds.size() << " samples (" << ds.train.size() << " train, " << ds.test.size() << " test) to "
        << (dir / "dataset.csv").string() << '\n';
    return kExitOk;
}

void write_train_log(const TrainHistory& h, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "epoch,lagrangian,objective,ineq_penalty,eq_penalty,lambda_l1,lambda_max,nu_l1,nu_max,skipped\n"
      << std::setprecision(17);
    for (std::size_t e = 0; e < h.epochs(); ++e) {
        const auto& l = h.loss[e];
        const auto& d = h.duals[e];
        f << (e + 1) << ',' << l.lagrangian << ',' << l.objective << ',' << l.ineq_penalty << ',' << l.eq_penalty
          << ',' << d.lambda_l1 << ',' << d.lambda_max << ',' << d.nu_l1 << ',' << d.nu_max << ',' << h.skipped[e]
          << '\n';
    }
}

int cmd_train(const RunConfig& cfg, const fs::path& dir, bool verbose, std::ostream& out) {
    const RawCase rc = load_matpower_file(cfg.case_path);
    const GridModel grid = build_grid(rc);
    const FdpfFactors factors = build_fdpf_matrices(grid);
    const LoadDataset ds = make_dataset(cfg, rc);
    std::optional<ReferenceSet> refs;
    if (cfg.references) {
        refs = load_reference_solutions(*cfg.references);
        validate_references(*refs, ds);
    }
    const TrainResult res = primal_dual_train(
        grid, factors, ds, cfg.train, refs ? &*refs : nullptr, [&](int epoch, const TrainHistory& h) {
            if (verbose || epoch == cfg.train.epochs()) {
                out << "epoch " << epoch << ' ';
                print_metrics(out, "test", h.test.back());
            }
        });
    write_metrics_csv(res.history.train, dir / "metrics_train.csv");
    write_metrics_csv(res.history.test, dir / "metrics_test.csv");
    write_train_log(res.history, dir / "train_log.csv");
    save_checkpoint(res.params, grid.partition.fingerprint(), dir / "checkpoint.json");
    save_duals(res.duals, dir / "duals.json");
    out << "wrote checkpoint and metrics to " << dir.string() << '\n';
    return kExitOk;
}

MlpParams checkpoint_or_throw(const RunConfig& cfg, const GridModel& grid) {
    if (!cfg.checkpoint) throw ConfigError("this subcommand needs a checkpoint (config 'checkpoint' or --checkpoint)");
    return load_checkpoint(*cfg.checkpoint, grid.partition.fingerprint());
}

int cmd_eval(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
    const RawCase rc = load_matpower_file(cfg.case_path);
    const GridModel grid = build_grid(rc);
    const FdpfFactors factors = build_fdpf_matrices(grid);
    const MlpParams params = checkpoint_or_throw(cfg, grid);
    const LoadDataset ds = make_dataset(cfg, rc);
    std::optional<ReferenceSet> refs;
    if (cfg.references) refs = load_reference_solutions(*cfg.references);
    const EvalResult r =
        evaluate(params, grid, factors, ds, ds.test, refs ? &*refs : nullptr, cfg.train.solver, cfg.train.workers);
    write_metrics_csv({r.metrics}, dir / "eval_metrics.csv");
    print_metrics(out, "test", r.metrics);
    out << r.evaluated << " evaluated, " << r.failed.size() << " failed\n";
    return kExitOk;
}

int cmd_constants(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
    const RawCase rc = load_matpower_file(cfg.case_path);
    const GridModel grid = build_grid(rc);
    const FdpfFactors factors = build_fdpf_matrices(grid);
    const MlpParams params = checkpoint_or_throw(cfg, grid);
    const DualState duals = cfg.duals ? load_duals(*cfg.duals, grid) : DualState::zeros(grid);
    const LoadDataset ds = make_dataset(cfg, rc);
    std::vector<Eigen::VectorXd> samples;
    for (std::size_t k = 0; k < std::min(cfg.constants.samples, ds.test.size()); ++k)
        samples.push_back(ds.samples[ds.test[k]]);
    const auto rows = alignment_report(params, grid, factors, samples, duals, cfg.train.solver, cfg.constants.k_r,
                                       cfg.constants.stencil, cfg.train.workers);
    write_alignment_csv(rows, dir / "alignment.csv");

    std::ofstream f(dir / "constants.csv");
    if (!f) throw IoError("cannot write constants.csv");
    f << "K_R,name,mean,std\n" << std::setprecision(10);
    for (const auto& r : rows) {
        const auto& c = r.constants;
        const std::pair<const char*, MeanStd> items[] = {
            {"rho", c.rho},         {"L_T", c.L_T},         {"L_J", c.L_J}, {"L_x", c.L_x},
            {"L_z", c.L_z},         {"C_z", c.C_z},         {"sigma_J", c.sigma_J},
            {"C_g", c.C_g},         {"sigma_A", c.sigma_A}, {"d_0", c.d_0}};
        for (const auto& [name, v] : items) f << r.k_r << ',' << name << ',' << v.mean << ',' << v.std << '\n';
        f << r.k_r << ",C_1," << c.C_1 << ",0\n";
    }
    out << std::setprecision(4);
    for (const auto& r : rows)
        out << "K_R=" << r.k_r << " cosine=" << r.cosine.mean << " relerr=" << r.relerr.mean
            << " rho=" << r.constants.rho.mean << " eps_k=" << r.constants.eps_k << " bound=" << r.constants.bound
            << '\n';
    return kExitOk;
}

// Oracle suite over the hand-derived derivatives.
int cmd_grad_check(const Options& o, std::ostream& out) {
    constexpr double kLimit = 1e-4;
    const RawCase rc = load_matpower_file(o.case_path);
    const GridModel grid = build_grid(rc);
    const FdpfFactors factors = build_fdpf_matrices(grid);
    const Eigen::VectorXd x = nominal_prediction(grid);
    const Eigen::VectorXd& d = grid.nominal_load;
    const SolveResult exact = newton_solve(grid, x, d, 1e-12, 30);
    if (!exact.converged) throw DivergenceError("nominal power flow did not converge");
    const Eigen::VectorXd& zs = exact.z_star;

    std::vector<std::pair<std::string, double>> results;
    const Eigen::MatrixXd jh = exact_implicit_jacobian_h(grid, zs, x, d);
    results.emplace_back("exact_via_h vs exact_via_T", relative_error(exact_implicit_jacobian_T(grid, factors, zs, x, d), jh));
    const Eigen::MatrixXd fd_solve = finite_diff_jacobian(
        [&](const Eigen::VectorXd& xx) { return newton_solve(grid, xx, d, 1e-13, 30).z_star; }, x, 1e-6);
    results.emplace_back("exact_via_h vs finite differences", relative_error(jh, fd_solve));

    for (const auto kind : {RefinementKind::KStepFDPF, RefinementKind::SingleNR}) {
        SolverConfig cfg;
        cfg.refinement = kind;
        cfg.guide_iterations = kind == RefinementKind::SingleNR ? 9 : 8;
        cfg.refinement_iterations = kind == RefinementKind::SingleNR ? 1 : 4;
        const SolveResult s = hybrid_solve(grid, factors, x, d, cfg);
        const std::string tag = kind == RefinementKind::SingleNR ? "single NR" : "K-step FDPF";
        const Eigen::MatrixXd jk = kstep_jacobian(grid, factors, s.z_entry, x, d, cfg.refinement_iterations, kind);
        const Eigen::MatrixXd fd = finite_diff_jacobian(
            [&](const Eigen::VectorXd& xx) {
                if (kind == RefinementKind::SingleNR) {
                    // frozen Jacobian: the Newton matrix stays at (z_entry, x)
                    const Eigen::MatrixXd jz = pf_jacobian_z(grid, s.z_entry, x);
                    return Eigen::VectorXd(s.z_entry - jz.lu().solve(completion_residual(grid, s.z_entry, xx, d)));
                }
                const auto inputs = replay_refinement(grid, factors, s.z_entry, xx, d, cfg.refinement_iterations, kind);
                return fdpf_step(grid, factors, inputs.back(), xx, d);
            },
            x, 1e-6);
        results.emplace_back(tag + " Jacobian vs finite differences", relative_error(jk, fd));
        std::mt19937_64 rng(o.seed_set ? o.seed : 11);
        std::normal_distribution<double> normal;
        Eigen::VectorXd cot(jk.rows());
        for (auto& e : cot) e = normal(rng);
        const Eigen::VectorXd vjp = refinement_vjp(grid, factors, s.refinement_inputs, x, d, kind, cot);
        const Eigen::VectorXd dense = jk.transpose() * cot;
        results.emplace_back(tag + " VJP vs materialized product", relative_error(vjp, dense));
    }

    // end-to-end parameter gradient through the exact layer
    const std::vector<int> widths{static_cast<int>(2 * grid.n_bus), 16, static_cast<int>(grid.partition.m())};
    MlpParams params = init_mlp(widths, o.seed_set ? o.seed : 5);
    fit_standardizer(params, {d, 0.9 * d, 1.1 * d});
    DualState duals = DualState::zeros(grid);
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (auto& e : duals.lambda) e = u(rng);
    for (auto& e : duals.nu) e = u(rng);
    duals.objective_scale = 1e-4;
    SolverConfig nr;
    nr.guide_iterations = 9;
    nr.refinement = RefinementKind::SingleNR;
    nr.refinement_iterations = 1;
    const ForwardRecord rec = forward_full(params, grid, factors, d, nr);
    const Eigen::VectorXd grad = parameter_gradient(rec, params, duals, grid, factors, nr, GradientMode::Exact);
    auto loss = [&](const MlpParams& p) {
        const Eigen::VectorXd xx = decode_prediction(mlp_forward(p, d), grid);
        const SolveResult s = newton_solve(grid, xx, d, 1e-13, 30);
        return loss_partials(grid, xx, s.z_star, d, duals).value;
    };
    std::normal_distribution<double> normal;
    double worst = 0.0;
    for (int t = 0; t < 8; ++t) {
        Eigen::VectorXd v(params.size());
        for (auto& e : v) e = normal(rng);
        v.normalize();
        const double h = 1e-5;
        MlpParams a = params, b = params;
        a.flat += h * v;
        b.flat -= h * v;
        const double fd = (loss(a) - loss(b)) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - grad.dot(v)) / std::max(std::abs(fd), 1e-8));
    }
    results.emplace_back("parameter gradient vs finite differences", worst);

    bool ok = true;
    out << std::scientific << std::setprecision(3);
    for (const auto& [name, err] : results) {
        const bool pass = err <= kLimit;
        ok = ok && pass;
        out << (pass ? "ok   " : "FAIL ") << name << ": max relative error " << err << '\n';
    }
    return ok ? kExitOk : kExitDomainError;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Optimal power flow learning with an embedded power-flow layer", "opflayer"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--out", o.out_dir, "output directory (default: $OPFLAYER_OUT or ./opflayer_out)");
    auto* seed_opt = app.add_option("--seed", o.seed, "override the training seed");
    app.add_option("--workers", o.workers, "worker threads (default: available cores)")->check(CLI::PositiveNumber);
    app.add_flag("-v,--verbose", o.verbose, "log every epoch");

    auto* parse = app.add_subcommand("parse", "print element counts and partition sizes");
    parse->add_option("case", o.case_path, "MATPOWER case file")->required()->check(CLI::ExistingFile);

    auto* pf = app.add_subcommand("pf", "solve the nominal power flow and print the mismatch trace");
    pf->add_option("case", o.case_path, "MATPOWER case file")->required()->check(CLI::ExistingFile);
    pf->add_option("--solver", o.solver)->check(CLI::IsMember({"nr", "fdpf", "hybrid"}));
    pf->add_option("--kg", o.kg, "guide FDPF iterations")->check(CLI::NonNegativeNumber);
    auto* kr_opt = pf->add_option("--kr", o.kr, "refinement iterations")->check(CLI::PositiveNumber);
    pf->add_option("--refine", o.refine)->check(CLI::IsMember({"nr", "fdpf"}));
    pf->add_option("--tol", o.tol, "mismatch tolerance")->check(CLI::PositiveNumber);
    pf->add_option("--max-iter", o.max_iter, "iteration cap for nr and fdpf")->check(CLI::PositiveNumber);

    std::vector<CLI::App*> config_cmds;
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"gen-data", "generate the load dataset"},
             {"train", "primal-dual training"},
             {"eval", "evaluate a checkpoint on the test split"},
             {"estimate-constants", "gradient alignment and bound constants"}}) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
        if (name == "eval" || name == "estimate-constants")
            sub->add_option("--checkpoint", o.checkpoint, "checkpoint overriding the config")
                ->check(CLI::ExistingFile);
        config_cmds.push_back(sub);
    }
    auto* grad = app.add_subcommand("grad-check", "run the derivative oracle suite");
    grad->add_option("case", o.case_path, "MATPOWER case file")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    o.seed_set = seed_opt->count() > 0;
    o.kr_set = kr_opt->count() > 0;

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "parse" || name == "pf" || name == "grad-check") {
            const fs::path dir = output_directory(o, std::nullopt);
            write_manifest(dir, name, argc, argv, json{{"case", o.case_path}});
            if (name == "parse") return cmd_parse(o, out);
            if (name == "pf") return cmd_pf(o, out);
            return cmd_grad_check(o, out);
        }
        const RunConfig cfg = load_config(o);
        const fs::path dir = output_directory(o, cfg.output_dir);
        write_manifest(dir, name, argc, argv, to_json(cfg));
        if (name == "gen-data") return cmd_gen_data(cfg, dir, out);
        if (name == "train") return cmd_train(cfg, dir, o.verbose, out);
        if (name == "eval") return cmd_eval(cfg, dir, out);
        return cmd_constants(cfg, dir, out);
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitDomainError;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitDomainError;
    }
}

}  // namespace opflayer
