// Batch driver: simulate -> preprocess -> estimate -> restore -> evaluate
// over the config's (snr, n, noise) grid, with per-stage artifacts and a
// stage-status report.  Every output is deterministic for a fixed seed.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <cryocontrast/checkpoint.hpp>
#include <cryocontrast/config.hpp>
#include <cryocontrast/metrics.hpp>
#include <cryocontrast/mrc.hpp>
#include <cryocontrast/preprocess.hpp>
#include <cryocontrast/restore.hpp>
#include <cryocontrast/simulate.hpp>

namespace fs = std::filesystem;
using namespace cryocontrast;

namespace {

struct GridPoint {
    double snr = 1.0;
    int n = 0;
    NoiseModel::Kind kind = NoiseModel::Kind::white;

    std::string noise_name() const {
        return kind == NoiseModel::Kind::white ? "white" : "colored";
    }
    std::string name() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%g", snr);
        return noise_name() + "_snr" + buf + "_n" + std::to_string(n);
    }
};

std::vector<GridPoint> grid_points(const ExperimentConfig& cfg) {
    std::vector<GridPoint> pts;
    for (NoiseModel::Kind kind : cfg.grid.noise)
        for (double snr : cfg.grid.snr)
            for (int n : cfg.grid.n) pts.push_back({snr, n, kind});
    return pts;
}

/// Appended after every stage so partial progress survives a failure.
struct StageLog {
    nlohmann::json stages = nlohmann::json::array();
    bool ok = true;
    fs::path path;

    void record(const std::string& stage, const std::string& point,
                const std::string& status, const std::string& message = "") {
        nlohmann::json e{{"stage", stage}, {"grid_point", point}, {"status", status}};
        if (!message.empty()) e["message"] = message;
        stages.push_back(std::move(e));
        if (status != "ok") ok = false;
        write();
    }

    void write() const {
        nlohmann::json j{{"schema_version", 1}, {"ok", ok}, {"stages", stages}};
        std::ofstream out(path);
        out << j.dump(2) << '\n';
    }
};

struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-point working state, loaded lazily so each subcommand can run on its
/// own against the on-disk artifacts of the previous stages.
struct PointContext {
    const ExperimentConfig& cfg;
    const FBBasis& basis;
    GridPoint point;
    fs::path dir;
    int threads = 0;

    std::optional<MrcStack> stack;
    std::optional<DatasetManifest> manifest;
    std::optional<SyntheticDataset> truth;  // recomputed from the config

    struct Whitened {
        Eigen::MatrixXd coeffs;  // n x real_dim, original image order
        std::vector<BlockOperator> ops;
        std::vector<int> assignments;
        std::vector<NoisePSD> psds;
        std::vector<Image> processed;  // normalized + subtracted, original order
        std::vector<double> scales;    // per-image corner std divided out
        double sigma2 = 1.0;
    };
    std::optional<Whitened> whitened;

    PointContext(const ExperimentConfig& c, const FBBasis& b, const GridPoint& p,
                 int t)
        : cfg(c), basis(b), point(p), dir(fs::path(c.output_dir) / p.name()),
          threads(t) {}

    const MrcStack& load_stack() {
        if (!stack) {
            const fs::path p = dir / "dataset.mrc";
            if (!fs::exists(p))
                throw StageError("missing " + p.string() + " (run simulate first)");
            stack = read_mrc_stack(p.string());
        }
        return *stack;
    }

    const DatasetManifest& load_manifest() {
        if (!manifest) {
            const fs::path p = dir / "manifest.json";
            if (!fs::exists(p))
                throw StageError("missing " + p.string() + " (run simulate first)");
            std::ifstream in(p);
            nlohmann::json j;
            in >> j;
            manifest = manifest_from_json(j);
            if (manifest->n != int(load_stack().images.size()))
                throw StageError("manifest n=" + std::to_string(manifest->n) +
                                 " does not match stack frame count " +
                                 std::to_string(load_stack().images.size()));
        }
        return *manifest;
    }

    const SyntheticDataset& load_truth() {
        if (!truth) {
            const DatasetManifest& m = load_manifest();
            truth = make_dataset(basis, cfg.phantom, m.n, int(m.ctf.size()), m.snr,
                                 m.noise_kind == "white" ? NoiseModel::Kind::white
                                                         : NoiseModel::Kind::colored,
                                 m.seed, CTFParams{1.0}, true, threads);
        }
        return *truth;
    }

    /// The corner pipeline per defocus group, reassembled in image order.
    const Whitened& load_whitened() {
        if (whitened) return *whitened;
        const MrcStack& s = load_stack();
        const DatasetManifest& m = load_manifest();
        const int D = int(m.ctf.size());

        Whitened w;
        w.assignments = m.groups;
        w.coeffs.resize(m.n, basis.real_dim());
        w.processed.resize(std::size_t(m.n));
        w.scales.resize(std::size_t(m.n));
        w.ops.resize(std::size_t(D));
        w.psds.reserve(std::size_t(D));
        const CornerMask mask = corner_mask(basis.size());
        for (int g = 0; g < D; ++g) {
            std::vector<Image> group_images;
            std::vector<int> members;
            for (int i = 0; i < m.n; ++i)
                if (m.groups[std::size_t(i)] == g) {
                    group_images.push_back(s.images[std::size_t(i)]);
                    members.push_back(i);
                }
            if (group_images.empty())
                throw StageError("defocus group " + std::to_string(g) + " is empty");
            const PreprocessedGroup pg = preprocess_group(
                group_images, basis, m.ctf[std::size_t(g)], g, threads);
            w.psds.push_back(pg.psd);
            w.ops[std::size_t(g)] = pg.whitened.whitened_ctf;
            for (std::size_t r = 0; r < members.size(); ++r) {
                w.coeffs.row(members[r]) = pg.whitened.coeffs.row(Eigen::Index(r));
                w.processed[std::size_t(members[r])] = pg.images[r];
                w.scales[std::size_t(members[r])] = corner_std(group_images[r], mask);
            }
        }
        whitened = std::move(w);
        return *whitened;
    }
};

void require_finite(const Eigen::VectorXd& v, const std::string& what) {
    if (!v.allFinite()) throw StageError(what + " contains a non-finite value");
}

Eigen::VectorXd manifest_c_true(const DatasetManifest& m) {
    if (m.c_true.empty()) return Eigen::VectorXd();
    return Eigen::Map<const Eigen::VectorXd>(m.c_true.data(),
                                             Eigen::Index(m.c_true.size()));
}

// ---------------------------------------------------------------- stages ---

void stage_simulate(PointContext& ctx) {
    fs::create_directories(ctx.dir);
    const SyntheticDataset ds =
        make_dataset(ctx.basis, ctx.cfg.phantom, ctx.point.n,
                     ctx.cfg.num_defocus_groups, ctx.point.snr, ctx.point.kind,
                     ctx.cfg.seed, CTFParams{1.0}, true, ctx.threads);

    std::vector<Image> frames;
    frames.reserve(std::size_t(ctx.point.n));
    for (int i = 0; i < ctx.point.n; ++i)
        frames.push_back(unflatten(ds.images.row(i).transpose(), ds.L));
    write_mrc_stack(frames, (ctx.dir / "dataset.mrc").string(), ctx.cfg.pixel_size);

    DatasetManifest m;
    m.stack = "dataset.mrc";
    m.n = ctx.point.n;
    m.L = ds.L;
    m.pixel_size = ctx.cfg.pixel_size;
    m.seed = ctx.cfg.seed;
    m.noise_kind = ctx.point.noise_name();
    m.sigma2 = ds.sigma2;
    m.snr = ctx.point.snr;
    for (Eigen::Index g = 0; g < ds.defoci.size(); ++g) {
        CTFParams p{ds.defoci[g]};
        p.pixel_size = ctx.cfg.pixel_size;
        m.ctf.push_back(p);
    }
    m.groups = ds.ctf_assignments;
    m.c_true.assign(ds.true_contrasts.data(),
                    ds.true_contrasts.data() + ds.true_contrasts.size());
    for (const Rotation& r : ds.rotations) m.rotations.push_back(r.m);
    m.validate();
    std::ofstream out(ctx.dir / "manifest.json");
    out << manifest_to_json(m).dump(2) << '\n';
    if (!out) throw StageError("cannot write manifest.json");
}

void stage_preprocess(PointContext& ctx) {
    const auto& w = ctx.load_whitened();
    write_mrc_stack(w.processed, (ctx.dir / "preprocessed.mrc").string(),
                    ctx.cfg.pixel_size);
    std::ofstream psd(ctx.dir / "psd.csv");
    write_psd_csv(psd, w.psds);
    if (!psd) throw StageError("cannot write psd.csv");
}

/// Block-0 slices of the whitened data, for the contrast-only path.
struct Block0Data {
    std::vector<BlockStack> ys;
    std::vector<BlockOperator> ops;
};

Block0Data block0_slice(const FBBasis& basis, const PointContext::Whitened& w) {
    Block0Data b;
    b.ys = make_block_stacks(w.coeffs, basis, 1);
    b.ops.reserve(w.ops.size());
    for (const BlockOperator& op : w.ops) {
        BlockOperator o;
        o.blocks = {op.blocks[0]};
        b.ops.push_back(std::move(o));
    }
    return b;
}

void write_contrasts(PointContext& ctx, const ContrastEstimates& est) {
    require_finite(est.c_hat, "contrast estimates (" + est.method + ")");
    std::ofstream out(ctx.dir / ("contrasts_" + est.method + ".csv"));
    write_contrast_csv(out, est.c_hat, ctx.load_manifest().groups,
                       manifest_c_true(ctx.load_manifest()), est.method);
    if (!out) throw StageError("cannot write contrasts_" + est.method + ".csv");
}

void write_block0_checkpoint(PointContext& ctx, const std::string& method,
                             const Eigen::MatrixXd& block0) {
    BlockCovariance cov;
    cov.blocks = {block0};
    const std::vector<int> ks{0};
    const fs::path bin = ctx.dir / ("cov_block0_" + method + ".bin");
    write_covariance_checkpoint(cov, ks, bin.string());
    if (ctx.basis.size() <= 32) {
        std::ofstream out(ctx.dir / ("cov_block0_" + method + ".json"));
        out << covariance_checkpoint_json(cov, ks).dump() << '\n';
    }
}

void stage_estimate(PointContext& ctx, const std::vector<std::string>& methods) {
    const auto& w = ctx.load_whitened();
    const OnesVector ones = ones_vector(ctx.basis);

    const bool want_cwf = std::count(methods.begin(), methods.end(), "cwf") > 0;
    const bool want_oracle = std::count(methods.begin(), methods.end(), "oracle") > 0;

    if (want_cwf) {
        const Block0Data b0 = block0_slice(ctx.basis, w);
        const MeanEstimate mean = estimate_mean(b0.ys, b0.ops, w.assignments);
        const CovarianceEstimate cov = estimate_covariance(
            b0.ys, b0.ops, w.assignments, mean, w.sigma2, ctx.cfg.solver);
        const ContrastEstimates est =
            estimate_contrasts(b0.ys, b0.ops, cov.cov, mean.mu, w.sigma2, ones,
                               w.assignments, "cwf");
        write_contrasts(ctx, est);
        write_block0_checkpoint(ctx, "cwf", cov.cov.blocks[0]);
    }
    for (const std::string& method : methods) {
        if (method != "gs" && method != "sdp") continue;
        const RefineMethod rm =
            method == "gs" ? RefineMethod::gs : RefineMethod::sdp;
        const std::vector<BlockStack> ys = make_block_stacks(w.coeffs, ctx.basis);
        const Algorithm1Result r = run_algorithm1(ys, w.ops, w.assignments, w.sigma2,
                                                  ctx.basis, rm, ctx.cfg.solver);
        ContrastEstimates est = r.contrasts;
        est.method = method;
        write_contrasts(ctx, est);
        write_block0_checkpoint(ctx, method, r.cov0_cx_refined);
    }
    if (want_oracle) {
        const SyntheticDataset& truth = ctx.load_truth();
        const std::vector<BlockStack> ys = make_block_stacks(w.coeffs, ctx.basis);
        const std::vector<BlockStack> clean =
            make_block_stacks(truth.true_clean_fb, ctx.basis);
        ContrastEstimates est =
            oracle_contrasts_clean(ys, clean, w.ops, w.assignments);
        est.method = "oracle";
        write_contrasts(ctx, est);
    }
}

void write_restored(PointContext& ctx, const RestoredImages& r) {
    if (!r.coeffs.allFinite())
        throw StageError("restored stack (" + r.method + ") has non-finite values");
    // The filter works on whitened data, so each coefficient row estimates the
    // clean signal divided by that image's corner std; undo it to get back to
    // the units of the input stack.
    const std::vector<double>& scales = ctx.load_whitened().scales;
    const Eigen::MatrixXd pixels = ctx.basis.evaluate_stack(r.coeffs, ctx.threads);
    std::vector<Image> frames;
    frames.reserve(std::size_t(pixels.rows()));
    for (Eigen::Index i = 0; i < pixels.rows(); ++i)
        frames.push_back(
            unflatten(scales[std::size_t(i)] * pixels.row(i).transpose(),
                      ctx.basis.size()));
    write_mrc_stack(frames, (ctx.dir / ("restored_" + r.method + ".mrc")).string(),
                    ctx.cfg.pixel_size);
}

void stage_restore(PointContext& ctx, const std::vector<std::string>& methods) {
    const auto& w = ctx.load_whitened();
    const std::vector<BlockStack> ys = make_block_stacks(w.coeffs, ctx.basis);

    if (std::count(methods.begin(), methods.end(), "cwf") > 0) {
        const PlainCwfResult r = run_plain_cwf(ys, w.ops, w.assignments, w.sigma2,
                                               ctx.basis, ctx.cfg.solver, ctx.threads);
        write_restored(ctx, r.restored);
        write_restored(ctx, r.restored_normalized);
    }
    for (const std::string& method : methods) {
        if (method != "gs" && method != "sdp") continue;
        const RefineMethod rm =
            method == "gs" ? RefineMethod::gs : RefineMethod::sdp;
        for (RestoreOption opt :
             {RestoreOption::normalization, RestoreOption::two_stage}) {
            const Algorithm2Result r =
                run_algorithm2(ys, w.ops, w.assignments, w.sigma2, ctx.basis, opt,
                               rm, ctx.cfg.solver, ctx.threads);
            write_restored(ctx, r.restored);
        }
    }
}

Eigen::VectorXd read_contrast_column(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw StageError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);  // header
    const bool with_truth = line.find(",c_true,") != std::string::npos;
    (void)with_truth;
    std::vector<double> vals;
    while (std::getline(in, line)) {
        // image_id,group_id,c_hat,...
        std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1);
        std::size_t p3 = line.find(',', p2 + 1);
        vals.push_back(std::stod(line.substr(p2 + 1, p3 - p2 - 1)));
    }
    return Eigen::Map<const Eigen::VectorXd>(vals.data(), Eigen::Index(vals.size()));
}

void stage_evaluate(PointContext& ctx, const std::vector<std::string>& methods,
                    MetricTable& table) {
    const DatasetManifest& m = ctx.load_manifest();
    const Eigen::VectorXd c_true = manifest_c_true(m);
    const SyntheticDataset& truth = ctx.load_truth();
    const std::string noise = ctx.point.noise_name();

    const auto add = [&](const std::string& method, const std::string& group,
                         const std::string& metric, double value) {
        table.add({method, ctx.point.snr, long(ctx.point.n), noise, group, metric,
                   value});
    };

    // Contrast accuracy, with defocus-group and contrast-decile breakdowns.
    std::vector<std::string> contrast_methods = methods;
    contrast_methods.push_back("trivial");
    for (const std::string& method : contrast_methods) {
        Eigen::VectorXd c_hat;
        if (method == "trivial") {
            c_hat = Eigen::VectorXd::Ones(m.n);
        } else {
            const fs::path p = ctx.dir / ("contrasts_" + method + ".csv");
            if (!fs::exists(p)) continue;
            c_hat = read_contrast_column(p);
        }
        if (c_true.size() == 0) continue;
        add(method, "all", "e_c", contrast_error(c_hat, c_true));

        Eigen::VectorXd abs_rel =
            ((c_hat - c_true).cwiseAbs().array() / c_true.array()).matrix();
        std::vector<double> defoci(m.ctf.size());
        for (std::size_t g = 0; g < m.ctf.size(); ++g)
            defoci[g] = m.ctf[g].defocus_um;
        const GroupBreakdown by_group = group_breakdown(abs_rel, m.groups, defoci);
        for (std::size_t g = 0; g < by_group.keys.size(); ++g)
            add(method, "d=" + detail::g17(by_group.keys[g]), "e_c",
                by_group.means[g]);
        const GroupBreakdown by_decile = contrast_decile_breakdown(abs_rel, c_true);
        for (std::size_t g = 0; g < by_decile.keys.size(); ++g)
            add(method, "c=" + detail::g17(by_decile.keys[g]), "e_c",
                by_decile.means[g]);
    }

    // Restoration accuracy against the clean projections.
    const int L = ctx.basis.size();
    const std::vector<std::string> tags{"cwf",     "cwf-norm", "gs-norm",
                                        "gs-2stage", "sdp-norm", "sdp-2stage"};
    for (const std::string& tag : tags) {
        const fs::path p = ctx.dir / ("restored_" + tag + ".mrc");
        if (!fs::exists(p)) continue;
        const MrcStack restored = read_mrc_stack(p.string());
        if (int(restored.images.size()) != m.n)
            throw StageError("restored_" + tag + ".mrc has wrong frame count");
        Eigen::MatrixXd rows(m.n, L * L);
        for (int i = 0; i < m.n; ++i)
            rows.row(i) = flatten(restored.images[std::size_t(i)]).transpose();
        add(tag, "all", "nrmse", nrmse_stack(rows, truth.clean_images, L));

        // Mean Fourier ring correlation over a fixed subsample.
        const int sample = std::min(m.n, 32);
        FrcCurve acc;
        for (int i = 0; i < sample; ++i) {
            const FrcCurve c =
                frc(restored.images[std::size_t(i)],
                    unflatten(truth.clean_images.row(i).transpose(), L));
            if (acc.value.size() == 0) {
                acc = c;
            } else {
                for (Eigen::Index r = 0; r < acc.value.size(); ++r)
                    acc.value[r] += c.value[r];
            }
        }
        for (int r : {L / 8, L / 4, L / 2 - 2})
            add(tag, "r=" + std::to_string(r), "frc",
                acc.value[r] / double(sample));
    }

    std::ofstream out(ctx.dir / "metrics.csv");
    MetricTable local;
    for (const MetricRow& r : table.rows)
        if (r.snr == ctx.point.snr && r.n == long(ctx.point.n) && r.noise == noise)
            local.add(r);
    local.write_csv(out);
    if (!out) throw StageError("cannot write metrics.csv");

    if (!table.all_finite())
        throw StageError("metric table contains a non-finite value");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrast estimation and restoration pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_override, method_filter, stage_limit;
    std::int64_t seed_override = -1;
    int threads = 0;

    app.add_option("--config", config_path, "experiment config (JSON)")->required();
    app.add_option("--seed", seed_override, "override the config seed");
    app.add_option("--out", out_override, "override the config output directory");
    app.add_option("--threads", threads,
                   "worker threads (0: CRYOCONTRAST_THREADS or hardware)");
    app.add_option("--method", method_filter, "restrict to one method")
        ->check(CLI::IsMember({"cwf", "gs", "sdp", "oracle"}));
    app.add_option("--stage", stage_limit, "with `all`: stop after this stage")
        ->check(CLI::IsMember(
            {"simulate", "preprocess", "estimate", "restore", "evaluate"}));

    CLI::App* cmd_simulate = app.add_subcommand("simulate", "generate phantom datasets");
    CLI::App* cmd_preprocess =
        app.add_subcommand("preprocess", "corner normalization, PSD, whitening");
    CLI::App* cmd_estimate = app.add_subcommand("estimate", "per-image contrasts");
    CLI::App* cmd_restore = app.add_subcommand("restore", "denoised stacks");
    CLI::App* cmd_evaluate = app.add_subcommand("evaluate", "metric tables");
    CLI::App* cmd_all = app.add_subcommand("all", "the full pipeline");
    for (CLI::App* sub : {cmd_simulate, cmd_preprocess, cmd_estimate, cmd_restore,
                          cmd_evaluate, cmd_all})
        sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    ExperimentConfig cfg;
    try {
        cfg = load_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }
    if (seed_override >= 0) cfg.seed = std::uint64_t(seed_override);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (threads == 0)
        if (const char* env = std::getenv("CRYOCONTRAST_THREADS"))
            threads = std::atoi(env);

    std::vector<std::string> methods = cfg.methods;
    if (!method_filter.empty()) methods = {method_filter};

    std::vector<std::string> stages;
    if (cmd_simulate->parsed()) stages = {"simulate"};
    if (cmd_preprocess->parsed()) stages = {"preprocess"};
    if (cmd_estimate->parsed()) stages = {"estimate"};
    if (cmd_restore->parsed()) stages = {"restore"};
    if (cmd_evaluate->parsed()) stages = {"evaluate"};
    if (cmd_all->parsed()) {
        stages = {"simulate", "preprocess", "estimate", "restore", "evaluate"};
        if (!stage_limit.empty()) {
            const auto it = std::find(stages.begin(), stages.end(), stage_limit);
            stages.erase(it + 1, stages.end());
        }
    }

    fs::create_directories(cfg.output_dir);
    StageLog log;
    log.path = fs::path(cfg.output_dir) / "stage_status.json";

    const FBBasis basis(cfg.basis_L, cfg.basis_r);
    MetricTable table;
    bool ran_evaluate = false;

    for (const GridPoint& point : grid_points(cfg)) {
        PointContext ctx(cfg, basis, point, threads);
        for (const std::string& stage : stages) {
            try {
                if (stage == "simulate") stage_simulate(ctx);
                else if (stage == "preprocess") stage_preprocess(ctx);
                else if (stage == "estimate") stage_estimate(ctx, methods);
                else if (stage == "restore") stage_restore(ctx, methods);
                else if (stage == "evaluate") {
                    stage_evaluate(ctx, methods, table);
                    ran_evaluate = true;
                }
                log.record(stage, point.name(), "ok");
            } catch (const std::exception& e) {
                log.record(stage, point.name(), "error", e.what());
                std::cerr << "stage " << stage << " failed at " << point.name()
                          << ": " << e.what() << '\n';
                return 1;
            }
        }
    }

    if (ran_evaluate) {
        std::ofstream out(fs::path(cfg.output_dir) / "metrics.csv");
        table.write_csv(out);
        if (!out || !table.all_finite()) {
            log.record("evaluate", "aggregate", "error",
                       "aggregate metrics not finite or not writable");
            return 1;
        }
    }
    return log.ok ? 0 : 1;
}
