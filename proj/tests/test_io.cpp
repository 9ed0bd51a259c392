#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <cryocontrast/checkpoint.hpp>
#include <cryocontrast/config.hpp>
#include <cryocontrast/metrics.hpp>
#include <cryocontrast/mrc.hpp>
#include <cryocontrast/restore.hpp>
#include <cryocontrast/rng.hpp>

namespace fs = std::filesystem;
using namespace cryocontrast;
using Catch::Approx;

namespace {

fs::path scratch_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "cryocontrast_io_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

Image random_image(int L, std::uint64_t seed, std::uint64_t stream) {
    Philox rng(seed, stream);
    Image img(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) img(i, j) = 3.0 * rng.normal() + 0.25;
    return img;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>(std::istreambuf_iterator<char>(in),
                             std::istreambuf_iterator<char>());
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    REQUIRE(out.good());
}

std::int32_t le_i32(const std::vector<char>& b, std::size_t off) {
    std::int32_t v = 0;
    std::memcpy(&v, b.data() + off, 4);
    return v;
}

float le_f32(const std::vector<char>& b, std::size_t off) {
    float v = 0;
    std::memcpy(&v, b.data() + off, 4);
    return v;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CRYOCONTRAST_CLI_PATH) + " " + args;
    const int status = std::system(cmd.c_str());
    return status < 0 ? status : (status >> 8) & 0xff;
}

}  // namespace

TEST_CASE("mrc stack round-trip is bit-exact for float32 data") {
    const int L = 17;
    std::vector<Image> stack{random_image(L, 9, 0), random_image(L, 9, 1),
                             random_image(L, 9, 2)};
    const fs::path path = scratch_dir() / "roundtrip.mrc";
    write_mrc_stack(stack, path.string(), 2.5);

    const MrcStack back = read_mrc_stack(path.string());
    REQUIRE(back.images.size() == 3);
    REQUIRE(back.pixel_size == Approx(2.5).margin(1e-6));
    for (std::size_t z = 0; z < 3; ++z) {
        REQUIRE(back.images[z].rows() == L);
        REQUIRE(back.images[z].cols() == L);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j)
                REQUIRE(back.images[z](i, j) ==
                        double(float(stack[z](i, j))));  // float32 is the format
    }

    SECTION("header fields sit at the pinned byte offsets") {
        const std::vector<char> bytes = slurp(path);
        REQUIRE(le_i32(bytes, 0) == L);       // NX
        REQUIRE(le_i32(bytes, 4) == L);       // NY
        REQUIRE(le_i32(bytes, 8) == 3);       // NZ
        REQUIRE(le_i32(bytes, 12) == 2);      // MODE
        REQUIRE(le_i32(bytes, 28) == L);      // MX
        REQUIRE(le_f32(bytes, 40) == float(L * 2.5));  // CELLA_x
        REQUIRE(le_f32(bytes, 52) == 90.0f);  // CELLB alpha
        REQUIRE(le_i32(bytes, 64) == 1);      // MAPC
        REQUIRE(le_i32(bytes, 92) == 0);      // NSYMBT
        REQUIRE(le_i32(bytes, 108) == 20140); // NVERSION
        REQUIRE(std::memcmp(bytes.data() + 208, "MAP ", 4) == 0);
        REQUIRE(std::uint8_t(bytes[212]) == 0x44);
        REQUIRE(std::uint8_t(bytes[213]) == 0x44);
        REQUIRE(bytes.size() == 1024 + 3u * L * L * 4);
    }

    SECTION("statistics fields hold min, max, and mean") {
        const std::vector<char> bytes = slurp(path);
        float mn = le_f32(bytes, 76), mx = le_f32(bytes, 80), mean = le_f32(bytes, 84);
        double lo = stack[0](0, 0), hi = lo, sum = 0.0;
        for (const Image& img : stack) {
            lo = std::min(lo, img.minCoeff());
            hi = std::max(hi, img.maxCoeff());
            sum += img.sum();
        }
        REQUIRE(mn == Approx(lo).margin(1e-5));
        REQUIRE(mx == Approx(hi).margin(1e-5));
        REQUIRE(mean == Approx(sum / (3.0 * L * L)).margin(1e-5));
    }

    SECTION("writer rejects empty and ragged stacks") {
        REQUIRE_THROWS_AS(write_mrc_stack({}, (scratch_dir() / "e.mrc").string()),
                          std::invalid_argument);
        std::vector<Image> ragged{random_image(8, 1, 0), random_image(9, 1, 1)};
        REQUIRE_THROWS_AS(
            write_mrc_stack(ragged, (scratch_dir() / "r.mrc").string()),
            std::invalid_argument);
    }
}

TEST_CASE("mrc writer records zero statistics for a zero image") {
    const fs::path path = scratch_dir() / "zeros.mrc";
    write_mrc_stack({Image::Zero(12, 12)}, path.string());
    const std::vector<char> bytes = slurp(path);
    REQUIRE(le_f32(bytes, 76) == 0.0f);  // DMIN
    REQUIRE(le_f32(bytes, 80) == 0.0f);  // DMAX
    REQUIRE(le_f32(bytes, 84) == 0.0f);  // DMEAN
    const MrcStack back = read_mrc_stack(path.string());
    REQUIRE(back.images[0].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mrc reader rejects bad files with distinct errors") {
    const int L = 17;
    const fs::path good = scratch_dir() / "good.mrc";
    write_mrc_stack({random_image(L, 3, 0), random_image(L, 3, 1),
                     random_image(L, 3, 2)},
                    good.string());
    const std::vector<char> bytes = slurp(good);

    SECTION("unsupported mode") {
        std::vector<char> bad = bytes;
        bad[12] = 1;
        const fs::path p = scratch_dir() / "mode1.mrc";
        dump(p, bad);
        REQUIRE_THROWS_AS(read_mrc_stack(p.string()), MrcUnsupportedMode);
        REQUIRE_THROWS_WITH(read_mrc_stack(p.string()),
                            Catch::Matchers::ContainsSubstring("mode 1"));
    }

    SECTION("bad magic") {
        std::vector<char> bad = bytes;
        std::memcpy(bad.data() + 208, "XXXX", 4);
        const fs::path p = scratch_dir() / "magic.mrc";
        dump(p, bad);
        REQUIRE_THROWS_AS(read_mrc_stack(p.string()), MrcBadMagic);
    }

    SECTION("truncated data names expected and actual byte counts") {
        const std::size_t frame = std::size_t(L) * L * 4;
        std::vector<char> bad(bytes.begin(), bytes.begin() + 1024 + 2 * frame);
        const fs::path p = scratch_dir() / "trunc.mrc";
        dump(p, bad);
        REQUIRE_THROWS_AS(read_mrc_stack(p.string()), MrcTruncated);
        REQUIRE_THROWS_WITH(
            read_mrc_stack(p.string()),
            Catch::Matchers::ContainsSubstring(std::to_string(3 * frame)) &&
                Catch::Matchers::ContainsSubstring(std::to_string(2 * frame)));
    }

    SECTION("truncated header") {
        std::vector<char> bad(bytes.begin(), bytes.begin() + 100);
        const fs::path p = scratch_dir() / "hdr.mrc";
        dump(p, bad);
        REQUIRE_THROWS_AS(read_mrc_stack(p.string()), MrcTruncated);
    }

    SECTION("missing file") {
        REQUIRE_THROWS_AS(read_mrc_stack((scratch_dir() / "nope.mrc").string()),
                          std::runtime_error);
    }
}

TEST_CASE("covariance checkpoint round-trips and exports json") {
    Philox rng(21, 0);
    BlockCovariance cov;
    const std::vector<int> dims{3, 2, 1};
    for (int d : dims) {
        Eigen::MatrixXd m(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
        cov.blocks.push_back(0.5 * (m + m.transpose()));
    }
    const std::vector<int> ks{0, 1, 5};
    const fs::path path = scratch_dir() / "cov.bin";
    write_covariance_checkpoint(cov, ks, path.string());

    const CovarianceCheckpoint back = read_covariance_checkpoint(path.string());
    REQUIRE(back.ks == ks);
    REQUIRE(back.cov.blocks.size() == 3);
    for (std::size_t b = 0; b < 3; ++b)
        REQUIRE(back.cov.blocks[b] == cov.blocks[b]);  // doubles stored raw

    SECTION("json export mirrors the blocks row-major") {
        const nlohmann::json j = covariance_checkpoint_json(cov, ks);
        REQUIRE(j.at("format") == "cryocontrast-covariance");
        REQUIRE(j.at("version") == 1);
        REQUIRE(j.at("blocks").size() == 3);
        REQUIRE(j.at("blocks")[0].at("k") == 0);
        REQUIRE(j.at("blocks")[0].at("dim") == 3);
        REQUIRE(j.at("blocks")[0].at("data").size() == 9);
        REQUIRE(double(j.at("blocks")[0].at("data")[1]) == cov.blocks[0](0, 1));
        REQUIRE(double(j.at("blocks")[2].at("data")[0]) == cov.blocks[2](0, 0));
    }

    SECTION("truncated checkpoint is rejected") {
        std::vector<char> bytes = slurp(path);
        bytes.resize(bytes.size() - 9);
        const fs::path p = scratch_dir() / "cov_trunc.bin";
        dump(p, bytes);
        REQUIRE_THROWS_WITH(read_covariance_checkpoint(p.string()),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }

    SECTION("wrong magic is rejected") {
        std::vector<char> bytes = slurp(path);
        bytes[0] = 'X';
        const fs::path p = scratch_dir() / "cov_magic.bin";
        dump(p, bytes);
        REQUIRE_THROWS_AS(read_covariance_checkpoint(p.string()),
                          std::runtime_error);
    }
}

TEST_CASE("config parser accepts a full config and fills defaults") {
    const nlohmann::json j = {
        {"schema_version", 1},
        {"seed", 11},
        {"output_dir", "runs/a"},
        {"basis", {{"L", 48}, {"r", 0.4}}},
        {"num_defocus_groups", 7},
        {"pixel_size", 1.2},
        {"grid",
         {{"snr", {0.5, 2.0}}, {"n", {100, 200}}, {"noise", {"white", "colored"}}}},
        {"methods", {"cwf", "gs"}},
        {"solver", {{"cg_tol", 1e-6}, {"cg_maxiter", 50}, {"shrinkage", false}}},
    };
    const ExperimentConfig cfg = parse_config(j);
    REQUIRE(cfg.seed == 11);
    REQUIRE(cfg.output_dir == "runs/a");
    REQUIRE(cfg.basis_L == 48);
    REQUIRE(cfg.basis_r == 0.4);
    REQUIRE(cfg.num_defocus_groups == 7);
    REQUIRE(cfg.pixel_size == 1.2);
    REQUIRE(cfg.grid.snr == std::vector<double>{0.5, 2.0});
    REQUIRE(cfg.grid.n == std::vector<int>{100, 200});
    REQUIRE(cfg.grid.noise.size() == 2);
    REQUIRE(cfg.methods == std::vector<std::string>{"cwf", "gs"});
    REQUIRE(cfg.solver.cg_tol == 1e-6);
    REQUIRE(cfg.solver.cg_maxiter == 50);
    REQUIRE_FALSE(cfg.solver.shrink);
    REQUIRE_FALSE(cfg.phantom.blobs.empty());  // default phantom

    SECTION("defaults cover every optional section") {
        const ExperimentConfig d = parse_config({{"schema_version", 1}});
        REQUIRE(d.basis_L == 64);
        REQUIRE(d.basis_r == 0.5);
        REQUIRE(d.num_defocus_groups == 10);
        REQUIRE(d.solver.cg_tol == 1e-8);
        REQUIRE(d.solver.cg_maxiter == 300);
        REQUIRE(d.solver.shrink);
        REQUIRE(d.methods == ExperimentConfig::supported_methods());
        REQUIRE(d.grid.snr == std::vector<double>{1.0});
        REQUIRE(d.grid.n == std::vector<int>{1000});
    }

    SECTION("phantom sections override the default volume") {
        nlohmann::json p = j;
        p["phantom"] = {{"blobs",
                         {{{"center", {0.1, 0.0, -0.2}},
                           {"weight", 2.0},
                           {"std", 0.15}}}}};
        const ExperimentConfig cfg2 = parse_config(p);
        REQUIRE(cfg2.phantom.blobs.size() == 1);
        REQUIRE(cfg2.phantom.blobs[0].weight == 2.0);
        REQUIRE(cfg2.phantom.blobs[0].center.z() == -0.2);
    }
}

TEST_CASE("config validation lists every violation at once") {
    const nlohmann::json bad = {
        {"schema_version", 2},
        {"seed", -3},
        {"output_dir", ""},
        {"basis", {{"L", 15}, {"r", 0.9}}},
        {"num_defocus_groups", 0},
        {"pixel_size", -1.0},
        {"grid", {{"snr", {0.5, -1.0}}, {"n", {0}}, {"noise", {"white", "pink"}}}},
        {"methods", {"cwf", "bogus"}},
        {"solver", {{"cg_tol", -1.0}, {"cg_maxiter", 0}, {"shrinkage", 3}}},
        {"extra_key", true},
    };
    try {
        parse_config(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(e.violations.size() >= 12);
        const std::string msg = e.what();
        for (const char* needle :
             {"schema_version", "seed", "output_dir", "basis: L", "basis: r",
              "num_defocus_groups", "pixel_size", "snr", "n must be",
              "noise entries", "bogus", "cg_tol", "cg_maxiter", "shrinkage",
              "unknown key \"extra_key\""})
            REQUIRE_THAT(msg, Catch::Matchers::ContainsSubstring(needle));
    }

    SECTION("load_config propagates the violation list") {
        const fs::path p = scratch_dir() / "bad_config.json";
        std::ofstream(p) << bad.dump();
        REQUIRE_THROWS_AS(load_config(p.string()), ConfigError);
    }

    SECTION("malformed json is reported") {
        const fs::path p = scratch_dir() / "mangled.json";
        std::ofstream(p) << "{ not json";
        REQUIRE_THROWS_AS(load_config(p.string()), std::runtime_error);
    }
}

TEST_CASE("manifest round-trips through json") {
    DatasetManifest m;
    m.stack = "dataset.mrc";
    m.n = 4;
    m.L = 8;
    m.pixel_size = 1.5;
    m.seed = 99;
    m.noise_kind = "colored";
    m.sigma2 = 0.125;
    m.snr = 0.5;
    for (double d : {1.0, 2.5}) {
        CTFParams p{d};
        p.pixel_size = 1.5;
        m.ctf.push_back(p);
    }
    m.groups = {0, 1, 0, 1};
    m.c_true = {0.75, 1.25, 0.5, 1.5};
    Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
    rot(0, 0) = 0.0;
    rot(0, 1) = -1.0;
    rot(1, 0) = 1.0;
    rot(1, 1) = 0.0;
    m.rotations.assign(4, rot);
    m.validate();

    const nlohmann::json j = manifest_to_json(m);
    const DatasetManifest back = manifest_from_json(j);
    REQUIRE(back.stack == m.stack);
    REQUIRE(back.n == 4);
    REQUIRE(back.L == 8);
    REQUIRE(back.pixel_size == 1.5);
    REQUIRE(back.seed == 99);
    REQUIRE(back.noise_kind == "colored");
    REQUIRE(back.sigma2 == 0.125);
    REQUIRE(back.snr == 0.5);
    REQUIRE(back.ctf.size() == 2);
    REQUIRE(back.ctf[1].defocus_um == 2.5);
    REQUIRE(back.ctf[1].voltage_kv == 300.0);
    REQUIRE(back.groups == m.groups);
    REQUIRE(back.c_true == m.c_true);
    REQUIRE(back.rotations.size() == 4);
    REQUIRE(back.rotations[2] == rot);

    SECTION("optional fields may be absent") {
        DatasetManifest bare = m;
        bare.c_true.clear();
        bare.rotations.clear();
        const DatasetManifest b2 = manifest_from_json(manifest_to_json(bare));
        REQUIRE(b2.c_true.empty());
        REQUIRE(b2.rotations.empty());
    }

    SECTION("group ids must reference existing ctf rows") {
        nlohmann::json badj = j;
        badj["images"][1]["group"] = 7;
        REQUIRE_THROWS_WITH(manifest_from_json(badj),
                            Catch::Matchers::ContainsSubstring("group id"));
    }

    SECTION("record count must match n") {
        nlohmann::json badj = j;
        badj["n"] = 5;
        REQUIRE_THROWS_WITH(manifest_from_json(badj),
                            Catch::Matchers::ContainsSubstring("image records"));
    }

    SECTION("unknown keys are rejected") {
        nlohmann::json badj = j;
        badj["surprise"] = 1;
        REQUIRE_THROWS_WITH(manifest_from_json(badj),
                            Catch::Matchers::ContainsSubstring("unknown key"));
    }
}

TEST_CASE("contrast and psd csv formats") {
    Eigen::VectorXd c_hat(2), c_true(2);
    c_hat << 0.5, 1.5;
    c_true << 0.75, 1.25;
    const std::vector<int> groups{1, 0};

    std::ostringstream with_truth;
    write_contrast_csv(with_truth, c_hat, groups, c_true, "gs");
    REQUIRE(with_truth.str() ==
            "image_id,group_id,c_hat,c_true,method\n"
            "0,1,0.5,0.75,gs\n"
            "1,0,1.5,1.25,gs\n");

    std::ostringstream bare;
    write_contrast_csv(bare, c_hat, groups, Eigen::VectorXd(), "cwf");
    REQUIRE(bare.str() ==
            "image_id,group_id,c_hat,method\n"
            "0,1,0.5,cwf\n"
            "1,0,1.5,cwf\n");

    NoisePSD a, b;
    a.psd = Eigen::Vector2d(1.0, 0.5);
    a.group = 0;
    b.psd = Eigen::VectorXd::Constant(1, 2.0);
    b.group = 1;
    std::ostringstream psd;
    write_psd_csv(psd, {a, b});
    REQUIRE(psd.str() == "radius,psd,group\n0,1,0\n1,0.5,0\n0,2,1\n");
}

TEST_CASE("oracle estimator is exact on noiseless synthetic input") {
    const FBBasis basis(16, 0.5);
    const int n = 20, D = 3;
    Philox rng(31, 0);
    Eigen::VectorXd c_raw(n);
    for (int i = 0; i < n; ++i) c_raw[i] = 0.5 + rng.uniform();

    Eigen::MatrixXd x(n, basis.real_dim());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.normal();

    std::vector<BlockOperator> ops;
    for (double d : {1.0, 2.5, 4.0}) ops.push_back(ctf_block_operator(CTFParams{d}, basis));
    std::vector<int> assign(n);
    for (int i = 0; i < n; ++i) assign[i] = i % D;

    const std::vector<BlockStack> clean = make_block_stacks(x, basis);
    std::vector<BlockStack> ys = clean;
    for (std::size_t b = 0; b < ys.size(); ++b)
        for (int i = 0; i < n; ++i) {
            const Eigen::MatrixXd& B = ops[std::size_t(assign[i])].blocks[b];
            ys[b].re.row(i) = c_raw[i] * (B * clean[b].re.row(i).transpose()).transpose();
            ys[b].im.row(i) = c_raw[i] * (B * clean[b].im.row(i).transpose()).transpose();
        }

    const ContrastEstimates est = oracle_contrasts_clean(ys, clean, ops, assign);
    const Eigen::VectorXd c_norm = c_raw / c_raw.mean();  // scale is not identifiable
    REQUIRE(contrast_error(est.c_hat, c_norm) < 1e-6);
    REQUIRE((est.c_hat - c_norm).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("cli pipeline produces coherent artifacts end to end") {
    const fs::path root = scratch_dir() / "cli";
    const fs::path out = root / "out";
    fs::create_directories(root);
    const fs::path config = root / "config.json";
    {
        nlohmann::json j = {
            {"schema_version", 1},
            {"seed", 5},
            {"output_dir", out.string()},
            {"basis", {{"L", 32}, {"r", 0.5}}},
            {"num_defocus_groups", 5},
            {"pixel_size", 1.884375},
            {"grid", {{"snr", {1.0}}, {"n", {100}}, {"noise", {"white"}}}},
            {"methods", {"cwf", "oracle"}},
        };
        std::ofstream(config) << j.dump(2);
    }
    const std::string point = "white_snr1_n100";

    SECTION("simulate emits a manifest and a readable stack") {
        REQUIRE(run_cli("simulate --config " + config.string()) == 0);
        const fs::path dir = out / point;
        REQUIRE(fs::exists(dir / "dataset.mrc"));
        REQUIRE(fs::exists(dir / "manifest.json"));
        const MrcStack stack = read_mrc_stack((dir / "dataset.mrc").string());
        REQUIRE(stack.images.size() == 100);
        nlohmann::json j;
        std::ifstream(dir / "manifest.json") >> j;
        const DatasetManifest m = manifest_from_json(j);
        REQUIRE(m.n == 100);
        REQUIRE(m.L == 32);
        REQUIRE(m.ctf.size() == 5);
        REQUIRE(m.c_true.size() == 100);
        REQUIRE(m.seed == 5);
    }

    SECTION("the full run writes every stage artifact and stays finite") {
        REQUIRE(run_cli("all --config " + config.string()) == 0);
        const fs::path dir = out / point;
        for (const char* f :
             {"dataset.mrc", "manifest.json", "preprocessed.mrc", "psd.csv",
              "contrasts_cwf.csv", "contrasts_oracle.csv", "cov_block0_cwf.bin",
              "cov_block0_cwf.json", "restored_cwf.mrc", "restored_cwf-norm.mrc",
              "metrics.csv"}) {
            INFO(f);
            REQUIRE(fs::exists(dir / f));
        }

        nlohmann::json status;
        std::ifstream(out / "stage_status.json") >> status;
        REQUIRE(status.at("ok") == true);
        REQUIRE(status.at("stages").size() == 5);
        for (const auto& s : status.at("stages")) REQUIRE(s.at("status") == "ok");

        // Contrast files carry one row per image plus the header.
        std::ifstream contrasts(dir / "contrasts_oracle.csv");
        std::string line;
        int rows = 0;
        std::getline(contrasts, line);
        REQUIRE(line == "image_id,group_id,c_hat,c_true,method");
        while (std::getline(contrasts, line)) ++rows;
        REQUIRE(rows == 100);

        // Metric accounting: e_c rows per method are 1 (all) + 5 defocus
        // groups + the populated contrast deciles; restoration adds one nrmse
        // and three frc rows per restored variant.
        nlohmann::json mj;
        std::ifstream(dir / "manifest.json") >> mj;
        const DatasetManifest m = manifest_from_json(mj);
        std::set<int> deciles;
        for (double c : m.c_true)
            deciles.insert(std::min(9, std::max(0, int(std::floor((c - 0.5) / 0.1)))));
        const int per_method = 1 + 5 + int(deciles.size());

        std::ifstream metrics(dir / "metrics.csv");
        std::getline(metrics, line);
        REQUIRE(line == "method,snr,n,noise,group,metric,value");
        int e_c_rows = 0, nrmse_rows = 0, frc_rows = 0, total = 0;
        std::vector<std::string> all_lines;
        while (std::getline(metrics, line)) {
            ++total;
            all_lines.push_back(line);
            if (line.find(",e_c,") != std::string::npos) ++e_c_rows;
            if (line.find(",nrmse,") != std::string::npos) ++nrmse_rows;
            if (line.find(",frc,") != std::string::npos) ++frc_rows;
        }
        REQUIRE(e_c_rows == 3 * per_method);  // cwf, oracle, trivial
        REQUIRE(nrmse_rows == 2);             // cwf, cwf-norm
        REQUIRE(frc_rows == 2 * 3);
        REQUIRE(total == e_c_rows + nrmse_rows + frc_rows);

        // One grid point, so the aggregate table holds the same rows.
        REQUIRE(slurp(out / "metrics.csv") == slurp(dir / "metrics.csv"));

        // The oracle tracks the truth and beats the trivial estimator.  Its
        // error floor here is the per-image corner-std jitter that the
        // normalization divides out, a few percent at this SNR.
        double e_oracle = -1.0, e_trivial = -1.0;
        for (const std::string& l : all_lines) {
            if (l.rfind("oracle,", 0) == 0 && l.find(",all,e_c,") != std::string::npos)
                e_oracle = std::stod(l.substr(l.rfind(',') + 1));
            if (l.rfind("trivial,", 0) == 0 && l.find(",all,e_c,") != std::string::npos)
                e_trivial = std::stod(l.substr(l.rfind(',') + 1));
        }
        REQUIRE(e_oracle >= 0.0);
        REQUIRE(e_trivial >= 0.0);
        REQUIRE(e_oracle < 0.15);
        REQUIRE(e_oracle < e_trivial);
    }

    SECTION("stages demand their upstream artifacts") {
        const fs::path empty_out = root / "empty_out";
        REQUIRE(run_cli("estimate --config " + config.string() + " --out " +
                        empty_out.string()) == 1);
        nlohmann::json status;
        std::ifstream(empty_out / "stage_status.json") >> status;
        REQUIRE(status.at("ok") == false);
        REQUIRE(status.at("stages")[0].at("status") == "error");
        const std::string msg = status.at("stages")[0].at("message");
        REQUIRE(msg.find("missing") != std::string::npos);
    }

    SECTION("an invalid config exits nonzero before any stage runs") {
        const fs::path bad = root / "bad.json";
        std::ofstream(bad) << R"({"schema_version": 1, "basis": {"L": 3}})";
        const fs::path err = root / "stderr.txt";
        REQUIRE(run_cli("all --config " + bad.string() + " 2> " + err.string()) ==
                2);
        const std::vector<char> captured = slurp(err);
        const std::string text(captured.begin(), captured.end());
        REQUIRE(text.find("basis: L") != std::string::npos);
    }
}
