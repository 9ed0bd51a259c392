#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "covariance.hpp"
#include "phantom.hpp"
#include "preprocess.hpp"
#include "simulate.hpp"

namespace cryocontrast {

/// Config/manifest validation failure carrying every violation found, not
/// just the first one.
struct ConfigError : std::runtime_error {
    std::vector<std::string> violations;

    explicit ConfigError(std::vector<std::string> v)
        : std::runtime_error(join(v)), violations(std::move(v)) {}

  private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "invalid configuration:";
        for (const std::string& e : v) s += "\n  - " + e;
        return s;
    }
};

namespace detail {

inline std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Records every key of `j` that is not in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& j, const std::string& where,
                                std::initializer_list<const char*> allowed,
                                std::vector<std::string>& errs) {
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) {
                known = true;
                break;
            }
        if (!known) errs.push_back(where + ": unknown key \"" + item.key() + "\"");
    }
}

}  // namespace detail

/// The experiment sweep: every combination of these axes is one grid point.
struct ExperimentGrid {
    std::vector<double> snr{1.0};
    std::vector<int> n{1000};
    std::vector<NoiseModel::Kind> noise{NoiseModel::Kind::white};
};

struct ExperimentConfig {
    int schema_version = 1;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    int basis_L = 64;
    double basis_r = 0.5;
    int num_defocus_groups = 10;
    double pixel_size = 1.884375;
    ExperimentGrid grid;
    std::vector<std::string> methods{"cwf", "gs", "sdp", "oracle"};
    CovarianceOptions solver;
    PhantomVolume phantom;  // default phantom unless the config overrides it

    static const std::vector<std::string>& supported_methods() {
        static const std::vector<std::string> all{"cwf", "gs", "sdp", "oracle"};
        return all;
    }
};

inline nlohmann::json phantom_to_json(const PhantomVolume& vol) {
    nlohmann::json j;
    j["blobs"] = nlohmann::json::array();
    for (const Blob& b : vol.blobs)
        j["blobs"].push_back({{"center", {b.center[0], b.center[1], b.center[2]}},
                              {"weight", b.weight},
                              {"std", b.std}});
    return j;
}

inline PhantomVolume phantom_from_json(const nlohmann::json& j,
                                       const std::string& where,
                                       std::vector<std::string>& errs) {
    PhantomVolume vol;
    detail::reject_unknown_keys(j, where, {"blobs"}, errs);
    if (!j.contains("blobs") || !j["blobs"].is_array()) {
        errs.push_back(where + ": needs a \"blobs\" array");
        return vol;
    }
    int idx = 0;
    for (const auto& jb : j["blobs"]) {
        const std::string bw = where + ".blobs[" + std::to_string(idx++) + "]";
        detail::reject_unknown_keys(jb, bw, {"center", "weight", "std"}, errs);
        Blob b;
        if (jb.contains("center") && jb["center"].is_array() && jb["center"].size() == 3)
            for (int d = 0; d < 3; ++d) b.center[d] = jb["center"][d].get<double>();
        else
            errs.push_back(bw + ": center must be [x, y, z]");
        if (jb.contains("weight") && jb["weight"].is_number())
            b.weight = jb["weight"].get<double>();
        else
            errs.push_back(bw + ": weight must be a number");
        if (jb.contains("std") && jb["std"].is_number() && jb["std"].get<double>() > 0.0)
            b.std = jb["std"].get<double>();
        else
            errs.push_back(bw + ": std must be a positive number");
        vol.blobs.push_back(b);
    }
    if (vol.blobs.empty()) errs.push_back(where + ": blobs must not be empty");
    return vol;
}

/// Strict parse: unknown keys anywhere are violations, and every violation in
/// the document is reported in one ConfigError.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    std::vector<std::string> errs;
    ExperimentConfig cfg;

    detail::reject_unknown_keys(
        j, "config",
        {"schema_version", "seed", "output_dir", "basis", "num_defocus_groups",
         "pixel_size", "grid", "methods", "solver", "phantom"},
        errs);

    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        errs.push_back("config: schema_version is required and must be an integer");
    else if (j["schema_version"].get<int>() != 1)
        errs.push_back("config: schema_version " +
                       std::to_string(j["schema_version"].get<int>()) +
                       " is not supported (expected 1)");

    if (j.contains("seed")) {
        if (j["seed"].is_number_unsigned() || (j["seed"].is_number_integer() &&
                                               j["seed"].get<std::int64_t>() >= 0))
            cfg.seed = j["seed"].get<std::uint64_t>();
        else
            errs.push_back("config: seed must be a non-negative integer");
    }
    if (j.contains("output_dir")) {
        if (j["output_dir"].is_string() && !j["output_dir"].get<std::string>().empty())
            cfg.output_dir = j["output_dir"].get<std::string>();
        else
            errs.push_back("config: output_dir must be a non-empty string");
    }
    if (j.contains("basis")) {
        const auto& jb = j["basis"];
        detail::reject_unknown_keys(jb, "config.basis", {"L", "r"}, errs);
        if (jb.contains("L") && jb["L"].is_number_integer() &&
            jb["L"].get<int>() >= 16 && jb["L"].get<int>() % 2 == 0)
            cfg.basis_L = jb["L"].get<int>();
        else
            errs.push_back("config.basis: L must be an even integer >= 16");
        if (jb.contains("r") && jb["r"].is_number() && jb["r"].get<double>() > 0.0 &&
            jb["r"].get<double>() <= 0.5)
            cfg.basis_r = jb["r"].get<double>();
        else
            errs.push_back("config.basis: r must lie in (0, 0.5]");
    }
    if (j.contains("num_defocus_groups")) {
        if (j["num_defocus_groups"].is_number_integer() &&
            j["num_defocus_groups"].get<int>() >= 1)
            cfg.num_defocus_groups = j["num_defocus_groups"].get<int>();
        else
            errs.push_back("config: num_defocus_groups must be an integer >= 1");
    }
    if (j.contains("pixel_size")) {
        if (j["pixel_size"].is_number() && j["pixel_size"].get<double>() > 0.0)
            cfg.pixel_size = j["pixel_size"].get<double>();
        else
            errs.push_back("config: pixel_size must be > 0");
    }

    if (j.contains("grid")) {
        const auto& jg = j["grid"];
        detail::reject_unknown_keys(jg, "config.grid", {"snr", "n", "noise"}, errs);
        if (jg.contains("snr")) {
            cfg.grid.snr.clear();
            bool ok = jg["snr"].is_array() && !jg["snr"].empty();
            if (ok)
                for (const auto& v : jg["snr"]) {
                    if (!v.is_number() || !(v.get<double>() > 0.0)) ok = false;
                    else cfg.grid.snr.push_back(v.get<double>());
                }
            if (!ok) errs.push_back("config.grid: snr must be a non-empty array of positive numbers");
        }
        if (jg.contains("n")) {
            cfg.grid.n.clear();
            bool ok = jg["n"].is_array() && !jg["n"].empty();
            if (ok)
                for (const auto& v : jg["n"]) {
                    if (!v.is_number_integer() || v.get<int>() < 1) ok = false;
                    else cfg.grid.n.push_back(v.get<int>());
                }
            if (!ok) errs.push_back("config.grid: n must be a non-empty array of integers >= 1");
        }
        if (jg.contains("noise")) {
            cfg.grid.noise.clear();
            bool ok = jg["noise"].is_array() && !jg["noise"].empty();
            if (ok)
                for (const auto& v : jg["noise"]) {
                    if (v == "white") cfg.grid.noise.push_back(NoiseModel::Kind::white);
                    else if (v == "colored") cfg.grid.noise.push_back(NoiseModel::Kind::colored);
                    else ok = false;
                }
            if (!ok)
                errs.push_back("config.grid: noise entries must be \"white\" or \"colored\"");
        }
    }

    if (j.contains("methods")) {
        cfg.methods.clear();
        bool ok = j["methods"].is_array() && !j["methods"].empty();
        if (ok)
            for (const auto& v : j["methods"]) {
                bool found = false;
                for (const std::string& m : ExperimentConfig::supported_methods())
                    if (v == m) found = true;
                if (!found) {
                    errs.push_back("config: method " + v.dump() +
                                   " is not one of cwf, gs, sdp, oracle");
                } else {
                    cfg.methods.push_back(v.get<std::string>());
                }
            }
        if (!ok) errs.push_back("config: methods must be a non-empty array");
    }

    if (j.contains("solver")) {
        const auto& js = j["solver"];
        detail::reject_unknown_keys(js, "config.solver",
                                    {"cg_tol", "cg_maxiter", "shrinkage"}, errs);
        if (js.contains("cg_tol")) {
            if (js["cg_tol"].is_number() && js["cg_tol"].get<double>() > 0.0)
                cfg.solver.cg_tol = js["cg_tol"].get<double>();
            else
                errs.push_back("config.solver: cg_tol must be > 0");
        }
        if (js.contains("cg_maxiter")) {
            if (js["cg_maxiter"].is_number_integer() && js["cg_maxiter"].get<int>() >= 1)
                cfg.solver.cg_maxiter = js["cg_maxiter"].get<int>();
            else
                errs.push_back("config.solver: cg_maxiter must be an integer >= 1");
        }
        if (js.contains("shrinkage")) {
            if (js["shrinkage"].is_boolean())
                cfg.solver.shrink = js["shrinkage"].get<bool>();
            else
                errs.push_back("config.solver: shrinkage must be a boolean");
        }
    }

    if (j.contains("phantom"))
        cfg.phantom = phantom_from_json(j["phantom"], "config.phantom", errs);
    else
        cfg.phantom = default_phantom();

    if (!errs.empty()) throw ConfigError(std::move(errs));
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("load_config: " + path + ": " + e.what());
    }
    return parse_config(j);
}

/// Everything needed to reload and interpret a stack written by `simulate`.
struct DatasetManifest {
    std::string stack;  // MRC path, relative to the manifest
    int n = 0;
    int L = 0;
    double pixel_size = 1.884375;
    std::uint64_t seed = 0;
    std::string noise_kind = "white";
    double sigma2 = 0.0;  // model noise variance of the stored stack
    double snr = 0.0;
    std::vector<CTFParams> ctf;
    std::vector<int> groups;                    // per image, indexes into ctf
    std::vector<double> c_true;                 // optional; empty if unknown
    std::vector<Eigen::Matrix3d> rotations;     // optional; empty if unknown

    void validate() const {
        std::vector<std::string> errs;
        if (n != int(groups.size()))
            errs.push_back("manifest: n=" + std::to_string(n) + " but " +
                           std::to_string(groups.size()) + " image records");
        for (int g : groups)
            if (g < 0 || g >= int(ctf.size())) {
                errs.push_back("manifest: group id " + std::to_string(g) +
                               " has no CTF row");
                break;
            }
        if (!c_true.empty() && int(c_true.size()) != n)
            errs.push_back("manifest: c_true length does not match n");
        if (!rotations.empty() && int(rotations.size()) != n)
            errs.push_back("manifest: rotations length does not match n");
        if (!errs.empty()) throw ConfigError(std::move(errs));
    }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["stack"] = m.stack;
    j["n"] = m.n;
    j["L"] = m.L;
    j["pixel_size"] = m.pixel_size;
    j["seed"] = m.seed;
    j["noise"] = {{"kind", m.noise_kind}, {"sigma2", m.sigma2}, {"snr", m.snr}};
    j["ctf"] = nlohmann::json::array();
    for (const CTFParams& p : m.ctf)
        j["ctf"].push_back({{"defocus_um", p.defocus_um},
                            {"voltage_kv", p.voltage_kv},
                            {"cs_mm", p.cs_mm},
                            {"amplitude_contrast", p.amplitude_contrast},
                            {"pixel_size", p.pixel_size}});
    j["images"] = nlohmann::json::array();
    for (int i = 0; i < m.n; ++i) {
        nlohmann::json ji;
        ji["group"] = m.groups[std::size_t(i)];
        if (!m.c_true.empty()) ji["c_true"] = m.c_true[std::size_t(i)];
        if (!m.rotations.empty()) {
            std::vector<double> r;
            r.reserve(9);
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b)
                    r.push_back(m.rotations[std::size_t(i)](a, b));
            ji["rotation"] = std::move(r);
        }
        j["images"].push_back(std::move(ji));
    }
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    std::vector<std::string> errs;
    DatasetManifest m;
    detail::reject_unknown_keys(j, "manifest",
                                {"schema_version", "stack", "n", "L", "pixel_size",
                                 "seed", "noise", "ctf", "images"},
                                errs);
    if (!j.contains("schema_version") || j["schema_version"] != 1)
        errs.push_back("manifest: schema_version must be 1");
    try {
        m.stack = j.at("stack").get<std::string>();
        m.n = j.at("n").get<int>();
        m.L = j.at("L").get<int>();
        m.pixel_size = j.at("pixel_size").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        const auto& jn = j.at("noise");
        detail::reject_unknown_keys(jn, "manifest.noise", {"kind", "sigma2", "snr"},
                                    errs);
        m.noise_kind = jn.at("kind").get<std::string>();
        m.sigma2 = jn.at("sigma2").get<double>();
        m.snr = jn.at("snr").get<double>();
        for (const auto& jp : j.at("ctf")) {
            detail::reject_unknown_keys(jp, "manifest.ctf",
                                        {"defocus_um", "voltage_kv", "cs_mm",
                                         "amplitude_contrast", "pixel_size"},
                                        errs);
            CTFParams p{jp.at("defocus_um").get<double>()};
            p.voltage_kv = jp.at("voltage_kv").get<double>();
            p.cs_mm = jp.at("cs_mm").get<double>();
            p.amplitude_contrast = jp.at("amplitude_contrast").get<double>();
            p.pixel_size = jp.at("pixel_size").get<double>();
            m.ctf.push_back(p);
        }
        for (const auto& ji : j.at("images")) {
            detail::reject_unknown_keys(ji, "manifest.images",
                                        {"group", "c_true", "rotation"}, errs);
            m.groups.push_back(ji.at("group").get<int>());
            if (ji.contains("c_true")) m.c_true.push_back(ji["c_true"].get<double>());
            if (ji.contains("rotation")) {
                const auto& r = ji["rotation"];
                if (!r.is_array() || r.size() != 9)
                    throw std::runtime_error("rotation must have 9 entries");
                Eigen::Matrix3d rm;
                for (int a = 0; a < 3; ++a)
                    for (int b = 0; b < 3; ++b) rm(a, b) = r[3 * a + b].get<double>();
                m.rotations.push_back(rm);
            }
        }
    } catch (const std::exception& e) {
        errs.push_back(std::string("manifest: ") + e.what());
    }
    if (!errs.empty()) throw ConfigError(std::move(errs));
    m.validate();
    return m;
}

/// Contrast table: image_id, group_id, c_hat, optional c_true, method.
inline void write_contrast_csv(std::ostream& os, const Eigen::VectorXd& c_hat,
                               const std::vector<int>& groups,
                               const Eigen::VectorXd& c_true,  // size 0 if unknown
                               const std::string& method) {
    if (int(groups.size()) != c_hat.size())
        throw std::invalid_argument("write_contrast_csv: group/contrast size mismatch");
    const bool with_truth = c_true.size() == c_hat.size();
    if (c_true.size() != 0 && !with_truth)
        throw std::invalid_argument("write_contrast_csv: c_true size mismatch");
    os << (with_truth ? "image_id,group_id,c_hat,c_true,method\n"
                      : "image_id,group_id,c_hat,method\n");
    for (Eigen::Index i = 0; i < c_hat.size(); ++i) {
        os << i << ',' << groups[std::size_t(i)] << ',' << detail::g17(c_hat[i]);
        if (with_truth) os << ',' << detail::g17(c_true[i]);
        os << ',' << method << '\n';
    }
}

/// Radial PSD curves: radius, psd, group.
inline void write_psd_csv(std::ostream& os, const std::vector<NoisePSD>& curves) {
    os << "radius,psd,group\n";
    for (const NoisePSD& c : curves)
        for (Eigen::Index r = 0; r < c.psd.size(); ++r)
            os << r << ',' << detail::g17(c.psd[r]) << ',' << c.group << '\n';
}

}  // namespace cryocontrast
