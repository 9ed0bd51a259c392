#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "covariance.hpp"

namespace cryocontrast {

/// A block covariance together with the angular index of each block, as
/// stored in checkpoint files.
struct CovarianceCheckpoint {
    std::vector<int> ks;
    BlockCovariance cov;
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (std::size_t(in.gcount()) < sizeof(T))
        throw std::runtime_error("covariance checkpoint: truncated while reading " + what);
    return v;
}

}  // namespace detail

/// Self-describing container: "CCOV", version, block count, then per block an
/// (k, dim) header followed by dim*dim little-endian float64, column-major.
inline void write_covariance_checkpoint(const BlockCovariance& cov,
                                        const std::vector<int>& ks,
                                        const std::string& path) {
    if (cov.blocks.size() != ks.size())
        throw std::invalid_argument("write_covariance_checkpoint: ks/block count mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_covariance_checkpoint: cannot open " + path);
    out.write("CCOV", 4);
    detail::write_pod(out, std::uint32_t(1));
    detail::write_pod(out, std::uint32_t(cov.blocks.size()));
    for (std::size_t b = 0; b < cov.blocks.size(); ++b) {
        const Eigen::MatrixXd& m = cov.blocks[b];
        if (m.rows() != m.cols())
            throw std::invalid_argument("write_covariance_checkpoint: non-square block");
        detail::write_pod(out, std::int32_t(ks[b]));
        detail::write_pod(out, std::int32_t(m.rows()));
        out.write(reinterpret_cast<const char*>(m.data()),
                  std::streamsize(std::size_t(m.size()) * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write_covariance_checkpoint: short write to " + path);
}

inline CovarianceCheckpoint read_covariance_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_covariance_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() < 4 || std::memcmp(magic, "CCOV", 4) != 0)
        throw std::runtime_error("read_covariance_checkpoint: " + path +
                                 " is not a covariance checkpoint");
    const auto version = detail::read_pod<std::uint32_t>(in, "version");
    if (version != 1)
        throw std::runtime_error("read_covariance_checkpoint: unsupported version " +
                                 std::to_string(version));
    const auto nblocks = detail::read_pod<std::uint32_t>(in, "block count");

    CovarianceCheckpoint out;
    out.ks.reserve(nblocks);
    out.cov.blocks.reserve(nblocks);
    for (std::uint32_t b = 0; b < nblocks; ++b) {
        const auto k = detail::read_pod<std::int32_t>(in, "block k");
        const auto dim = detail::read_pod<std::int32_t>(in, "block dim");
        if (k < 0 || dim <= 0)
            throw std::runtime_error("read_covariance_checkpoint: bad block header");
        Eigen::MatrixXd m(dim, dim);
        in.read(reinterpret_cast<char*>(m.data()),
                std::streamsize(std::size_t(m.size()) * sizeof(double)));
        if (std::size_t(in.gcount()) < std::size_t(m.size()) * sizeof(double))
            throw std::runtime_error("read_covariance_checkpoint: truncated block data");
        out.ks.push_back(int(k));
        out.cov.blocks.push_back(std::move(m));
    }
    return out;
}

/// JSON export (intended for small L; the quadratic block payload gets big).
inline nlohmann::json covariance_checkpoint_json(const BlockCovariance& cov,
                                                 const std::vector<int>& ks) {
    if (cov.blocks.size() != ks.size())
        throw std::invalid_argument("covariance_checkpoint_json: ks/block count mismatch");
    nlohmann::json j;
    j["format"] = "cryocontrast-covariance";
    j["version"] = 1;
    j["blocks"] = nlohmann::json::array();
    for (std::size_t b = 0; b < cov.blocks.size(); ++b) {
        const Eigen::MatrixXd& m = cov.blocks[b];
        nlohmann::json jb;
        jb["k"] = ks[b];
        jb["dim"] = m.rows();
        std::vector<double> data;
        data.reserve(std::size_t(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)        // row-major for readability
            for (Eigen::Index jj = 0; jj < m.cols(); ++jj) data.push_back(m(i, jj));
        jb["data"] = std::move(data);
        j["blocks"].push_back(std::move(jb));
    }
    return j;
}

}  // namespace cryocontrast
