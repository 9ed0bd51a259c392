#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "basis.hpp"

namespace cryocontrast {

/// MRC file whose magic word is not "MAP ".
struct MrcBadMagic : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// MRC file with a data mode other than 2 (32-bit float).
struct MrcUnsupportedMode : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// MRC file shorter than its header promises.
struct MrcTruncated : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MrcStack {
    std::vector<Image> images;
    double pixel_size = 1.0;  // Angstrom, from the cell/grid ratio
};

namespace detail {

inline void put_i32(std::vector<char>& buf, std::size_t off, std::int32_t v) {
    std::memcpy(buf.data() + off, &v, 4);
}

inline void put_f32(std::vector<char>& buf, std::size_t off, float v) {
    std::memcpy(buf.data() + off, &v, 4);
}

inline std::int32_t get_i32(const std::vector<char>& buf, std::size_t off) {
    std::int32_t v;
    std::memcpy(&v, buf.data() + off, 4);
    return v;
}

inline float get_f32(const std::vector<char>& buf, std::size_t off) {
    float v;
    std::memcpy(&v, buf.data() + off, 4);
    return v;
}

}  // namespace detail

/// Write a stack as MRC2014 mode 2: one LxL float32 frame per image, cell
/// sizes dims * pixel_size, min/max/mean statistics filled in.
inline void write_mrc_stack(const std::vector<Image>& images, const std::string& path,
                            double pixel_size = 1.0) {
    if (images.empty()) throw std::invalid_argument("write_mrc_stack: empty stack");
    const Eigen::Index rows = images[0].rows(), cols = images[0].cols();
    for (const Image& img : images)
        if (img.rows() != rows || img.cols() != cols)
            throw std::invalid_argument("write_mrc_stack: inconsistent frame sizes");

    std::vector<float> data;
    data.reserve(std::size_t(images.size()) * std::size_t(rows * cols));
    for (const Image& img : images)
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j)
                data.push_back(static_cast<float>(img(i, j)));

    float dmin = data[0], dmax = data[0];
    double dsum = 0.0;
    for (float v : data) {
        dmin = std::min(dmin, v);
        dmax = std::max(dmax, v);
        dsum += v;
    }
    const float dmean = static_cast<float>(dsum / double(data.size()));

    std::vector<char> header(1024, 0);
    detail::put_i32(header, 0, std::int32_t(cols));    // NX: fastest axis
    detail::put_i32(header, 4, std::int32_t(rows));    // NY
    detail::put_i32(header, 8, std::int32_t(images.size()));  // NZ
    detail::put_i32(header, 12, 2);                    // MODE 2 = float32
    detail::put_i32(header, 28, std::int32_t(cols));   // MX
    detail::put_i32(header, 32, std::int32_t(rows));   // MY
    detail::put_i32(header, 36, std::int32_t(images.size()));  // MZ
    detail::put_f32(header, 40, float(double(cols) * pixel_size));  // CELLA
    detail::put_f32(header, 44, float(double(rows) * pixel_size));
    detail::put_f32(header, 48, float(double(images.size()) * pixel_size));
    detail::put_f32(header, 52, 90.0f);  // CELLB
    detail::put_f32(header, 56, 90.0f);
    detail::put_f32(header, 60, 90.0f);
    detail::put_i32(header, 64, 1);  // MAPC/MAPR/MAPS
    detail::put_i32(header, 68, 2);
    detail::put_i32(header, 72, 3);
    detail::put_f32(header, 76, dmin);
    detail::put_f32(header, 80, dmax);
    detail::put_f32(header, 84, dmean);
    detail::put_i32(header, 92, 0);       // NSYMBT
    detail::put_i32(header, 108, 20140);  // NVERSION
    std::memcpy(header.data() + 208, "MAP ", 4);
    const unsigned char stamp[4] = {0x44, 0x44, 0x00, 0x00};  // little-endian
    std::memcpy(header.data() + 212, stamp, 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_mrc_stack: cannot open " + path);
    out.write(header.data(), std::streamsize(header.size()));
    out.write(reinterpret_cast<const char*>(data.data()),
              std::streamsize(data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write_mrc_stack: short write to " + path);
}

inline MrcStack read_mrc_stack(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_mrc_stack: cannot open " + path);

    std::vector<char> header(1024);
    in.read(header.data(), 1024);
    if (in.gcount() < 1024)
        throw MrcTruncated("read_mrc_stack: " + path + ": header needs 1024 bytes, file has " +
                           std::to_string(in.gcount()));

    if (std::memcmp(header.data() + 208, "MAP ", 4) != 0)
        throw MrcBadMagic("read_mrc_stack: " + path + ": missing 'MAP ' magic at offset 208");
    const std::int32_t nx = detail::get_i32(header, 0);
    const std::int32_t ny = detail::get_i32(header, 4);
    const std::int32_t nz = detail::get_i32(header, 8);
    const std::int32_t mode = detail::get_i32(header, 12);
    if (mode != 2)
        throw MrcUnsupportedMode("read_mrc_stack: " + path + ": mode " +
                                 std::to_string(mode) + " not supported, need mode 2");
    if (nx <= 0 || ny <= 0 || nz <= 0)
        throw std::runtime_error("read_mrc_stack: " + path + ": non-positive dimensions");
    const std::int32_t nsymbt = detail::get_i32(header, 92);
    if (nsymbt < 0)
        throw std::runtime_error("read_mrc_stack: " + path + ": negative NSYMBT");
    in.seekg(nsymbt, std::ios::cur);  // skip the extended header

    const std::size_t want =
        std::size_t(nx) * std::size_t(ny) * std::size_t(nz) * sizeof(float);
    std::vector<float> data(std::size_t(nx) * std::size_t(ny) * std::size_t(nz));
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(want));
    if (std::size_t(in.gcount()) < want)
        throw MrcTruncated("read_mrc_stack: " + path + ": data needs " +
                           std::to_string(want) + " bytes, file has " +
                           std::to_string(in.gcount()));

    MrcStack out;
    const float cella = detail::get_f32(header, 40);
    out.pixel_size = nx > 0 ? double(cella) / double(nx) : 1.0;
    out.images.reserve(std::size_t(nz));
    std::size_t pos = 0;
    for (std::int32_t z = 0; z < nz; ++z) {
        Image img(ny, nx);
        for (std::int32_t i = 0; i < ny; ++i)
            for (std::int32_t j = 0; j < nx; ++j) img(i, j) = double(data[pos++]);
        out.images.push_back(std::move(img));
    }
    return out;
}

}  // namespace cryocontrast
