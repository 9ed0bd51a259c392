#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "dft.hpp"
#include "rng.hpp"

namespace cryocontrast {

// One isotropic 3-D Gaussian blob.  Center and std are in units of the image
// half-width, weight is the total 3-D mass (so any axis-aligned or rotated
// projection integrates to the same mass).
struct Blob {
    Eigen::Vector3d center;
    double weight = 0.0;
    double std = 0.0;
};

struct PhantomVolume {
    std::vector<Blob> blobs;

    double total_weight() const {
        double s = 0.0;
        for (const Blob& b : blobs) s += b.weight;
        return s;
    }

    void validate() const {
        if (blobs.empty())
            throw std::invalid_argument("PhantomVolume: no blobs");
        for (const Blob& b : blobs) {
            if (!(b.std > 0.0))
                throw std::invalid_argument("PhantomVolume: blob std must be positive");
            if (b.weight < 0.0)
                throw std::invalid_argument("PhantomVolume: blob weight must be nonnegative");
            if (b.center.norm() + 3.0 * b.std > 1.0)
                throw std::invalid_argument(
                    "PhantomVolume: blob mass extends outside the unit disk "
                    "(need ||center|| + 3*std <= 1)");
        }
        if (!(total_weight() > 0.0))
            throw std::invalid_argument("PhantomVolume: total mass must be positive");
    }
};

// Fixed default volume: 12 blobs with pseudo-random centers, widths and
// weights, frozen as literals so every build renders the identical molecule.
// Widths are kept >= 0.10 half-widths so projections stay effectively
// band-limited at L >= 32, and ||center|| + 4*std <= 0.88 keeps the corners
// of the frame signal-free for background estimation.
inline PhantomVolume default_phantom() {
    PhantomVolume vol;
    const double table[12][5] = {
        {-0.44571575667696045, -0.00086656507186200216, 0.12179802914802895, 0.10229512066975557, 0.64792608457745593},
        {0.14626031135565942, -0.15720825152425083, 0.013668026163915159, 0.15302743620134393, 0.77530881576112931},
        {0.064476435438273416, -0.019650363691934736, -0.17607017392746227, 0.14732762431592347, 0.73530123166758055},
        {0.10545832880023265, -0.22954830815452559, -0.21914803406239508, 0.1071389803534199, 0.67266960110857543},
        {-0.076798195689202764, -0.22281644555537655, 0.29581070076649274, 0.10320104820425523, 0.56743893309202609},
        {-0.25701342283563516, 0.12693948546470113, 0.12300447505127332, 0.11918541265714531, 1.1225674878326488},
        {-0.10186742293750861, 0.063888281311647144, 0.20801558602564196, 0.14147019004011568, 0.75761816543803873},
        {-0.054128873904699004, -0.085952876960720292, 0.42243484945746645, 0.11102330939520151, 1.1169348093129683},
        {-0.10349982189424323, 0.03391050592428746, -0.00070874324142744527, 0.11073032601023361, 1.0120153820260778},
        {0.25698176171375176, 0.04981642855871049, -0.25444805739476456, 0.1204338109362753, 1.3669768730366623},
        {-0.1368485710114587, 0.28713830535403773, 0.13189717727529038, 0.10233632763599207, 0.54501285349611128},
        {0.11277461916331577, 0.20808426496813037, -0.15206462646266222, 0.11465087820451229, 0.79171501275656508},
    };
    vol.blobs.reserve(12);
    for (const auto& row : table)
        vol.blobs.push_back({{row[0], row[1], row[2]}, row[4], row[3]});
    return vol;
}

struct Rotation {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

    void validate() const {
        if ((m * m.transpose() - Eigen::Matrix3d::Identity()).norm() > 1e-12)
            throw std::invalid_argument("Rotation: matrix is not orthogonal");
        if (std::abs(m.determinant() - 1.0) > 1e-12)
            throw std::invalid_argument("Rotation: determinant is not +1");
    }
};

// Haar-uniform rotation from a normalized Gaussian quaternion.
inline Rotation rand_rot(Philox& rng) {
    double q[4];
    for (double& v : q) v = rng.normal();
    const double nrm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const double w = q[0] / nrm, x = q[1] / nrm, y = q[2] / nrm, z = q[3] / nrm;
    Rotation rot;
    rot.m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
             2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
             2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return rot;
}

// Analytic z-projection of the rotated volume: an isotropic 3-D Gaussian
// projects to the 2-D Gaussian with the same std and total mass, so the image
// is a closed-form blob sum -- no numerical integration.  pixel_size carries
// no geometric meaning here (the phantom lives in half-width units); it is
// validated for consistency with the rest of the physical metadata.
inline Image project_phantom(const PhantomVolume& vol, const Rotation& rot, int L,
                             double pixel_size) {
    if (L < 8) throw std::invalid_argument("project_phantom: L must be >= 8");
    if (!(pixel_size > 0.0))
        throw std::invalid_argument("project_phantom: pixel_size must be positive");
    vol.validate();
    rot.validate();

    Image img = Image::Zero(L, L);
    const double half = L / 2.0;
    for (const Blob& b : vol.blobs) {
        const Eigen::Vector3d c3 = rot.m * b.center;
        const double cx = c3[0] * half, cy = c3[1] * half;
        const double sp = b.std * half;
        const double amp = b.weight / (2.0 * M_PI * sp * sp);
        const double inv2s2 = 1.0 / (2.0 * sp * sp);
        for (int i = 0; i < L; ++i) {
            const double dx = (i - L / 2) - cx;
            for (int j = 0; j < L; ++j) {
                const double dy = (j - L / 2) - cy;
                img(i, j) += amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
        }
    }
    return img;
}

// I.i.d. uniform contrasts; lo == hi is the degenerate-but-legal constant case.
inline Eigen::VectorXd sample_contrasts(int n, double lo, double hi, std::uint64_t seed) {
    if (!(lo > 0.0) || lo > hi)
        throw std::invalid_argument("sample_contrasts: need 0 < lo <= hi");
    if (n < 0) throw std::invalid_argument("sample_contrasts: n must be nonnegative");
    Philox rng(seed, 0);
    Eigen::VectorXd c(n);
    for (int i = 0; i < n; ++i) c[i] = rng.uniform(lo, hi);
    return c;
}

}  // namespace cryocontrast
