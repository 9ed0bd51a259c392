#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "cryocontrast/basis.hpp"

namespace cryocontrast {

/// Microscope parameters of one defocus group.
struct CTFParams {
    double defocus_um;
    double voltage_kv = 300.0;
    double cs_mm = 2.0;
    double amplitude_contrast = 0.07;
    double pixel_size = 1.884375;  // Angstrom

    void validate() const {
        if (!(defocus_um > 0.0)) throw std::invalid_argument("CTFParams: defocus must be > 0");
        if (!(voltage_kv > 0.0)) throw std::invalid_argument("CTFParams: voltage must be > 0");
        if (amplitude_contrast < 0.0 || amplitude_contrast >= 1.0)
            throw std::invalid_argument("CTFParams: amplitude contrast must be in [0,1)");
        if (!(pixel_size > 0.0)) throw std::invalid_argument("CTFParams: pixel size must be > 0");
    }
};

/// Block-diagonal operator in the FB basis: one dense symmetric matrix per
/// angular frequency.
struct BlockOperator {
    std::vector<Eigen::MatrixXd> blocks;

    FBCoeffs apply(const FBCoeffs& c) const {
        if (c.blocks.size() != blocks.size())
            throw std::invalid_argument("BlockOperator: block count mismatch");
        FBCoeffs out;
        out.blocks.resize(blocks.size());
        for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
            if (c.blocks[bi].size() != blocks[bi].rows())
                throw std::invalid_argument("BlockOperator: block length mismatch");
            out.blocks[bi] = blocks[bi] * c.blocks[bi];
        }
        return out;
    }
};

/// Relativistic electron wavelength in Angstrom for voltage in kV.
inline double electron_wavelength(double voltage_kv) {
    const double V = voltage_kv * 1e3;
    return 12.2639 / std::sqrt(V * (1.0 + 0.97845e-6 * V));
}

/// Radially symmetric weak-phase CTF at spatial frequency xi (1/Angstrom).
inline double ctf_value(const CTFParams& p, double xi) {
    const double lam = electron_wavelength(p.voltage_kv);
    const double d = p.defocus_um * 1e4;   // um -> A
    const double cs = p.cs_mm * 1e7;       // mm -> A
    const double chi = M_PI * lam * d * xi * xi -
                       0.5 * M_PI * cs * lam * lam * lam * xi * xi * xi * xi;
    const double w = p.amplitude_contrast;
    return -std::sqrt(1.0 - w * w) * std::sin(chi) - w * std::cos(chi);
}

/// CTF at frequency xi in cycles per pixel.
inline double ctf_value_cpp(const CTFParams& p, double xi_cpp) {
    return ctf_value(p, xi_cpp / p.pixel_size);
}

/// Block operator of an arbitrary radial multiplier fn(xi), xi in cycles per
/// pixel: B_k = phi_k^T diag(W_j * fn(xi_j)) phi_k.  Because phi_k is
/// quadrature-orthonormal, fn == 1 yields the identity in every block.
inline BlockOperator radial_block_operator(const std::function<double(double)>& fn,
                                           const FBBasis& basis) {
    BlockOperator op;
    op.blocks.resize(basis.num_blocks());
    const Eigen::VectorXd& xi = basis.quad_nodes();
    const Eigen::VectorXd& W = basis.quad_weights();
    Eigen::VectorXd diag(xi.size());
    for (Eigen::Index j = 0; j < xi.size(); ++j) diag[j] = W[j] * fn(xi[j]);
    for (int bi = 0; bi < basis.num_blocks(); ++bi) {
        const Eigen::MatrixXd& phi = basis.radial_samples(bi);
        Eigen::MatrixXd B = phi.transpose() * diag.asDiagonal() * phi;
        op.blocks[bi] = 0.5 * (B + B.transpose());
    }
    return op;
}

inline BlockOperator ctf_block_operator(const CTFParams& params, const FBBasis& basis) {
    params.validate();
    return radial_block_operator([&](double xi) { return ctf_value_cpp(params, xi); },
                                 basis);
}

/// Whitening operator psd^{-1/2} for a radial PSD given in cycles per pixel.
inline BlockOperator whitening_operator(const std::function<double(double)>& psd,
                                        const FBBasis& basis) {
    const Eigen::VectorXd& xi = basis.quad_nodes();
    for (Eigen::Index j = 0; j < xi.size(); ++j)
        if (!(psd(xi[j]) > 0.0))
            throw std::invalid_argument("whitening_operator: psd must be positive on the band");
    return radial_block_operator([&](double v) { return 1.0 / std::sqrt(psd(v)); },
                                 basis);
}

/// Defocus values equally spaced on [lo, hi] um (the synthetic default is
/// D = 10 groups on [1, 4]).
inline std::vector<double> defocus_ladder(int D, double lo_um = 1.0, double hi_um = 4.0) {
    if (D < 1) throw std::invalid_argument("defocus_ladder: D must be >= 1");
    std::vector<double> out(D);
    for (int g = 0; g < D; ++g)
        out[g] = (D == 1) ? lo_um : lo_um + (hi_um - lo_um) * g / double(D - 1);
    return out;
}

}  // namespace cryocontrast
