#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "cryocontrast/dft.hpp"
#include "cryocontrast/parallel.hpp"
#include "cryocontrast/quadrature.hpp"

namespace cryocontrast {

namespace detail {

inline double bessel_j(int k, double x) {
    return std::cyl_bessel_j(static_cast<double>(k), x);
}

/// All positive roots of J_k in (0, bound], by sign-change scan + bisection.
/// Consecutive roots of J_k are > 3 apart, so a 0.25 step cannot skip one;
/// the scan starts at k because j_{k,1} > k.
inline std::vector<double> bessel_roots(int k, double bound) {
    std::vector<double> out;
    const double step = 0.25;
    double lo = (k == 0) ? 1e-9 : static_cast<double>(k);
    double flo = bessel_j(k, lo);
    while (lo < bound) {
        double hi = std::min(lo + step, bound);
        double fhi = bessel_j(k, hi);
        if ((flo < 0.0) != (fhi < 0.0)) {
            double a = lo, b = hi, fa = flo;
            for (int it = 0; it < 200 && (b - a) > 1e-15 * b; ++it) {
                const double m = 0.5 * (a + b);
                const double fm = bessel_j(k, m);
                if ((fa < 0.0) != (fm < 0.0)) {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            out.push_back(0.5 * (a + b));
        }
        lo = hi;
        flo = fhi;
    }
    return out;
}

}  // namespace detail

/// Per-block complex Fourier-Bessel coefficients of one image, k = 0..k_max.
/// Negative angular frequencies are implied by conjugate symmetry and never
/// stored.
struct FBCoeffs {
    std::vector<Eigen::VectorXcd> blocks;
};

/// FB coefficients of the Fourier-transformed all-ones image: supported on
/// block 0 only, entry q equal to N_{0,q}.
struct OnesVector {
    Eigen::VectorXd block0;
};

/// Fourier-Bessel steerable basis on the band-limit disk of radius r
/// (cycles per pixel), with everything expansion and operator construction
/// need precomputed:
///
///  - roots/norms of the radial functions, truncated at
///    band_scale * 2*pi*r*(L/2) (strictly inside the lattice Nyquist bound);
///  - a Gauss-Legendre radial quadrature and re-orthonormalized radial
///    samples phi_k used to represent radial multipliers as per-block
///    matrices;
///  - the dense synthesis matrix E mapping realified coefficients to L*L
///    pixels, plus the Cholesky factor of its Gram matrix, so expansion is a
///    pixel-domain least-squares solve (equivalent to least squares on the
///    Fourier disk since the DFT is unitary up to scale and the synthesis
///    span is conjugate-symmetric).
///
/// Realified coefficient layout: block 0 contributes p_0 reals, each block
/// k >= 1 contributes (re, im) pairs per radial index.  Immutable after
/// construction; expansion/evaluation are const and thread-safe.
class FBBasis {
public:
    FBBasis(int L, double r, double band_scale = 0.8) : L_(L), r_(r) {
        if (L < 8) throw std::invalid_argument("FBBasis: L must be >= 8");
        if (!(r > 0.0) || r > 0.5)
            throw std::invalid_argument("FBBasis: band-limit radius must be in (0, 1/2]");
        if (!(band_scale > 0.0) || band_scale > 2.0)
            throw std::invalid_argument("FBBasis: band_scale out of range");
        cutoff_ = band_scale * 2.0 * kPi * r * (L / 2.0);

        for (int k = 0;; ++k) {
            std::vector<double> z = detail::bessel_roots(k, cutoff_);
            if (z.empty()) break;
            ks_.push_back(k);
            roots_.emplace_back(Eigen::Map<Eigen::VectorXd>(z.data(), z.size()));
        }
        if (ks_.empty()) throw std::invalid_argument("FBBasis: empty basis, L too small");

        const double spi = std::sqrt(kPi);
        norms_.resize(ks_.size());
        pdim_.resize(ks_.size());
        offset_.resize(ks_.size());
        real_dim_ = 0;
        for (std::size_t bi = 0; bi < ks_.size(); ++bi) {
            const int k = ks_[bi];
            const Eigen::VectorXd& z = roots_[bi];
            Eigen::VectorXd N(z.size());
            for (Eigen::Index q = 0; q < z.size(); ++q)
                N[q] = 1.0 / (r * spi * std::abs(detail::bessel_j(k + 1, z[q])));
            norms_[bi] = std::move(N);
            pdim_[bi] = static_cast<int>(z.size());
            offset_[bi] = real_dim_;
            real_dim_ += (k == 0) ? pdim_[bi] : 2 * pdim_[bi];
        }

        build_quadrature();
        build_synthesis();
    }

    int size() const { return L_; }
    double radius() const { return r_; }
    double cutoff() const { return cutoff_; }
    int num_blocks() const { return static_cast<int>(ks_.size()); }
    int k_of(int bi) const { return ks_[bi]; }
    int block_dim(int bi) const { return pdim_[bi]; }
    int real_dim() const { return real_dim_; }
    const Eigen::VectorXd& block_roots(int bi) const { return roots_[bi]; }
    const Eigen::VectorXd& block_norms(int bi) const { return norms_[bi]; }

    /// Radial quadrature nodes in (0, r) and ring weights 2*pi*w_j*xi_j.
    const Eigen::VectorXd& quad_nodes() const { return quad_xi_; }
    const Eigen::VectorXd& quad_weights() const { return quad_w_; }
    /// Radial samples at the quadrature nodes, re-orthonormalized so that
    /// phi_k^T diag(quad_weights) phi_k = I per block.
    const Eigen::MatrixXd& radial_samples(int bi) const { return phi_[bi]; }

    /// Dense synthesis matrix: pixels (column-major L*L) x realified dim.
    const Eigen::MatrixXd& synthesis_matrix() const { return E_; }

    // -- realified <-> per-block complex -------------------------------------

    FBCoeffs to_blocks(const Eigen::VectorXd& v) const {
        check_real_dim(v.size());
        FBCoeffs c;
        c.blocks.resize(ks_.size());
        for (std::size_t bi = 0; bi < ks_.size(); ++bi) {
            const int p = pdim_[bi], off = offset_[bi];
            Eigen::VectorXcd z(p);
            if (ks_[bi] == 0) {
                for (int q = 0; q < p; ++q) z[q] = v[off + q];
            } else {
                for (int q = 0; q < p; ++q)
                    z[q] = std::complex<double>(v[off + 2 * q], v[off + 2 * q + 1]);
            }
            c.blocks[bi] = std::move(z);
        }
        return c;
    }

    Eigen::VectorXd from_blocks(const FBCoeffs& c) const {
        if (c.blocks.size() != ks_.size())
            throw std::invalid_argument("FBBasis: block count mismatch");
        Eigen::VectorXd v(real_dim_);
        for (std::size_t bi = 0; bi < ks_.size(); ++bi) {
            const int p = pdim_[bi], off = offset_[bi];
            if (c.blocks[bi].size() != p)
                throw std::invalid_argument("FBBasis: block length mismatch");
            if (ks_[bi] == 0) {
                for (int q = 0; q < p; ++q) v[off + q] = c.blocks[bi][q].real();
            } else {
                for (int q = 0; q < p; ++q) {
                    v[off + 2 * q] = c.blocks[bi][q].real();
                    v[off + 2 * q + 1] = c.blocks[bi][q].imag();
                }
            }
        }
        return v;
    }

    /// Offset of block bi inside a realified vector.
    int block_offset(int bi) const { return offset_[bi]; }

    // -- expansion / evaluation ----------------------------------------------

    /// Least-squares coefficients for a stack of images given as rows of
    /// column-major flattened pixels (n x L*L) -> (n x real_dim).
    Eigen::MatrixXd expand_stack(const Eigen::MatrixXd& images, int threads = 0) const {
        if (images.cols() != Eigen::Index(L_) * L_)
            throw std::invalid_argument("FBBasis: image size mismatch");
        Eigen::MatrixXd rhs = multiply_chunked(images, E_, threads);  // n x real_dim
        Eigen::MatrixXd sol = gram_llt_.solve(rhs.transpose());
        return sol.transpose();
    }

    /// Synthesis of realified coefficient rows (n x real_dim) -> (n x L*L).
    Eigen::MatrixXd evaluate_stack(const Eigen::MatrixXd& coeffs, int threads = 0) const {
        if (coeffs.cols() != real_dim_)
            throw std::invalid_argument("FBBasis: coefficient size mismatch");
        return multiply_chunked(coeffs, E_.transpose(), threads);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;

    void check_real_dim(Eigen::Index n) const {
        if (n != real_dim_)
            throw std::invalid_argument("FBBasis: realified length mismatch");
    }

    void build_quadrature() {
        // Radial operators integrate products of basis functions against CTF
        // profiles whose oscillation count grows with defocus, not with L, so
        // small grids still need a generous node count to stay alias-free.
        const std::size_t n_r = std::max<std::size_t>(4 * std::size_t(L_), 96);
        const QuadratureRule rule = gauss_legendre_radial(n_r, r_);
        const int nr = static_cast<int>(rule.nodes.size());
        quad_xi_ = Eigen::Map<const Eigen::VectorXd>(rule.nodes.data(), nr);
        quad_w_.resize(nr);
        for (int j = 0; j < nr; ++j)
            quad_w_[j] = 2.0 * kPi * rule.weights[j] * rule.nodes[j];

        phi_.resize(ks_.size());
        for (std::size_t bi = 0; bi < ks_.size(); ++bi) {
            const int k = ks_[bi], p = pdim_[bi];
            Eigen::MatrixXd F(nr, p);
            for (int j = 0; j < nr; ++j)
                for (int q = 0; q < p; ++q)
                    F(j, q) = norms_[bi][q] *
                              detail::bessel_j(k, quad_xi_[j] * roots_[bi][q] / r_);
            Eigen::MatrixXd G = F.transpose() * quad_w_.asDiagonal() * F;
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
            if (eig.eigenvalues().minCoeff() <= 0.0)
                throw std::runtime_error("FBBasis: quadrature Gram not positive definite");
            const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseSqrt().cwiseInverse();
            phi_[bi] = F * (eig.eigenvectors() * inv_sqrt.asDiagonal() *
                            eig.eigenvectors().transpose());
        }
    }

    void build_synthesis() {
        const int L = L_;
        const CenteredDft dft(L);

        std::vector<int> disk_i, disk_j;
        std::vector<double> disk_xi, disk_th;
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j) {
                const double mx = i - L / 2, my = j - L / 2;
                const double rho = std::hypot(mx, my);
                if (rho < r_ * L) {
                    disk_i.push_back(i);
                    disk_j.push_back(j);
                    disk_xi.push_back(rho / L);
                    disk_th.push_back(std::atan2(my, mx));
                }
            }
        const std::size_t nd = disk_i.size();

        E_.resize(Eigen::Index(L) * L, real_dim_);
        struct Col {
            int bi, q;
            std::complex<double> val;
            int dest;
        };
        std::vector<Col> cols;
        cols.reserve(real_dim_);
        for (std::size_t bi = 0; bi < ks_.size(); ++bi)
            for (int q = 0; q < pdim_[bi]; ++q) {
                if (ks_[bi] == 0) {
                    cols.push_back({int(bi), q, {1.0, 0.0}, offset_[bi] + q});
                } else {
                    cols.push_back({int(bi), q, {1.0, 0.0}, offset_[bi] + 2 * q});
                    cols.push_back({int(bi), q, {0.0, 1.0}, offset_[bi] + 2 * q + 1});
                }
            }

        parallel_for(cols.size(), [&](std::size_t ci) {
            const Col& col = cols[ci];
            const int k = ks_[col.bi];
            const double sgn = (k % 2 == 0) ? 1.0 : -1.0;
            ImageC S = ImageC::Zero(L, L);
            for (std::size_t d = 0; d < nd; ++d) {
                const double f = norms_[col.bi][col.q] *
                                 detail::bessel_j(k, disk_xi[d] * roots_[col.bi][col.q] / r_);
                if (k == 0) {
                    S(disk_i[d], disk_j[d]) = f * col.val.real();
                } else {
                    const std::complex<double> ph(std::cos(k * disk_th[d]),
                                                  std::sin(k * disk_th[d]));
                    const std::complex<double> t = col.val * ph;
                    S(disk_i[d], disk_j[d]) = f * (t + sgn * std::conj(t));
                }
            }
            const Image img = dft.inverse_real(S);
            E_.col(col.dest) = Eigen::Map<const Eigen::VectorXd>(img.data(), Eigen::Index(L) * L);
        });

        Eigen::MatrixXd G(real_dim_, real_dim_);
        // Fixed chunk height for thread-count-independent rounding.
        const int chunk = 64;
        const std::size_t nchunks = (real_dim_ + chunk - 1) / chunk;
        parallel_for(nchunks, [&](std::size_t c) {
            const int lo = int(c) * chunk;
            const int len = std::min(chunk, real_dim_ - lo);
            G.middleRows(lo, len).noalias() = E_.middleCols(lo, len).transpose() * E_;
        });
        gram_llt_.compute(G);
        if (gram_llt_.info() != Eigen::Success)
            throw std::runtime_error("FBBasis: synthesis Gram not positive definite");
    }

    /// Row-chunked A*B so big stacks use all cores with bit-identical output.
    static Eigen::MatrixXd multiply_chunked(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                            int threads) {
        Eigen::MatrixXd out(A.rows(), B.cols());
        // Fixed chunk height: the same per-chunk products run no matter how
        // many threads execute them, keeping results bit-identical.
        const Eigen::Index chunk = 64;
        const std::size_t nchunks = (A.rows() + chunk - 1) / chunk;
        parallel_for(nchunks, [&](std::size_t c) {
            const Eigen::Index lo = Eigen::Index(c) * chunk;
            const Eigen::Index len = std::min(chunk, A.rows() - lo);
            out.middleRows(lo, len).noalias() = A.middleRows(lo, len) * B;
        }, threads);
        return out;
    }

    int L_;
    double r_;
    double cutoff_;
    std::vector<int> ks_;
    std::vector<Eigen::VectorXd> roots_;
    std::vector<Eigen::VectorXd> norms_;
    std::vector<int> pdim_;
    std::vector<int> offset_;
    int real_dim_ = 0;

    Eigen::VectorXd quad_xi_, quad_w_;
    std::vector<Eigen::MatrixXd> phi_;

    Eigen::MatrixXd E_;
    Eigen::LLT<Eigen::MatrixXd> gram_llt_;
};

inline FBBasis build_basis(int L, double r, double band_scale = 0.8) {
    return FBBasis(L, r, band_scale);
}

inline Eigen::VectorXd flatten(const Image& img) {
    return Eigen::Map<const Eigen::VectorXd>(img.data(), img.size());
}

inline Image unflatten(const Eigen::VectorXd& v, int L) {
    return Eigen::Map<const Image>(v.data(), L, L);
}

inline FBCoeffs expand(const Image& image, const FBBasis& basis) {
    if (image.rows() != basis.size() || image.cols() != basis.size())
        throw std::invalid_argument("expand: image dimension mismatch");
    Eigen::MatrixXd row = flatten(image).transpose();
    return basis.to_blocks(basis.expand_stack(row, 1).row(0));
}

inline Image evaluate(const FBCoeffs& coeffs, const FBBasis& basis) {
    Eigen::MatrixXd row = basis.from_blocks(coeffs).transpose();
    return unflatten(basis.evaluate_stack(row, 1).row(0), basis.size());
}

inline OnesVector ones_vector(const FBBasis& basis) {
    return OnesVector{basis.block_norms(0)};
}

inline double pixel_sum_fb(const FBCoeffs& coeffs, const OnesVector& ones) {
    if (coeffs.blocks.empty() || coeffs.blocks[0].size() != ones.block0.size())
        throw std::invalid_argument("pixel_sum_fb: block-0 length mismatch");
    return ones.block0.dot(coeffs.blocks[0].real());
}

/// Block-0 pixel-sum functional applied to a realified coefficient vector.
inline double pixel_sum_fb(const Eigen::VectorXd& realified, const OnesVector& ones,
                           const FBBasis& basis) {
    if (realified.size() != basis.real_dim())
        throw std::invalid_argument("pixel_sum_fb: realified length mismatch");
    return ones.block0.dot(realified.head(ones.block0.size()));
}

}  // namespace cryocontrast
