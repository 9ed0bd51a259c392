#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "basis.hpp"
#include "ctf.hpp"
#include "parallel.hpp"

namespace cryocontrast {

// Per-block coefficient stacks with real and imaginary parts kept separate
// (rows are images).  The covariance algebra only ever multiplies them by
// real block matrices, so splitting avoids mixed-scalar products throughout.
struct BlockStack {
    Eigen::MatrixXd re, im;  // each n x p_b; im is all zeros for k = 0
};

inline std::vector<BlockStack> make_block_stacks(const Eigen::MatrixXd& coeffs,
                                                 const FBBasis& basis,
                                                 int num_blocks = -1) {
    if (coeffs.cols() != basis.real_dim())
        throw std::invalid_argument("make_block_stacks: coefficient width mismatch");
    const int nb = num_blocks < 0 ? basis.num_blocks()
                                  : std::min(num_blocks, basis.num_blocks());
    const Eigen::Index n = coeffs.rows();
    std::vector<BlockStack> out(nb);
    for (int bi = 0; bi < nb; ++bi) {
        const int p = basis.block_dim(bi), off = basis.block_offset(bi);
        out[bi].re.resize(n, p);
        out[bi].im = Eigen::MatrixXd::Zero(n, p);
        if (basis.k_of(bi) == 0) {
            out[bi].re = coeffs.middleCols(off, p);
        } else {
            for (int q = 0; q < p; ++q) {
                out[bi].re.col(q) = coeffs.col(off + 2 * q);
                out[bi].im.col(q) = coeffs.col(off + 2 * q + 1);
            }
        }
    }
    return out;
}

struct MeanEstimate {
    FBCoeffs mu;  // complex coefficient vector per block

    Eigen::VectorXd block0() const {
        if (mu.blocks.empty()) throw std::logic_error("MeanEstimate: empty");
        return mu.blocks[0].real();
    }
};

struct BlockCovariance {
    std::vector<Eigen::MatrixXd> blocks;  // real symmetric; blocks[0] is k = 0
};

struct VarianceEstimate {
    double var_c = 0.0;      // clamped at zero
    double raw_var_c = 0.0;  // unclamped least-squares value
    bool clamped = false;
    bool suspicious = false;  // raw value above 1: mean/covariance likely failed
};

struct CgDiagnostics {
    int block = 0;
    int iterations = 0;
    double rel_residual = 0.0;
    bool converged = true;
};

struct CovarianceEstimate {
    BlockCovariance cov;
    std::vector<CgDiagnostics> cg;

    bool all_converged() const {
        for (const CgDiagnostics& d : cg)
            if (!d.converged) return false;
        return true;
    }
};

struct CovarianceOptions {
    double cg_tol = 1e-8;
    int cg_maxiter = 300;
    bool shrink = true;
    int threads = 0;
};

namespace detail {

inline std::vector<std::vector<int>> group_indices(const std::vector<int>& assignments,
                                                   std::size_t num_groups) {
    std::vector<std::vector<int>> idx(num_groups);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        const int g = assignments[i];
        if (g < 0 || std::size_t(g) >= num_groups)
            throw std::invalid_argument("group assignment out of range");
        idx[g].push_back(int(i));
    }
    return idx;
}

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
    Eigen::MatrixXd out(Eigen::Index(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(Eigen::Index(r)) = m.row(rows[r]);
    return out;
}

}  // namespace detail

// Least-squares mean of the scaled clean coefficients: per block solve
// (sum_i B_i^2 + delta*I) mu = sum_i B_i y_i with a trace-scaled Tikhonov
// delta guarding against overlapping CTF zero crossings.
inline MeanEstimate estimate_mean(const std::vector<BlockStack>& y,
                                  const std::vector<BlockOperator>& group_ops,
                                  const std::vector<int>& assignments) {
    if (y.empty()) throw std::invalid_argument("estimate_mean: no blocks");
    if (assignments.empty()) throw std::invalid_argument("estimate_mean: n must be >= 1");
    const std::size_t nb = y.size();
    const auto idx = detail::group_indices(assignments, group_ops.size());

    MeanEstimate est;
    est.mu.blocks.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const int p = int(y[b].re.cols());
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
        Eigen::VectorXd rhs_re = Eigen::VectorXd::Zero(p);
        Eigen::VectorXd rhs_im = Eigen::VectorXd::Zero(p);
        for (std::size_t g = 0; g < idx.size(); ++g) {
            if (idx[g].empty()) continue;
            const Eigen::MatrixXd& Bg = group_ops[g].blocks.at(b);
            H.noalias() += double(idx[g].size()) * Bg * Bg;
            Eigen::VectorXd sum_re = Eigen::VectorXd::Zero(p);
            Eigen::VectorXd sum_im = Eigen::VectorXd::Zero(p);
            for (int i : idx[g]) {
                sum_re += y[b].re.row(i);
                sum_im += y[b].im.row(i);
            }
            rhs_re.noalias() += Bg * sum_re;
            rhs_im.noalias() += Bg * sum_im;
        }
        const double delta = 1e-10 * H.trace() / p;
        H.diagonal().array() += delta;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        if (ldlt.info() != Eigen::Success)
            throw std::runtime_error("estimate_mean: singular normal equations");
        const Eigen::VectorXd mre = ldlt.solve(rhs_re);
        const Eigen::VectorXd mim = ldlt.solve(rhs_im);
        Eigen::VectorXcd mu(p);
        mu.real() = mre;
        mu.imag() = mim;
        est.mu.blocks[b] = std::move(mu);
    }
    return est;
}

namespace detail {

// Marchenko-Pastur style clipping of the backprojected right-hand side:
// eigenvalues below sigma^2*(2*sqrt(gamma)+gamma) are noise-edge artifacts.
inline Eigen::MatrixXd shrink_rhs(const Eigen::MatrixXd& M, double sigma2, double gamma) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(M);
    const double tau = sigma2 * (2.0 * std::sqrt(gamma) + gamma);
    Eigen::VectorXd ev = eig.eigenvalues();
    for (int i = 0; i < ev.size(); ++i)
        if (ev[i] < tau) ev[i] = 0.0;
    return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

// Solves sum_g w_g B_g^2 X B_g^2 = M for the block covariance by conjugate
// gradient on symmetric matrices under the Frobenius inner product.  The map
// is PSD (each term is a congruence by the PSD matrix B_g^2), so CG applies;
// near-singular directions (all CTFs share the zero-frequency sign change)
// surface as slow convergence, which is reported, not fatal.
inline CovarianceEstimate estimate_covariance(const std::vector<BlockStack>& y,
                                              const std::vector<BlockOperator>& group_ops,
                                              const std::vector<int>& assignments,
                                              const MeanEstimate& mean, double sigma2,
                                              const CovarianceOptions& opts = {}) {
    const std::size_t nb = y.size();
    const std::size_t n = assignments.size();
    if (n < 2) throw std::invalid_argument("estimate_covariance: n must be >= 2");
    if (mean.mu.blocks.size() < nb)
        throw std::invalid_argument("estimate_covariance: mean/block count mismatch");
    const auto idx = detail::group_indices(assignments, group_ops.size());

    CovarianceEstimate est;
    est.cov.blocks.resize(nb);
    est.cg.resize(nb);

    parallel_for(
        nb,
        [&](std::size_t b) {
            const int p = int(y[b].re.cols());
            const Eigen::VectorXd mu_re = mean.mu.blocks[b].real();
            const Eigen::VectorXd mu_im = mean.mu.blocks[b].imag();

            // Right-hand side M = (1/n) sum_g B_g R_g B_g - sigma^2 H, where
            // R_g is the real part of the group residual scatter and
            // H = sum_g (n_g/n) B_g^2.
            Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, p);
            std::vector<Eigen::MatrixXd> B2(idx.size());
            std::vector<double> w(idx.size(), 0.0);
            for (std::size_t g = 0; g < idx.size(); ++g) {
                if (idx[g].empty()) continue;
                const Eigen::MatrixXd& Bg = group_ops[g].blocks.at(b);
                w[g] = double(idx[g].size()) / double(n);
                B2[g] = Bg * Bg;

                Eigen::MatrixXd res_re = detail::gather_rows(y[b].re, idx[g]);
                Eigen::MatrixXd res_im = detail::gather_rows(y[b].im, idx[g]);
                res_re.rowwise() -= (Bg * mu_re).transpose();
                res_im.rowwise() -= (Bg * mu_im).transpose();
                const Eigen::MatrixXd R =
                    res_re.transpose() * res_re + res_im.transpose() * res_im;
                M.noalias() += Bg * (R / double(n)) * Bg;
                M.noalias() -= sigma2 * w[g] * B2[g];
            }
            M = 0.5 * (M + M.transpose()).eval();
            if (opts.shrink) M = detail::shrink_rhs(M, sigma2, double(p) / double(n));

            const auto apply = [&](const Eigen::MatrixXd& X) {
                Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, p);
                for (std::size_t g = 0; g < idx.size(); ++g)
                    if (w[g] > 0.0) out.noalias() += w[g] * B2[g] * X * B2[g];
                return out;
            };

            CgDiagnostics diag;
            diag.block = int(b);
            const double norm_m = M.norm();
            Eigen::MatrixXd X = Eigen::MatrixXd::Zero(p, p);
            if (norm_m == 0.0) {
                diag.converged = true;
            } else {
                Eigen::MatrixXd r = M, pm = M;
                double rs = r.squaredNorm();
                diag.converged = false;
                for (int it = 1; it <= opts.cg_maxiter; ++it) {
                    const Eigen::MatrixXd ap = apply(pm);
                    const double pap = pm.cwiseProduct(ap).sum();
                    if (pap <= 0.0) break;  // exact null direction reached
                    const double alpha = rs / pap;
                    X += alpha * pm;
                    r -= alpha * ap;
                    const double rs_new = r.squaredNorm();
                    diag.iterations = it;
                    if (std::sqrt(rs_new) <= opts.cg_tol * norm_m) {
                        diag.converged = true;
                        rs = rs_new;
                        break;
                    }
                    pm = r + (rs_new / rs) * pm;
                    rs = rs_new;
                }
                diag.rel_residual = std::sqrt(rs) / norm_m;
                if (diag.rel_residual <= opts.cg_tol) diag.converged = true;
            }
            est.cov.blocks[b] = 0.5 * (X + X.transpose());
            est.cg[b] = diag;
        },
        opts.threads);
    return est;
}

// Least-squares contrast variance from the block-0 statistics: project the
// covariance onto the rank-one direction mu*ones that contrast variation
// excites.  The raw value is clamped at zero; values above one are flagged.
inline VarianceEstimate estimate_var_c(const Eigen::MatrixXd& cov0,
                                       const Eigen::VectorXd& mu0,
                                       const Eigen::VectorXd& ones0) {
    const double mu_norm = mu0.norm();
    if (mu_norm == 0.0) throw std::invalid_argument("estimate_var_c: zero mean");
    const double mu_dot_ones = mu0.dot(ones0);
    if (std::abs(mu_dot_ones) < 1e-12 * mu_norm * ones0.norm())
        throw std::runtime_error(
            "estimate_var_c: mean has no overlap with the all-ones functional "
            "(mean estimation failed)");
    VarianceEstimate est;
    est.raw_var_c = mu0.dot(cov0 * ones0) / (mu0.squaredNorm() * mu_dot_ones);
    est.var_c = std::max(est.raw_var_c, 0.0);
    est.clamped = est.raw_var_c < 0.0;
    est.suspicious = est.raw_var_c > 1.0;
    return est;
}

// Sigma_x = (Sigma_cx - Var(c) mu mu^T) / (Var(c)+1).  The rank-one term only
// lives in block 0; higher blocks have zero mean under uniform viewing
// directions, so they are just rescaled.
inline BlockCovariance split_sigma_x(const BlockCovariance& cov_cx, double var_c,
                                     const Eigen::VectorXd& mu0) {
    if (var_c < 0.0) throw std::invalid_argument("split_sigma_x: var_c must be >= 0");
    if (cov_cx.blocks.empty()) throw std::invalid_argument("split_sigma_x: empty");
    BlockCovariance out;
    out.blocks.resize(cov_cx.blocks.size());
    out.blocks[0] = (cov_cx.blocks[0] - var_c * mu0 * mu0.transpose()) / (var_c + 1.0);
    for (std::size_t b = 1; b < cov_cx.blocks.size(); ++b)
        out.blocks[b] = cov_cx.blocks[b] / (var_c + 1.0);
    return out;
}

inline BlockCovariance recombine(const BlockCovariance& cov_x, double var_c,
                                 const Eigen::VectorXd& mu0) {
    if (var_c < 0.0) throw std::invalid_argument("recombine: var_c must be >= 0");
    if (cov_x.blocks.empty()) throw std::invalid_argument("recombine: empty");
    BlockCovariance out;
    out.blocks.resize(cov_x.blocks.size());
    out.blocks[0] = (var_c + 1.0) * cov_x.blocks[0] + var_c * mu0 * mu0.transpose();
    for (std::size_t b = 1; b < cov_x.blocks.size(); ++b)
        out.blocks[b] = (var_c + 1.0) * cov_x.blocks[b];
    return out;
}

inline Eigen::MatrixXd psd_clip(const Eigen::MatrixXd& S) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (S + S.transpose()));
    const Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
    return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

namespace detail {

// Eigendecomposition with the reproducible ordering used by the refiners:
// eigenvalues descending, each eigenvector's first non-negligible entry
// positive.
inline void eigh_descending(const Eigen::MatrixXd& S, Eigen::VectorXd& lam,
                            Eigen::MatrixXd& V) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (S + S.transpose()));
    if (eig.info() != Eigen::Success)
        throw std::runtime_error("eigendecomposition failed");
    lam = eig.eigenvalues().reverse();
    V = eig.eigenvectors().rowwise().reverse();
    for (int j = 0; j < V.cols(); ++j) {
        for (int i = 0; i < V.rows(); ++i) {
            if (std::abs(V(i, j)) > 1e-12) {
                if (V(i, j) < 0.0) V.col(j) = -V.col(j);
                break;
            }
        }
    }
}

}  // namespace detail

struct GsRefinement {
    Eigen::MatrixXd matrix;
    double dropped_eigenvalue = 0.0;  // eigenvalue zeroed on the ones direction
    bool warned = false;              // it was non-negligible
};

// Rotate the clipped eigenbasis so the all-ones functional is an exact null
// vector: QR-orthonormalize [ones, v_1, ..., v_{p-1}], drop the ones column
// to the back and zero its eigenvalue.
inline GsRefinement refine_gs(const Eigen::MatrixXd& sigma_x0,
                              const Eigen::VectorXd& ones0) {
    const int p = int(sigma_x0.rows());
    if (sigma_x0.cols() != p) throw std::invalid_argument("refine_gs: square input required");
    if (ones0.size() != p) throw std::invalid_argument("refine_gs: ones length mismatch");

    Eigen::VectorXd lam;
    Eigen::MatrixXd V;
    detail::eigh_descending(sigma_x0, lam, V);
    lam = lam.cwiseMax(0.0);

    Eigen::MatrixXd A(p, p);
    A.col(0) = ones0;
    A.rightCols(p - 1) = V.leftCols(p - 1);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
    Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(p, p);
    const Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < p; ++j)
        if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);

    Eigen::MatrixXd U(p, p);
    U.leftCols(p - 1) = Q.rightCols(p - 1);
    U.col(p - 1) = Q.col(0);

    GsRefinement out;
    out.dropped_eigenvalue = lam[p - 1];
    out.warned = lam[p - 1] > 1e-10 * std::max(lam[0], 0.0);
    lam[p - 1] = 0.0;
    const Eigen::MatrixXd res = U * lam.asDiagonal() * U.transpose();
    out.matrix = 0.5 * (res + res.transpose());
    return out;
}

struct SdpRefinement {
    Eigen::MatrixXd matrix;
    int iterations = 0;
    bool converged = false;
};

// Nearest (Frobenius) matrix that is PSD with the ones vector in its null
// space, by Dykstra alternating projections: eigenvalue clipping with a
// running correction, then the two-sided projection off the ones direction.
inline SdpRefinement refine_sdp(const Eigen::MatrixXd& sigma_x0,
                                const Eigen::VectorXd& ones0, double tol = 1e-8,
                                int maxiter = 1000) {
    const int p = int(sigma_x0.rows());
    if (sigma_x0.cols() != p) throw std::invalid_argument("refine_sdp: square input required");
    if (ones0.size() != p) throw std::invalid_argument("refine_sdp: ones length mismatch");
    const Eigen::VectorXd u = ones0 / ones0.norm();
    const Eigen::MatrixXd P = Eigen::MatrixXd::Identity(p, p) - u * u.transpose();

    SdpRefinement out;
    Eigen::MatrixXd X = 0.5 * (sigma_x0 + sigma_x0.transpose());
    Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(p, p);
    Eigen::MatrixXd prev = X;
    for (int it = 1; it <= maxiter; ++it) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(X + corr);
        const Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
        const Eigen::MatrixXd psd =
            eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
        corr = (X + corr) - psd;
        X = P * psd * P;
        out.iterations = it;
        if ((X - prev).norm() < tol) {
            out.converged = true;
            break;
        }
        prev = X;
    }
    out.matrix = 0.5 * (X + X.transpose());
    return out;
}

}  // namespace cryocontrast
