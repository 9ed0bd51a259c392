#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cryocontrast/basis.hpp>
#include <cryocontrast/covariance.hpp>
#include <cryocontrast/ctf.hpp>
#include <cryocontrast/parallel.hpp>

namespace cryocontrast {

/// Estimated contrasts below this floor mark an image as junk rather than
/// signal; such images are flagged and excluded instead of divided by a
/// near-zero number.
inline constexpr double kContrastFloor = 0.05;

/// Per-image contrast estimates, normalized so their mean is exactly 1.
struct ContrastEstimates {
    Eigen::VectorXd c_hat;
    std::string method;          // cwf | cwf-gs | cwf-sdp | oracle-cov | oracle-clean | trivial
    double normalization = 1.0;  // mean raw block-0 sum that was divided out
    bool negative_sums_flagged = false;  // more than 1% of raw sums negative
};

/// A restored coefficient stack (rows are images, realified layout).
struct RestoredImages {
    Eigen::MatrixXd coeffs;
    std::string method;  // cwf | cwf-norm | gs-norm | sdp-norm | gs-2stage | sdp-2stage
    std::vector<char> excluded;  // images whose contrast sat at or below the floor
};

namespace detail {

/// Gain of the per-block LMMSE estimator mu + S B (B S B + sigma2 I)^{-1}
/// (y - B mu), factorized once per (group, block).
inline Eigen::MatrixXd lmmse_gain(const Eigen::MatrixXd& S, const Eigen::MatrixXd& B,
                                  double sigma2) {
    Eigen::MatrixXd inner = B * S * B;
    inner = 0.5 * (inner + inner.transpose()).eval();
    inner.diagonal().array() += sigma2;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(inner);
    const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
    if (ldlt.info() != Eigen::Success ||
        !(d.minCoeff() > 1e-13 * std::max(d.maxCoeff(), 0.0)))
        throw std::runtime_error(
            "cwf_filter: inner matrix B*S*B + sigma2*I is singular "
            "(degenerate setup, e.g. sigma2 = 0 with rank-deficient B or S)");
    // G = S B inner^{-1}; transpose of the symmetric-solve of B S.
    return ldlt.solve(B * S).transpose();
}

struct BlockGain {
    Eigen::MatrixXd gain;
    Eigen::VectorXd shift_re, shift_im;  // mu - G B mu
};

inline void check_batch_shapes(const std::vector<BlockStack>& ys,
                               const std::vector<BlockOperator>& ops,
                               std::size_t num_blocks,
                               const std::vector<int>& assignments) {
    if (ys.empty() || ops.empty()) throw std::invalid_argument("restore: empty input");
    if (ys.size() < num_blocks)
        throw std::invalid_argument("restore: fewer blocks than the covariance");
    for (const BlockOperator& op : ops)
        if (op.blocks.size() < num_blocks)
            throw std::invalid_argument("restore: operator has too few blocks");
    const Eigen::Index n = ys[0].re.rows();
    if (static_cast<Eigen::Index>(assignments.size()) != n)
        throw std::invalid_argument("restore: assignment count mismatch");
    for (int g : assignments)
        if (g < 0 || g >= static_cast<int>(ops.size()))
            throw std::invalid_argument("restore: group index out of range");
}

}  // namespace detail

/// CWF/LMMSE filter with factorizations cached per (defocus group, block).
/// Filtering a stack is then a pure data-parallel pass over images.
class CwfFilter {
  public:
    CwfFilter(const std::vector<BlockOperator>& ops, const BlockCovariance& cov,
              const FBCoeffs& mu, double sigma2, int threads = 0)
        : num_groups_(static_cast<int>(ops.size())),
          num_blocks_(static_cast<int>(cov.blocks.size())) {
        if (ops.empty() || cov.blocks.empty())
            throw std::invalid_argument("CwfFilter: empty operators or covariance");
        if (mu.blocks.size() < cov.blocks.size())
            throw std::invalid_argument("CwfFilter: mean has fewer blocks than covariance");
        for (const BlockOperator& op : ops)
            if (op.blocks.size() < cov.blocks.size())
                throw std::invalid_argument("CwfFilter: operator has too few blocks");

        factors_.resize(std::size_t(num_groups_) * num_blocks_);
        std::vector<std::string> errors(factors_.size());
        parallel_for(
            factors_.size(),
            [&](std::size_t idx) {
                const int g = static_cast<int>(idx) / num_blocks_;
                const int b = static_cast<int>(idx) % num_blocks_;
                try {
                    const Eigen::MatrixXd& B = ops[g].blocks[b];
                    detail::BlockGain f;
                    f.gain = detail::lmmse_gain(cov.blocks[b], B, sigma2);
                    const Eigen::VectorXd mre = mu.blocks[b].real();
                    const Eigen::VectorXd mim = mu.blocks[b].imag();
                    f.shift_re = mre - f.gain * (B * mre);
                    f.shift_im = mim - f.gain * (B * mim);
                    factors_[idx] = std::move(f);
                } catch (const std::exception& e) {
                    errors[idx] = e.what();
                }
            },
            threads);
        for (std::size_t idx = 0; idx < errors.size(); ++idx)
            if (!errors[idx].empty())
                throw std::runtime_error("CwfFilter: group " +
                                         std::to_string(idx / num_blocks_) + " block " +
                                         std::to_string(idx % num_blocks_) + ": " +
                                         errors[idx]);
    }

    int num_blocks() const { return num_blocks_; }

    const detail::BlockGain& factor(int group, int block) const {
        return factors_.at(std::size_t(group) * num_blocks_ + block);
    }

    /// Filter every image in the stack: per block, x = shift + G y.
    std::vector<BlockStack> apply(const std::vector<BlockStack>& ys,
                                  const std::vector<int>& assignments,
                                  int threads = 0) const {
        if (static_cast<int>(ys.size()) < num_blocks_)
            throw std::invalid_argument("CwfFilter::apply: too few blocks");
        const Eigen::Index n = ys[0].re.rows();
        if (static_cast<Eigen::Index>(assignments.size()) != n)
            throw std::invalid_argument("CwfFilter::apply: assignment count mismatch");
        for (int g : assignments)
            if (g < 0 || g >= num_groups_)
                throw std::invalid_argument("CwfFilter::apply: group index out of range");
        std::vector<BlockStack> out(num_blocks_);
        parallel_for(
            std::size_t(num_blocks_),
            [&](std::size_t b) {
                const Eigen::Index p = ys[b].re.cols();
                out[b].re.resize(n, p);
                out[b].im.resize(n, p);
                for (Eigen::Index i = 0; i < n; ++i) {
                    const detail::BlockGain& f = factor(assignments[i], int(b));
                    out[b].re.row(i) =
                        f.shift_re.transpose() + ys[b].re.row(i) * f.gain.transpose();
                    out[b].im.row(i) =
                        f.shift_im.transpose() + ys[b].im.row(i) * f.gain.transpose();
                }
            },
            threads);
        return out;
    }

  private:
    int num_groups_, num_blocks_;
    std::vector<detail::BlockGain> factors_;
};

/// Single-image LMMSE filter: per block, mu + S B (B S B + sigma2 I)^{-1}
/// (y - B mu).  Blocks beyond the covariance are passed through untouched.
inline FBCoeffs cwf_filter(const FBCoeffs& y, const BlockOperator& B,
                           const BlockCovariance& cov, const FBCoeffs& mu,
                           double sigma2) {
    if (y.blocks.size() < cov.blocks.size() || B.blocks.size() < cov.blocks.size() ||
        mu.blocks.size() < cov.blocks.size())
        throw std::invalid_argument("cwf_filter: block count mismatch");
    FBCoeffs out = y;
    for (std::size_t b = 0; b < cov.blocks.size(); ++b) {
        const Eigen::MatrixXd G = detail::lmmse_gain(cov.blocks[b], B.blocks[b], sigma2);
        const Eigen::VectorXd mre = mu.blocks[b].real(), mim = mu.blocks[b].imag();
        const Eigen::VectorXd xre =
            mre + G * (y.blocks[b].real() - B.blocks[b] * mre);
        const Eigen::VectorXd xim =
            mim + G * (y.blocks[b].imag() - B.blocks[b] * mim);
        out.blocks[b] = xre + std::complex<double>(0, 1) * xim;
    }
    return out;
}

/// Realified coefficient rows from per-block stacks (inverse of
/// make_block_stacks).
inline Eigen::MatrixXd block_stacks_to_coeffs(const std::vector<BlockStack>& stacks,
                                              const FBBasis& basis) {
    if (static_cast<int>(stacks.size()) != basis.num_blocks())
        throw std::invalid_argument("block_stacks_to_coeffs: block count mismatch");
    const Eigen::Index n = stacks.empty() ? 0 : stacks[0].re.rows();
    Eigen::MatrixXd coeffs(n, basis.real_dim());
    for (int bi = 0; bi < basis.num_blocks(); ++bi) {
        const int p = basis.block_dim(bi), off = basis.block_offset(bi);
        if (basis.k_of(bi) == 0) {
            coeffs.middleCols(off, p) = stacks[bi].re;
        } else {
            for (int q = 0; q < p; ++q) {
                coeffs.col(off + 2 * q) = stacks[bi].re.col(q);
                coeffs.col(off + 2 * q + 1) = stacks[bi].im.col(q);
            }
        }
    }
    return coeffs;
}

/// Per-image contrast estimates: the block-0 pixel-sum functional applied to
/// the filtered coefficients, normalized to unit mean.  Only block 0 of the
/// filter is ever formed, so each image costs O(p_0) after O(D p_0^3) setup.
inline ContrastEstimates estimate_contrasts(const std::vector<BlockStack>& ys,
                                            const std::vector<BlockOperator>& ops,
                                            const BlockCovariance& cov_cx,
                                            const FBCoeffs& mu, double sigma2,
                                            const OnesVector& ones,
                                            const std::vector<int>& assignments,
                                            const std::string& method = "cwf") {
    detail::check_batch_shapes(ys, ops, 1, assignments);
    if (cov_cx.blocks.empty() || mu.blocks.empty())
        throw std::invalid_argument("estimate_contrasts: empty covariance or mean");
    const Eigen::Index n = ys[0].re.rows();
    const Eigen::Index p0 = ys[0].re.cols();
    if (ones.block0.size() != p0)
        throw std::invalid_argument("estimate_contrasts: ones-vector length mismatch");

    // Per group, s_i = a_g + w_g . y0_i with a_g = 1^T (mu - G B mu) and
    // w_g = G^T 1.
    const int D = static_cast<int>(ops.size());
    const Eigen::VectorXd mu0 = mu.blocks[0].real();
    Eigen::VectorXd a(D);
    Eigen::MatrixXd w(p0, D);
    for (int g = 0; g < D; ++g) {
        const Eigen::MatrixXd& B = ops[g].blocks[0];
        const Eigen::MatrixXd G = detail::lmmse_gain(cov_cx.blocks[0], B, sigma2);
        a[g] = ones.block0.dot(mu0 - G * (B * mu0));
        w.col(g) = G.transpose() * ones.block0;
    }

    Eigen::VectorXd raw(n);
    for (Eigen::Index i = 0; i < n; ++i)
        raw[i] = a[assignments[i]] + ys[0].re.row(i).dot(w.col(assignments[i]));

    ContrastEstimates out;
    out.method = method;
    out.negative_sums_flagged = (raw.array() < 0.0).count() > 0.01 * double(n);
    out.normalization = raw.mean();
    if (!(std::abs(out.normalization) > 1e-14 * raw.cwiseAbs().mean()))
        throw std::runtime_error(
            "estimate_contrasts: mean filtered pixel sum is zero (all-zero "
            "restorations?)");
    out.c_hat = raw / out.normalization;
    return out;
}

/// The trivial benchmark estimator: every contrast equal to 1.
inline ContrastEstimates trivial_contrasts(Eigen::Index n) {
    if (n < 1) throw std::invalid_argument("trivial_contrasts: empty batch");
    return ContrastEstimates{Eigen::VectorXd::Ones(n), "trivial", 1.0, false};
}

/// Contrast oracle that sees the clean images: c_i = <y_i, B x_i> / |B x_i|^2,
/// normalized to unit mean like every other estimator.
inline ContrastEstimates oracle_contrasts_clean(const std::vector<BlockStack>& ys,
                                                const std::vector<BlockStack>& clean,
                                                const std::vector<BlockOperator>& ops,
                                                const std::vector<int>& assignments) {
    detail::check_batch_shapes(ys, ops, ys.size(), assignments);
    if (clean.size() != ys.size())
        throw std::invalid_argument("oracle_contrasts_clean: stack size mismatch");
    const Eigen::Index n = ys[0].re.rows();
    Eigen::VectorXd num = Eigen::VectorXd::Zero(n), den = Eigen::VectorXd::Zero(n);
    for (std::size_t b = 0; b < ys.size(); ++b) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::MatrixXd& B = ops[assignments[i]].blocks[b];
            const Eigen::VectorXd bre = B * clean[b].re.row(i).transpose();
            const Eigen::VectorXd bim = B * clean[b].im.row(i).transpose();
            num[i] += ys[b].re.row(i).dot(bre) + ys[b].im.row(i).dot(bim);
            den[i] += bre.squaredNorm() + bim.squaredNorm();
        }
    }
    ContrastEstimates out;
    out.method = "oracle-clean";
    Eigen::VectorXd raw = num.cwiseQuotient(den);
    out.negative_sums_flagged = (raw.array() < 0.0).count() > 0.01 * double(n);
    out.normalization = raw.mean();
    if (!(std::abs(out.normalization) > 1e-14 * raw.cwiseAbs().mean()))
        throw std::runtime_error("oracle_contrasts_clean: zero mean contrast");
    out.c_hat = raw / out.normalization;
    return out;
}

/// Divide one restored image by its estimated contrast.
inline FBCoeffs restore_normalize(const FBCoeffs& cx_hat, double c_hat,
                                  double eps = kContrastFloor) {
    if (!(c_hat > eps))
        throw std::invalid_argument("restore_normalize: contrast at or below floor");
    FBCoeffs out = cx_hat;
    for (Eigen::VectorXcd& blk : out.blocks) blk /= c_hat;
    return out;
}

/// Batch normalization: rows with contrast at or below the floor are flagged
/// as junk and left unnormalized; consumers must skip them.
inline RestoredImages restore_normalize(const Eigen::MatrixXd& coeffs,
                                        const Eigen::VectorXd& c_hat,
                                        const std::string& method,
                                        double eps = kContrastFloor) {
    if (coeffs.rows() != c_hat.size())
        throw std::invalid_argument("restore_normalize: contrast count mismatch");
    RestoredImages out;
    out.coeffs = coeffs;
    out.method = method;
    out.excluded.assign(std::size_t(coeffs.rows()), 0);
    for (Eigen::Index i = 0; i < coeffs.rows(); ++i) {
        if (c_hat[i] > eps)
            out.coeffs.row(i) /= c_hat[i];
        else
            out.excluded[std::size_t(i)] = 1;
    }
    return out;
}

/// Single-image 2-stage restoration: the contrast is absorbed into the
/// operator, so the filter sees c B and the contrast-free prior (Sigma_x, mu).
inline FBCoeffs restore_2stage(const FBCoeffs& y, const BlockOperator& B, double c_hat,
                               const BlockCovariance& cov_x, const FBCoeffs& mu,
                               double sigma2, double eps = kContrastFloor) {
    if (!(c_hat > eps))
        throw std::invalid_argument("restore_2stage: contrast at or below floor");
    BlockOperator scaled = B;
    for (Eigen::MatrixXd& blk : scaled.blocks) blk *= c_hat;
    return cwf_filter(y, scaled, cov_x, mu, sigma2);
}

/// Batch 2-stage restoration.  Factorizations are per image (the operator is
/// scaled by that image's contrast), parallel across images.
inline RestoredImages restore_2stage_batch(const std::vector<BlockStack>& ys,
                                           const std::vector<BlockOperator>& ops,
                                           const std::vector<int>& assignments,
                                           const Eigen::VectorXd& c_hat,
                                           const BlockCovariance& cov_x,
                                           const FBCoeffs& mu, double sigma2,
                                           const FBBasis& basis,
                                           const std::string& method,
                                           int threads = 0,
                                           double eps = kContrastFloor) {
    detail::check_batch_shapes(ys, ops, cov_x.blocks.size(), assignments);
    const Eigen::Index n = ys[0].re.rows();
    if (c_hat.size() != n)
        throw std::invalid_argument("restore_2stage_batch: contrast count mismatch");
    const int nb = static_cast<int>(cov_x.blocks.size());
    const int D = static_cast<int>(ops.size());

    // Shared per-(group, block) pieces; the per-image inner matrix is then
    // c^2 BSB + sigma2 I and the gain c SB (c^2 BSB + sigma2 I)^{-1}.
    std::vector<Eigen::MatrixXd> bsb(std::size_t(D) * nb), sb(std::size_t(D) * nb);
    std::vector<Eigen::VectorXd> bmu_re(std::size_t(D) * nb), bmu_im(std::size_t(D) * nb);
    for (int g = 0; g < D; ++g)
        for (int b = 0; b < nb; ++b) {
            const Eigen::MatrixXd& B = ops[g].blocks[b];
            const std::size_t idx = std::size_t(g) * nb + b;
            sb[idx] = cov_x.blocks[b] * B;
            bsb[idx] = B * sb[idx];
            bsb[idx] = 0.5 * (bsb[idx] + bsb[idx].transpose()).eval();
            bmu_re[idx] = B * mu.blocks[b].real();
            bmu_im[idx] = B * mu.blocks[b].imag();
        }

    RestoredImages out;
    out.method = method;
    out.excluded.assign(std::size_t(n), 0);
    std::vector<BlockStack> filtered(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) {
        filtered[b].re = Eigen::MatrixXd::Zero(n, cov_x.blocks[b].rows());
        filtered[b].im = Eigen::MatrixXd::Zero(n, cov_x.blocks[b].rows());
    }
    std::vector<std::string> errors(static_cast<std::size_t>(n));
    parallel_for(
        std::size_t(n),
        [&](std::size_t i) {
            const double c = c_hat[Eigen::Index(i)];
            if (!(c > eps)) {
                out.excluded[i] = 1;
                return;
            }
            const int g = assignments[i];
            try {
                for (int b = 0; b < nb; ++b) {
                    const std::size_t idx = std::size_t(g) * nb + b;
                    Eigen::MatrixXd inner = (c * c) * bsb[idx];
                    inner.diagonal().array() += sigma2;
                    const Eigen::LDLT<Eigen::MatrixXd> ldlt(inner);
                    const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
                    if (ldlt.info() != Eigen::Success ||
                        !(d.minCoeff() > 1e-13 * std::max(d.maxCoeff(), 0.0)))
                        throw std::runtime_error("singular inner matrix");
                    const Eigen::VectorXd rre =
                        ys[b].re.row(i).transpose() - c * bmu_re[idx];
                    const Eigen::VectorXd rim =
                        ys[b].im.row(i).transpose() - c * bmu_im[idx];
                    filtered[b].re.row(i) =
                        (mu.blocks[b].real() + c * (sb[idx] * ldlt.solve(rre)))
                            .transpose();
                    filtered[b].im.row(i) =
                        (mu.blocks[b].imag() + c * (sb[idx] * ldlt.solve(rim)))
                            .transpose();
                }
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        },
        threads);
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (!errors[i].empty())
            throw std::runtime_error("restore_2stage_batch: image " + std::to_string(i) +
                                     ": " + errors[i]);

    // Pad to the full basis width so the output can be evaluated directly.
    if (nb == basis.num_blocks()) {
        out.coeffs = block_stacks_to_coeffs(filtered, basis);
    } else {
        std::vector<BlockStack> padded = filtered;
        for (int b = nb; b < basis.num_blocks(); ++b) {
            padded.push_back(BlockStack{
                Eigen::MatrixXd::Zero(n, basis.block_dim(b)),
                Eigen::MatrixXd::Zero(n, basis.block_dim(b))});
        }
        out.coeffs = block_stacks_to_coeffs(padded, basis);
    }
    return out;
}

enum class RefineMethod { gs, sdp };
enum class RestoreOption { normalization, two_stage };

namespace detail {

inline std::vector<BlockStack> slice_block0(const std::vector<BlockStack>& ys) {
    if (ys.empty()) throw std::invalid_argument("slice_block0: empty stack");
    return {ys[0]};
}

inline std::vector<BlockOperator> slice_block0(const std::vector<BlockOperator>& ops) {
    std::vector<BlockOperator> out(ops.size());
    for (std::size_t g = 0; g < ops.size(); ++g) {
        if (ops[g].blocks.empty())
            throw std::invalid_argument("slice_block0: empty operator");
        out[g].blocks = {ops[g].blocks[0]};
    }
    return out;
}

struct RefinedBlock0 {
    Eigen::MatrixXd sigma_x0;   // refined Sigma_x block 0
    Eigen::MatrixXd sigma_cx0;  // recombined Sigma_cx block 0
    bool gs_warned = false;
    double gs_dropped = 0.0;
    int sdp_iterations = 0;
    bool sdp_converged = true;
};

inline RefinedBlock0 refine_block0(const Eigen::MatrixXd& cov0_raw, double var_c,
                                   const Eigen::VectorXd& mu0,
                                   const Eigen::VectorXd& ones0, RefineMethod method) {
    RefinedBlock0 out;
    const Eigen::MatrixXd sx0 =
        (cov0_raw - var_c * mu0 * mu0.transpose()) / (var_c + 1.0);
    if (method == RefineMethod::gs) {
        const GsRefinement gs = refine_gs(sx0, ones0);
        out.sigma_x0 = gs.matrix;
        out.gs_warned = gs.warned;
        out.gs_dropped = gs.dropped_eigenvalue;
    } else {
        const SdpRefinement sdp = refine_sdp(sx0, ones0);
        out.sigma_x0 = sdp.matrix;
        out.sdp_iterations = sdp.iterations;
        out.sdp_converged = sdp.converged;
    }
    out.sigma_cx0 =
        (var_c + 1.0) * out.sigma_x0 + var_c * mu0 * mu0.transpose();
    return out;
}

}  // namespace detail

/// Everything Algorithm 1 produces, intermediates included.
struct Algorithm1Result {
    ContrastEstimates contrasts;
    Eigen::VectorXd mu0;
    Eigen::MatrixXd cov0_raw;         // unrefined Sigma_cx block 0
    Eigen::MatrixXd cov0_x_refined;   // refined Sigma_x block 0
    Eigen::MatrixXd cov0_cx_refined;  // recombined Sigma_cx block 0
    VarianceEstimate var_c;
    std::vector<CgDiagnostics> cg;
    bool gs_warned = false;
    double gs_dropped = 0.0;
    int sdp_iterations = 0;
    bool sdp_converged = true;
};

/// Ab-initio contrast estimation: block-0 mean and covariance, contrast
/// variance, refinement, recombination, block-0 filter, unit-mean
/// normalization.
inline Algorithm1Result run_algorithm1(const std::vector<BlockStack>& ys,
                                       const std::vector<BlockOperator>& ops,
                                       const std::vector<int>& assignments,
                                       double sigma2, const FBBasis& basis,
                                       RefineMethod method,
                                       const CovarianceOptions& opts = {}) {
    const std::vector<BlockStack> y0 = detail::slice_block0(ys);
    const std::vector<BlockOperator> ops0 = detail::slice_block0(ops);
    const OnesVector ones = ones_vector(basis);

    const MeanEstimate mean = estimate_mean(y0, ops0, assignments);
    const CovarianceEstimate cov = estimate_covariance(y0, ops0, assignments, mean,
                                                       sigma2, opts);
    Algorithm1Result out;
    out.mu0 = mean.block0();
    out.cov0_raw = cov.cov.blocks[0];
    out.cg = cov.cg;
    out.var_c = estimate_var_c(out.cov0_raw, out.mu0, ones.block0);

    const detail::RefinedBlock0 ref = detail::refine_block0(
        out.cov0_raw, out.var_c.var_c, out.mu0, ones.block0, method);
    out.cov0_x_refined = ref.sigma_x0;
    out.cov0_cx_refined = ref.sigma_cx0;
    out.gs_warned = ref.gs_warned;
    out.gs_dropped = ref.gs_dropped;
    out.sdp_iterations = ref.sdp_iterations;
    out.sdp_converged = ref.sdp_converged;

    BlockCovariance cx_rf;
    cx_rf.blocks = {out.cov0_cx_refined};
    out.contrasts = estimate_contrasts(
        y0, ops0, cx_rf, mean.mu, sigma2, ones, assignments,
        method == RefineMethod::gs ? "cwf-gs" : "cwf-sdp");
    return out;
}

/// Everything Algorithm 2 produces.
struct Algorithm2Result {
    RestoredImages restored;
    ContrastEstimates contrasts;
    MeanEstimate mean;
    BlockCovariance cov_raw;        // unrefined Sigma_cx, all blocks
    BlockCovariance cov_filter;     // covariance actually used by the filter
    VarianceEstimate var_c;
    std::vector<CgDiagnostics> cg;
    bool gs_warned = false;
    double gs_dropped = 0.0;
    int sdp_iterations = 0;
    bool sdp_converged = true;
};

/// Ab-initio restoration: full-basis covariance with the zero-frequency block
/// replaced by its refined version, then either contrast-normalized CWF or
/// the 2-stage filter with the contrast absorbed into the operator.
inline Algorithm2Result run_algorithm2(const std::vector<BlockStack>& ys,
                                       const std::vector<BlockOperator>& ops,
                                       const std::vector<int>& assignments,
                                       double sigma2, const FBBasis& basis,
                                       RestoreOption option, RefineMethod method,
                                       const CovarianceOptions& opts = {},
                                       int threads = 0) {
    const OnesVector ones = ones_vector(basis);

    Algorithm2Result out;
    out.mean = estimate_mean(ys, ops, assignments);
    CovarianceEstimate cov = estimate_covariance(ys, ops, assignments, out.mean,
                                                 sigma2, opts);
    out.cov_raw = cov.cov;
    out.cg = cov.cg;
    const Eigen::VectorXd mu0 = out.mean.block0();
    out.var_c = estimate_var_c(out.cov_raw.blocks[0], mu0, ones.block0);

    const detail::RefinedBlock0 ref = detail::refine_block0(
        out.cov_raw.blocks[0], out.var_c.var_c, mu0, ones.block0, method);
    out.gs_warned = ref.gs_warned;
    out.gs_dropped = ref.gs_dropped;
    out.sdp_iterations = ref.sdp_iterations;
    out.sdp_converged = ref.sdp_converged;

    BlockCovariance cx0_rf;
    cx0_rf.blocks = {ref.sigma_cx0};
    out.contrasts = estimate_contrasts(
        detail::slice_block0(ys), detail::slice_block0(ops), cx0_rf, out.mean.mu,
        sigma2, ones, assignments, method == RefineMethod::gs ? "cwf-gs" : "cwf-sdp");

    const std::string suffix = method == RefineMethod::gs ? "gs" : "sdp";
    const int nb = static_cast<int>(out.cov_raw.blocks.size());
    if (option == RestoreOption::normalization) {
        // Filter prior: refined block 0 of Sigma_cx, higher blocks clipped PSD.
        out.cov_filter.blocks.resize(nb);
        out.cov_filter.blocks[0] = ref.sigma_cx0;
        for (int b = 1; b < nb; ++b)
            out.cov_filter.blocks[b] = psd_clip(out.cov_raw.blocks[b]);
        const CwfFilter filt(ops, out.cov_filter, out.mean.mu, sigma2, threads);
        const std::vector<BlockStack> xs = filt.apply(ys, assignments, threads);
        out.restored = restore_normalize(block_stacks_to_coeffs(xs, basis),
                                         out.contrasts.c_hat, suffix + "-norm");
    } else {
        // Contrast-free prior: refined Sigma_x block 0, higher blocks clipped
        // and divided by (var_c + 1).
        out.cov_filter.blocks.resize(nb);
        out.cov_filter.blocks[0] = ref.sigma_x0;
        for (int b = 1; b < nb; ++b)
            out.cov_filter.blocks[b] =
                psd_clip(out.cov_raw.blocks[b]) / (out.var_c.var_c + 1.0);
        out.restored = restore_2stage_batch(ys, ops, assignments, out.contrasts.c_hat,
                                            out.cov_filter, out.mean.mu, sigma2, basis,
                                            suffix + "-2stage", threads);
    }
    return out;
}

/// The plain-CWF baseline: everything runs on the unrefined covariance, both
/// the contrast estimates and the restoration, with the same normalization
/// conventions as the refined paths.
struct PlainCwfResult {
    RestoredImages restored;             // "cwf": filtered, not normalized
    RestoredImages restored_normalized;  // "cwf-norm"
    ContrastEstimates contrasts;         // "cwf"
    MeanEstimate mean;
    BlockCovariance cov_raw;
    std::vector<CgDiagnostics> cg;
};

inline PlainCwfResult run_plain_cwf(const std::vector<BlockStack>& ys,
                                    const std::vector<BlockOperator>& ops,
                                    const std::vector<int>& assignments,
                                    double sigma2, const FBBasis& basis,
                                    const CovarianceOptions& opts = {},
                                    int threads = 0) {
    const OnesVector ones = ones_vector(basis);
    PlainCwfResult out;
    out.mean = estimate_mean(ys, ops, assignments);
    CovarianceEstimate cov = estimate_covariance(ys, ops, assignments, out.mean,
                                                 sigma2, opts);
    out.cov_raw = cov.cov;
    out.cg = cov.cg;

    BlockCovariance cx0;
    cx0.blocks = {out.cov_raw.blocks[0]};
    out.contrasts = estimate_contrasts(detail::slice_block0(ys),
                                       detail::slice_block0(ops), cx0, out.mean.mu,
                                       sigma2, ones, assignments, "cwf");

    const CwfFilter filt(ops, out.cov_raw, out.mean.mu, sigma2, threads);
    const std::vector<BlockStack> xs = filt.apply(ys, assignments, threads);
    out.restored.coeffs = block_stacks_to_coeffs(xs, basis);
    out.restored.method = "cwf";
    out.restored.excluded.assign(std::size_t(out.restored.coeffs.rows()), 0);
    out.restored_normalized =
        restore_normalize(out.restored.coeffs, out.contrasts.c_hat, "cwf-norm");
    return out;
}

}  // namespace cryocontrast
