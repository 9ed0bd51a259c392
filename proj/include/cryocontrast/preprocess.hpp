#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include <cryocontrast/basis.hpp>
#include <cryocontrast/ctf.hpp>
#include <cryocontrast/dft.hpp>
#include <cryocontrast/parallel.hpp>

namespace cryocontrast {

/// The pixels outside the centered circle of radius 0.45 L: the region that
/// carries no particle signal and is therefore usable for noise statistics.
struct CornerMask {
    int L = 0;
    double radius = 0.0;
    std::vector<char> outside;  // row-major i * L + j
    Eigen::Index count = 0;

    bool at(int i, int j) const { return outside[std::size_t(i) * L + j] != 0; }
};

inline CornerMask corner_mask(int L, double radius_factor = 0.45) {
    if (L < 8) throw std::invalid_argument("corner_mask: image too small");
    if (!(radius_factor > 0.0))
        throw std::invalid_argument("corner_mask: radius factor must be positive");
    CornerMask m;
    m.L = L;
    m.radius = radius_factor * L;
    m.outside.assign(std::size_t(L) * L, 0);
    const int h = L / 2;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double r2 = double(i - h) * (i - h) + double(j - h) * (j - h);
            if (r2 >= m.radius * m.radius) {
                m.outside[std::size_t(i) * L + j] = 1;
                ++m.count;
            }
        }
    if (m.count == 0) throw std::invalid_argument("corner_mask: empty mask");
    return m;
}

namespace detail {

inline void check_mask(const Image& img, const CornerMask& mask) {
    if (img.rows() != mask.L || img.cols() != mask.L)
        throw std::invalid_argument("preprocess: image does not match mask size");
}

}  // namespace detail

inline double corner_mean(const Image& img, const CornerMask& mask) {
    detail::check_mask(img, mask);
    double s = 0.0;
    for (int i = 0; i < mask.L; ++i)
        for (int j = 0; j < mask.L; ++j)
            if (mask.at(i, j)) s += img(i, j);
    return s / double(mask.count);
}

inline double corner_std(const Image& img, const CornerMask& mask) {
    detail::check_mask(img, mask);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < mask.L; ++i)
        for (int j = 0; j < mask.L; ++j)
            if (mask.at(i, j)) {
                s += img(i, j);
                s2 += img(i, j) * img(i, j);
            }
    const double mean = s / double(mask.count);
    return std::sqrt(std::max(0.0, s2 / double(mask.count) - mean * mean));
}

/// Scale the image so its corner pixels have unit standard deviation.
inline Image corner_normalize(const Image& img, const CornerMask& mask) {
    if (mask.count < 100)
        throw std::invalid_argument("corner_normalize: mask has fewer than 100 pixels");
    const double sd = corner_std(img, mask);
    if (!(sd > 0.0))
        throw std::runtime_error("corner_normalize: zero corner variance (junk image)");
    return img / sd;
}

/// Subtract the scalar corner mean.  Applying it twice changes nothing.
inline Image background_subtract(const Image& img, const CornerMask& mask) {
    return (img.array() - corner_mean(img, mask)).matrix();
}

/// Radially averaged noise power spectrum of one defocus group, estimated
/// from the corner pixels and floored away from zero.
struct NoisePSD {
    Eigen::VectorXd psd;  // unit-width bins of integer Fourier-pixel radius
    int group = -1;
    Eigen::Index floored_bins = 0;
    double floor_value = 0.0;
};

/// Mask-corrected periodogram: images are zeroed inside the disk, the power
/// |F|^2 / L^2 is divided by the masked-area fraction, radially averaged, and
/// averaged over the group.
inline NoisePSD estimate_corner_psd(const std::vector<Image>& images,
                                    const CornerMask& mask, int group = -1) {
    if (images.empty()) throw std::invalid_argument("estimate_corner_psd: empty group");
    for (const Image& img : images) detail::check_mask(img, mask);

    const int L = mask.L, h = L / 2;
    const CenteredDft dft(L);
    const double frac = double(mask.count) / (double(L) * L);

    Image masked(L, L);
    Eigen::MatrixXd power = Eigen::MatrixXd::Zero(L, L);
    for (const Image& img : images) {
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j) masked(i, j) = mask.at(i, j) ? img(i, j) : 0.0;
        const ImageC spec = dft.forward(masked);
        power += spec.cwiseAbs2() / (double(L) * L * frac);
    }
    power /= double(images.size());

    const int nbins = static_cast<int>(std::floor(std::hypot(double(h), double(h)))) + 2;
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(nbins);
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(nbins);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const int bin =
                static_cast<int>(std::hypot(double(i - h), double(j - h)) + 0.5);
            sums[bin] += power(i, j);
            ++counts[bin];
        }

    NoisePSD out;
    out.group = group;
    out.psd.resize(nbins);
    for (int r = 0; r < nbins; ++r)
        out.psd[r] = counts[r] > 0 ? sums[r] / counts[r] : 0.0;

    // Floor at 1e-6 of the median so later division can never blow up.
    std::vector<double> sorted(out.psd.data(), out.psd.data() + out.psd.size());
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    out.floor_value = 1e-6 * sorted[sorted.size() / 2];
    for (int r = 0; r < nbins; ++r)
        if (out.psd[r] < out.floor_value) {
            out.psd[r] = out.floor_value;
            ++out.floored_bins;
        }
    return out;
}

/// Linear interpolation of radial bin samples, clamped at both ends.
inline double interp_radial(const Eigen::VectorXd& samples, double r) {
    if (samples.size() == 0) throw std::invalid_argument("interp_radial: empty samples");
    if (r <= 0.0) return samples[0];
    if (r >= double(samples.size() - 1)) return samples[samples.size() - 1];
    const int lo = static_cast<int>(r);
    const double t = r - lo;
    return (1.0 - t) * samples[lo] + t * samples[lo + 1];
}

/// A whitened defocus group: coefficients of the whitened images plus the
/// whitened CTF operator W A built from the product of the radial functions
/// (not a product of block operators, which would truncate out-of-band terms).
struct WhitenedGroup {
    Eigen::MatrixXd coeffs;      // n x real_dim
    BlockOperator whitened_ctf;  // W A
    BlockOperator whitening;     // W alone
    bool unreliable = false;     // PSD floor was hit on more than 10% of bins
};

inline WhitenedGroup whiten_group(const std::vector<Image>& images, const NoisePSD& psd,
                                  const FBBasis& basis, const CTFParams& ctf,
                                  int threads = 0) {
    if (images.empty()) throw std::invalid_argument("whiten_group: empty group");
    if (psd.psd.size() == 0 || !(psd.psd.minCoeff() > 0.0))
        throw std::invalid_argument("whiten_group: PSD must be positive");
    const int L = basis.size(), h = L / 2;
    for (const Image& img : images)
        if (img.rows() != L || img.cols() != L)
            throw std::invalid_argument("whiten_group: image size mismatch");

    const CenteredDft dft(L);
    Eigen::MatrixXd gain(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double rho = std::hypot(double(i - h), double(j - h));
            gain(i, j) = 1.0 / std::sqrt(interp_radial(psd.psd, rho));
        }

    Eigen::MatrixXd rows(static_cast<Eigen::Index>(images.size()),
                         Eigen::Index(L) * L);
    parallel_for(
        images.size(),
        [&](std::size_t i) {
            ImageC spec = dft.forward(images[i]);
            spec.array() *= gain.array();
            rows.row(Eigen::Index(i)) = flatten(dft.inverse_real(spec)).transpose();
        },
        threads);

    WhitenedGroup out;
    out.coeffs = basis.expand_stack(rows, threads);
    const auto w = [&psd, L](double xi_cpp) {
        return 1.0 / std::sqrt(interp_radial(psd.psd, xi_cpp * L));
    };
    out.whitening = radial_block_operator(w, basis);
    out.whitened_ctf = radial_block_operator(
        [&w, &ctf](double xi_cpp) { return w(xi_cpp) * ctf_value_cpp(ctf, xi_cpp); },
        basis);
    out.unreliable = double(psd.floored_bins) > 0.1 * double(psd.psd.size());
    return out;
}

/// The full per-group experimental recipe, in the order the model requires:
/// corner normalization, then PSD estimation (before any subtraction, which
/// would null the zero-frequency bin), then background subtraction, then
/// whitening.
struct PreprocessedGroup {
    std::vector<Image> images;  // normalized and background-subtracted
    NoisePSD psd;
    WhitenedGroup whitened;
};

inline PreprocessedGroup preprocess_group(const std::vector<Image>& raw,
                                          const FBBasis& basis, const CTFParams& ctf,
                                          int group = -1, int threads = 0) {
    const CornerMask mask = corner_mask(basis.size());
    PreprocessedGroup out;
    out.images.reserve(raw.size());
    for (const Image& img : raw) out.images.push_back(corner_normalize(img, mask));
    out.psd = estimate_corner_psd(out.images, mask, group);
    for (Image& img : out.images) img = background_subtract(img, mask);
    out.whitened = whiten_group(out.images, out.psd, basis, ctf, threads);
    return out;
}

}  // namespace cryocontrast
