#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "basis.hpp"
#include "ctf.hpp"
#include "dft.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "rng.hpp"

namespace cryocontrast {

// Substream layout of the dataset generator.  Every per-image draw gets its
// own counter-based stream so generation is order-independent and therefore
// safe to parallelize: stream 0 is the contrast vector, then one stream per
// image and purpose.
inline constexpr std::uint64_t kStreamContrasts = 0;
inline constexpr std::uint64_t kStreamRotationBase = std::uint64_t(1) << 32;
inline constexpr std::uint64_t kStreamNoiseBase = std::uint64_t(2) << 32;

struct NoiseModel {
    enum class Kind { white, colored };

    Kind kind = Kind::white;
    double sigma2 = 0.0;  // per-pixel noise variance (white) or field variance (colored)
    // Radial PSD as a function of frequency k in units of 1/(128 pixels);
    // the grid maps pixel radius rho to k = 128*rho/L.
    std::function<double(double)> psd;

    static NoiseModel white(double sigma2) {
        NoiseModel m;
        m.kind = Kind::white;
        m.sigma2 = sigma2;
        m.psd = [sigma2](double) { return sigma2; };
        return m;
    }

    // The benchmark noise spectrum 1/sqrt(k^2+1): strongly peaked at zero
    // frequency, which is exactly where it collides with the contrast signal.
    static NoiseModel colored(double sigma2) {
        NoiseModel m;
        m.kind = Kind::colored;
        m.sigma2 = sigma2;
        m.psd = [](double k) { return 1.0 / std::sqrt(k * k + 1.0); };
        return m;
    }

    void validate() const {
        if (sigma2 < 0.0) throw std::invalid_argument("NoiseModel: sigma2 must be >= 0");
        if (kind == Kind::colored) {
            if (!psd) throw std::invalid_argument("NoiseModel: colored model needs a psd");
            for (double k : {0.0, 1.0, 16.0, 64.0})
                if (!(psd(k) > 0.0))
                    throw std::invalid_argument("NoiseModel: psd must be positive in band");
        }
    }
};

namespace detail {

// PSD sampled on the centered frequency grid, zeroed outside the Nyquist disk
// (the field has no content beyond rho = L/2).
inline Image psd_grid(const std::function<double(double)>& psd, int L) {
    Image p(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double rho = std::hypot(double(i - L / 2), double(j - L / 2));
            p(i, j) = rho > L / 2.0 ? 0.0 : psd(128.0 * rho / L);
        }
    return p;
}

inline Image white_field(int L, Philox& rng) {
    Image g(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) g(i, j) = rng.normal();
    return g;
}

// Stationary Gaussian field with the given PSD: filter white noise in Fourier
// space by sqrt(psd).  Mean per-pixel variance is sum(psd)/L^2.
inline Image colored_field(const Image& sqrt_psd, const CenteredDft& dft, Philox& rng) {
    const int L = int(sqrt_psd.rows());
    ImageC spec = dft.forward(white_field(L, rng));
    spec.array() *= sqrt_psd.array();
    return dft.inverse_real(spec);
}

}  // namespace detail

// SNR convention: mean over images of per-pixel signal power on the full
// frame, divided by per-pixel noise power.  Returns the noise variance that
// realizes target_snr for the given clean stack (rows are flattened images).
inline double snr_to_sigma(const Eigen::MatrixXd& clean_images, double target_snr) {
    if (clean_images.rows() == 0 || clean_images.cols() == 0)
        throw std::invalid_argument("snr_to_sigma: empty clean set");
    if (!(target_snr > 0.0))
        throw std::invalid_argument("snr_to_sigma: target SNR must be positive");
    const double power =
        clean_images.rowwise().squaredNorm().mean() / double(clean_images.cols());
    if (!(power > 0.0)) throw std::invalid_argument("snr_to_sigma: all-zero clean set");
    return power / target_snr;
}

// Add seeded Gaussian noise to one image.  White noise is i.i.d. per pixel;
// colored noise is a stationary field with the model PSD, scaled so its mean
// per-pixel variance equals model.sigma2.
inline Image add_noise(const Image& image, const NoiseModel& model, std::uint64_t seed,
                       std::uint64_t stream = kStreamNoiseBase) {
    model.validate();
    const int L = int(image.rows());
    if (image.cols() != L) throw std::invalid_argument("add_noise: image must be square");
    if (model.sigma2 == 0.0) return image;
    Philox rng(seed, stream);
    if (model.kind == NoiseModel::Kind::white) {
        const double sigma = std::sqrt(model.sigma2);
        Image out = image;
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j) out(i, j) += sigma * rng.normal();
        return out;
    }
    const Image pg = detail::psd_grid(model.psd, L);
    const double var_field = pg.sum() / double(L * L);
    const double scale = model.sigma2 / var_field;
    const CenteredDft dft(L);
    return image + std::sqrt(scale) * detail::colored_field(pg.cwiseSqrt(), dft, rng);
}

// Everything the estimation pipeline consumes, plus the ground truth needed
// to score it.  For colored runs `images` is already whitened by the known
// PSD, sigma2 is the post-whitening (unit) noise variance, and whitening_fn
// is the radial multiplier that the whitening applied to the signal -- the
// per-group forward operator is then ctf(xi) * whitening_fn(xi).
struct SyntheticDataset {
    int L = 0;
    Eigen::VectorXd defoci;
    std::vector<int> ctf_assignments;
    Eigen::VectorXd true_contrasts;
    std::vector<Rotation> rotations;
    Eigen::MatrixXd clean_images;   // n x L^2, pre-CTF pre-contrast (optional)
    Eigen::MatrixXd true_clean_fb;  // n x basis.real_dim()
    Eigen::MatrixXd images;         // n x L^2, the measured stack
    double sigma2 = 0.0;            // noise variance of `images` under the model
    double noise_sigma2_raw = 0.0;  // pre-whitening variance, P/snr
    std::function<double(double)> whitening_fn;  // empty for white noise
};

inline SyntheticDataset make_dataset(const FBBasis& basis, const PhantomVolume& vol, int n,
                                     int num_groups, double snr,
                                     NoiseModel::Kind noise_kind, std::uint64_t seed,
                                     CTFParams ctf_base = CTFParams{1.0},
                                     bool store_clean = true, int threads = 0) {
    if (n <= 0) throw std::invalid_argument("make_dataset: n must be positive");
    if (num_groups <= 0 || num_groups > n)
        throw std::invalid_argument("make_dataset: need 1 <= num_groups <= n");
    vol.validate();

    const int L = basis.size();
    const int npix = L * L;
    SyntheticDataset ds;
    ds.L = L;
    const std::vector<double> ladder = defocus_ladder(num_groups);
    ds.defoci = Eigen::Map<const Eigen::VectorXd>(ladder.data(), num_groups);
    ds.ctf_assignments.resize(n);
    for (int i = 0; i < n; ++i) ds.ctf_assignments[i] = i % num_groups;
    ds.true_contrasts = sample_contrasts(n, 0.5, 1.5, seed);

    ds.rotations.resize(n);
    Eigen::MatrixXd clean(n, npix);
    parallel_for(
        std::size_t(n),
        [&](std::size_t i) {
            Philox rng(seed, kStreamRotationBase + i);
            ds.rotations[i] = rand_rot(rng);
            clean.row(i) =
                flatten(project_phantom(vol, ds.rotations[i], L, ctf_base.pixel_size));
        },
        threads);
    ds.true_clean_fb = basis.expand_stack(clean, threads);

    // Per-group CTF transfer sampled on the centered frequency grid.
    const CenteredDft dft(L);
    std::vector<Image> ctf_grid(num_groups);
    for (int g = 0; g < num_groups; ++g) {
        CTFParams p = ctf_base;
        p.defocus_um = ds.defoci[g];
        Image grid(L, L);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j)
                grid(i, j) = ctf_value_cpp(
                    p, std::hypot(double(i - L / 2), double(j - L / 2)) / L);
        ctf_grid[g] = grid;
    }

    Eigen::MatrixXd measured(n, npix);
    parallel_for(
        std::size_t(n),
        [&](std::size_t i) {
            ImageC spec = dft.forward(unflatten(clean.row(i), L));
            spec.array() *= ctf_grid[ds.ctf_assignments[i]].array();
            measured.row(i) = ds.true_contrasts[i] * flatten(dft.inverse_real(spec));
        },
        threads);

    const double sig2 = snr_to_sigma(measured, snr);
    ds.noise_sigma2_raw = sig2;

    if (noise_kind == NoiseModel::Kind::white) {
        const NoiseModel model = NoiseModel::white(sig2);
        parallel_for(
            std::size_t(n),
            [&](std::size_t i) {
                measured.row(i) = flatten(
                    add_noise(unflatten(measured.row(i), L), model, seed,
                              kStreamNoiseBase + i));
            },
            threads);
        ds.sigma2 = sig2;
    } else {
        const NoiseModel model = NoiseModel::colored(sig2);
        const Image pg = detail::psd_grid(model.psd, L);
        const Image sqrt_pg = pg.cwiseSqrt();
        const double var_field = pg.sum() / double(npix);
        const double scale = sig2 / var_field;

        // Whitening by the known noise spectrum: after it the noise is exactly
        // the original unit white field restricted to the Nyquist disk, so the
        // model variance is 1 and the signal carries the extra radial factor.
        Image inv = Image::Zero(L, L);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j)
                if (pg(i, j) > 0.0) inv(i, j) = 1.0 / std::sqrt(scale * pg(i, j));

        parallel_for(
            std::size_t(n),
            [&](std::size_t i) {
                Philox rng(seed, kStreamNoiseBase + i);
                Image noisy = unflatten(measured.row(i), L) +
                              std::sqrt(scale) * detail::colored_field(sqrt_pg, dft, rng);
                ImageC spec = dft.forward(noisy);
                spec.array() *= inv.array();
                measured.row(i) = flatten(dft.inverse_real(spec));
            },
            threads);
        ds.sigma2 = 1.0;
        ds.whitening_fn = [scale](double xi) {
            return std::sqrt(std::sqrt((128.0 * xi) * (128.0 * xi) + 1.0) / scale);
        };
    }

    ds.images = std::move(measured);
    if (store_clean) ds.clean_images = std::move(clean);
    return ds;
}

}  // namespace cryocontrast
