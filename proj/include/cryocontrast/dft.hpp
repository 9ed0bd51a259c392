#pragma once

#include <complex>

#include <Eigen/Dense>

namespace cryocontrast {

using Image = Eigen::MatrixXd;
using ImageC = Eigen::MatrixXcd;

/// Centered 2-D DFT computed as two dense matrix products.
///
/// Both the spatial index m and the frequency index p are measured from the
/// image center, m~ = m - L/2, so for even L the transform is its own
/// frequency-centered variant: no fftshift bookkeeping anywhere downstream.
/// At the L <= 256 sizes used here the GEMM form is fast enough and keeps the
/// project dependency-free; it is also exactly linear in the matrix F, which
/// the basis and covariance tests exploit.
class CenteredDft {
public:
    explicit CenteredDft(int L) : L_(L), F_(L, L) {
        const double two_pi = 6.283185307179586476925286766559;
        const int h = L / 2;
        for (int m = 0; m < L; ++m)
            for (int p = 0; p < L; ++p) {
                const double phase = -two_pi * double(m - h) * double(p - h) / L;
                F_(m, p) = std::complex<double>(std::cos(phase), std::sin(phase));
            }
    }

    int size() const { return L_; }

    ImageC forward(const Image& img) const {
        return F_ * img * F_.transpose();
    }

    ImageC forward(const ImageC& img) const {
        return F_ * img * F_.transpose();
    }

    ImageC inverse(const ImageC& spec) const {
        const double s = 1.0 / (double(L_) * double(L_));
        return s * (F_.conjugate() * spec * F_.adjoint());
    }

    Image inverse_real(const ImageC& spec) const {
        return inverse(spec).real();
    }

    const ImageC& matrix() const { return F_; }

private:
    int L_;
    ImageC F_;
};

}  // namespace cryocontrast
