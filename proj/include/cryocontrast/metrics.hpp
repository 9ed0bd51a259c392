#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include <cryocontrast/basis.hpp>
#include <cryocontrast/covariance.hpp>
#include <cryocontrast/dft.hpp>

namespace cryocontrast {

/// Mean relative contrast error (1/n) sum |c_hat - c| / c.
inline double contrast_error(const Eigen::VectorXd& c_hat,
                             const Eigen::VectorXd& c_true) {
    if (c_hat.size() != c_true.size() || c_hat.size() == 0)
        throw std::invalid_argument("contrast_error: length mismatch");
    if (!(c_true.minCoeff() > 0.0))
        throw std::invalid_argument("contrast_error: nonpositive true contrast");
    return ((c_hat - c_true).cwiseAbs().cwiseQuotient(c_true)).mean();
}

/// Normalized covariance estimation error over blocks.  Blocks for k > 0
/// stand for a conjugate pair in the full matrix, so they enter both sums
/// with weight 2.
inline double covariance_error(const BlockCovariance& est, const BlockCovariance& truth,
                               const std::vector<double>& weights) {
    if (est.blocks.size() != truth.blocks.size() ||
        est.blocks.size() != weights.size() || est.blocks.empty())
        throw std::invalid_argument("covariance_error: block structure mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t b = 0; b < est.blocks.size(); ++b) {
        if (est.blocks[b].rows() != truth.blocks[b].rows() ||
            est.blocks[b].cols() != truth.blocks[b].cols())
            throw std::invalid_argument("covariance_error: block dimension mismatch");
        num += weights[b] * (est.blocks[b] - truth.blocks[b]).squaredNorm();
        den += weights[b] * truth.blocks[b].squaredNorm();
    }
    if (!(den > 0.0))
        throw std::invalid_argument("covariance_error: zero true covariance");
    return num / den;
}

inline std::vector<double> conjugate_weights(const FBBasis& basis) {
    std::vector<double> w(std::size_t(basis.num_blocks()));
    for (int b = 0; b < basis.num_blocks(); ++b)
        w[std::size_t(b)] = basis.k_of(b) == 0 ? 1.0 : 2.0;
    return w;
}

inline double covariance_error(const BlockCovariance& est, const BlockCovariance& truth,
                               const FBBasis& basis) {
    return covariance_error(est, truth, conjugate_weights(basis));
}

/// Root-mean-square error of restored vs clean over the centered disk of the
/// given radius (default half the image size), normalized by the clean RMS.
inline double nrmse(const Image& restored, const Image& clean,
                    double mask_radius = -1.0) {
    const int L = static_cast<int>(clean.rows());
    if (restored.rows() != L || restored.cols() != clean.cols() ||
        clean.cols() != L)
        throw std::invalid_argument("nrmse: image dimension mismatch");
    const double R = mask_radius > 0.0 ? mask_radius : 0.5 * L;
    const int h = L / 2;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double r2 = double(i - h) * (i - h) + double(j - h) * (j - h);
            if (r2 >= R * R) continue;
            const double d = restored(i, j) - clean(i, j);
            num += d * d;
            den += clean(i, j) * clean(i, j);
        }
    if (!(den > 0.0)) throw std::invalid_argument("nrmse: clean image is zero in mask");
    return std::sqrt(num / den);
}

/// Mean NRMSE over a stack of flattened images (rows), skipping excluded ones.
inline double nrmse_stack(const Eigen::MatrixXd& restored, const Eigen::MatrixXd& clean,
                          int L, const std::vector<char>& excluded = {}) {
    if (restored.rows() != clean.rows() || restored.cols() != clean.cols() ||
        restored.cols() != Eigen::Index(L) * L)
        throw std::invalid_argument("nrmse_stack: stack shape mismatch");
    if (!excluded.empty() &&
        static_cast<Eigen::Index>(excluded.size()) != restored.rows())
        throw std::invalid_argument("nrmse_stack: exclusion mask length mismatch");
    double sum = 0.0;
    Eigen::Index used = 0;
    for (Eigen::Index i = 0; i < restored.rows(); ++i) {
        if (!excluded.empty() && excluded[std::size_t(i)]) continue;
        sum += nrmse(unflatten(restored.row(i), L), unflatten(clean.row(i), L));
        ++used;
    }
    if (used == 0) throw std::invalid_argument("nrmse_stack: every image excluded");
    return sum / double(used);
}

/// Fourier ring correlation per unit-width annulus of integer Fourier-pixel
/// radius.  Bins with no lattice points (or with one of the rings identically
/// zero) carry count 0 / NaN and are skipped by consumers.
struct FrcCurve {
    Eigen::VectorXd value;  // per radial bin; NaN where undefined
    Eigen::VectorXi count;  // lattice points per bin
};

inline FrcCurve frc(const Image& a, const Image& b) {
    const int L = static_cast<int>(a.rows());
    if (b.rows() != L || a.cols() != L || b.cols() != L)
        throw std::invalid_argument("frc: image dimension mismatch");
    const CenteredDft dft(L);
    const ImageC fa = dft.forward(a), fb = dft.forward(b);

    const int h = L / 2;
    const int nbins = static_cast<int>(std::floor(std::hypot(double(h), double(h)))) + 2;
    Eigen::VectorXd num = Eigen::VectorXd::Zero(nbins);
    Eigen::VectorXd pa = Eigen::VectorXd::Zero(nbins), pb = Eigen::VectorXd::Zero(nbins);
    Eigen::VectorXi count = Eigen::VectorXi::Zero(nbins);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double rho = std::hypot(double(i - h), double(j - h));
            const int bin = static_cast<int>(rho + 0.5);
            num[bin] += (std::conj(fa(i, j)) * fb(i, j)).real();
            pa[bin] += std::norm(fa(i, j));
            pb[bin] += std::norm(fb(i, j));
            ++count[bin];
        }

    FrcCurve out;
    out.count = count;
    out.value.setConstant(nbins, std::numeric_limits<double>::quiet_NaN());
    for (int r = 0; r < nbins; ++r) {
        if (count[r] == 0) continue;
        const double den = std::sqrt(pa[r] * pb[r]);
        if (den > 0.0) out.value[r] = num[r] / den;
    }
    return out;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const Eigen::Index n = a.size();
    if (b.size() != n || n < 2)
        throw std::invalid_argument("spearman: need two equal-length series");
    const auto ranks = [](const Eigen::VectorXd& v) {
        const Eigen::Index m = v.size();
        std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
        for (Eigen::Index i = 0; i < m; ++i) order[std::size_t(i)] = i;
        std::sort(order.begin(), order.end(),
                  [&](Eigen::Index x, Eigen::Index y) { return v[x] < v[y]; });
        Eigen::VectorXd r(m);
        Eigen::Index i = 0;
        while (i < m) {
            Eigen::Index j = i;
            while (j + 1 < m && v[order[std::size_t(j + 1)]] == v[order[std::size_t(i)]])
                ++j;
            const double avg = 0.5 * double(i + j) + 1.0;
            for (Eigen::Index t = i; t <= j; ++t) r[order[std::size_t(t)]] = avg;
            i = j + 1;
        }
        return r;
    };
    const Eigen::VectorXd ra = ranks(a), rb = ranks(b);
    const Eigen::VectorXd ca = ra.array() - ra.mean();
    const Eigen::VectorXd cb = rb.array() - rb.mean();
    const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
    if (!(den > 0.0)) throw std::invalid_argument("spearman: constant series");
    return ca.dot(cb) / den;
}

/// Per-group means of a per-image metric, groups ordered by ascending key.
/// Empty groups are reported in omitted_keys and produce no row.
struct GroupBreakdown {
    std::vector<double> keys;
    std::vector<double> means;
    std::vector<Eigen::Index> counts;
    std::vector<double> omitted_keys;
    double global_mean = 0.0;
};

inline GroupBreakdown group_breakdown(const Eigen::VectorXd& values,
                                      const std::vector<int>& labels,
                                      const std::vector<double>& group_keys) {
    if (static_cast<Eigen::Index>(labels.size()) != values.size() || values.size() == 0)
        throw std::invalid_argument("group_breakdown: label count mismatch");
    const int ngroups = static_cast<int>(group_keys.size());
    std::vector<double> sums(std::size_t(ngroups), 0.0);
    std::vector<Eigen::Index> counts(std::size_t(ngroups), 0);
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const int g = labels[std::size_t(i)];
        if (g < 0 || g >= ngroups)
            throw std::invalid_argument("group_breakdown: label out of range");
        sums[std::size_t(g)] += values[i];
        ++counts[std::size_t(g)];
    }

    std::vector<int> order(static_cast<std::size_t>(ngroups));
    for (int g = 0; g < ngroups; ++g) order[std::size_t(g)] = g;
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        return group_keys[std::size_t(x)] < group_keys[std::size_t(y)];
    });

    GroupBreakdown out;
    out.global_mean = values.mean();
    for (int g : order) {
        if (counts[std::size_t(g)] == 0) {
            out.omitted_keys.push_back(group_keys[std::size_t(g)]);
            continue;
        }
        out.keys.push_back(group_keys[std::size_t(g)]);
        out.means.push_back(sums[std::size_t(g)] / double(counts[std::size_t(g)]));
        out.counts.push_back(counts[std::size_t(g)]);
    }
    return out;
}

/// Breakdown over true-contrast deciles with bin edges 0.5, 0.6, ..., 1.5.
inline GroupBreakdown contrast_decile_breakdown(const Eigen::VectorXd& values,
                                                const Eigen::VectorXd& c_true) {
    if (c_true.size() != values.size())
        throw std::invalid_argument("contrast_decile_breakdown: length mismatch");
    std::vector<int> labels(std::size_t(values.size()));
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const int bin = static_cast<int>(std::floor((c_true[i] - 0.5) / 0.1));
        labels[std::size_t(i)] = std::min(9, std::max(0, bin));
    }
    std::vector<double> keys(10);
    for (int g = 0; g < 10; ++g) keys[std::size_t(g)] = 0.5 + 0.1 * g;
    return group_breakdown(values, labels, keys);
}

/// One metric value with the experiment coordinates it belongs to.
struct MetricRow {
    std::string method;
    double snr = 0.0;
    Eigen::Index n = 0;
    std::string noise;
    std::string group;  // "all", a defocus value, or a contrast-bin edge
    std::string metric;
    double value = 0.0;
};

struct MetricTable {
    std::vector<MetricRow> rows;

    void add(MetricRow row) { rows.push_back(std::move(row)); }

    bool all_finite() const {
        for (const MetricRow& r : rows)
            if (!std::isfinite(r.value)) return false;
        return true;
    }

    /// CSV with a fixed 17-significant-digit float format so equal tables are
    /// byte-identical.
    void write_csv(std::ostream& os) const {
        os << "method,snr,n,noise,group,metric,value\n";
        char buf[64];
        for (const MetricRow& r : rows) {
            std::snprintf(buf, sizeof buf, "%.17g", r.snr);
            os << r.method << ',' << buf << ',' << r.n << ',' << r.noise << ','
               << r.group << ',' << r.metric << ',';
            std::snprintf(buf, sizeof buf, "%.17g", r.value);
            os << buf << '\n';
        }
    }
};

}  // namespace cryocontrast
