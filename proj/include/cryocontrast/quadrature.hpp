#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace cryocontrast {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Gauss-Legendre rule on [-1,1], exact for polynomials of degree 2n-1.
/// Newton iteration on P_n from the three-term recurrence; the Chebyshev-like
/// initial guess converges in a handful of steps for every root.
inline QuadratureRule gauss_legendre(std::size_t n) {
    QuadratureRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    const double pi = 3.14159265358979323846;
    for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
        double x = std::cos(pi * (static_cast<double>(i) + 0.75) /
                            (static_cast<double>(n) + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (std::size_t k = 2; k <= n; ++k) {
                const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = pk;
            }
            // P_n'(x) from P_n and P_{n-1}
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        rule.nodes[i] = -x;
        rule.nodes[n - 1 - i] = x;
        const double w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    if (n % 2 == 1) rule.nodes[n / 2] = 0.0;        // exact midpoint, kill -0.0
    return rule;
}

/// Rule mapped to [0, r] for radial integrals.
inline QuadratureRule gauss_legendre_radial(std::size_t n, double r) {
    QuadratureRule rule = gauss_legendre(n);
    for (std::size_t i = 0; i < n; ++i) {
        rule.nodes[i] = 0.5 * r * (rule.nodes[i] + 1.0);
        rule.weights[i] *= 0.5 * r;
    }
    return rule;
}

}  // namespace cryocontrast
