#pragma once

#include <cstdint>
#include <cmath>

namespace cryocontrast {

/// Counter-based Philox4x32-10 generator.
///
/// Chosen over <random> engines because every sampled quantity must be
/// reproducible bit-for-bit from (seed, stream) alone: each image in a
/// dataset gets its own stream, so regenerating image i never depends on
/// how many variates earlier images consumed.  std::normal_distribution
/// is implementation-defined; the Box-Muller transform below is not.
class Philox {
public:
    explicit Philox(std::uint64_t seed, std::uint64_t stream = 0)
        : key0_(static_cast<std::uint32_t>(seed)),
          key1_(static_cast<std::uint32_t>(seed >> 32)) {
        ctr_[0] = 0;
        ctr_[1] = 0;
        ctr_[2] = static_cast<std::uint32_t>(stream);
        ctr_[3] = static_cast<std::uint32_t>(stream >> 32);
    }

    std::uint32_t next_u32() {
        if (have_ == 0) refill();
        return out_[4 - have_--];
    }

    /// Uniform in [0,1) with the full 53-bit double mantissa.
    double uniform() {
        const std::uint32_t a = next_u32() >> 5;   // 27 bits
        const std::uint32_t b = next_u32() >> 6;   // 26 bits
        return (a * 67108864.0 + b) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - uniform();          // (0,1], keeps log() finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(t);
        has_cached_ = true;
        return r * std::cos(t);
    }

    /// Raw one-block evaluation, exposed for known-answer tests.
    static void block(const std::uint32_t ctr_in[4], const std::uint32_t key_in[2],
                      std::uint32_t out[4]) {
        std::uint32_t x0 = ctr_in[0], x1 = ctr_in[1], x2 = ctr_in[2], x3 = ctr_in[3];
        std::uint32_t k0 = key_in[0], k1 = key_in[1];
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * x0;
            const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * x2;
            const std::uint32_t y0 = static_cast<std::uint32_t>(p1 >> 32) ^ x1 ^ k0;
            const std::uint32_t y1 = static_cast<std::uint32_t>(p1);
            const std::uint32_t y2 = static_cast<std::uint32_t>(p0 >> 32) ^ x3 ^ k1;
            const std::uint32_t y3 = static_cast<std::uint32_t>(p0);
            x0 = y0; x1 = y1; x2 = y2; x3 = y3;
            k0 += kW0; k1 += kW1;
        }
        out[0] = x0; out[1] = x1; out[2] = x2; out[3] = x3;
    }

private:
    static constexpr std::uint32_t kM0 = 0xD2511F53u;
    static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kW0 = 0x9E3779B9u;
    static constexpr std::uint32_t kW1 = 0xBB67AE85u;

    void refill() {
        const std::uint32_t key[2] = {key0_, key1_};
        block(ctr_, key, out_);
        if (++ctr_[0] == 0) ++ctr_[1];              // 2^64 blocks per stream
        have_ = 4;
    }

    std::uint32_t ctr_[4];
    std::uint32_t key0_, key1_;
    std::uint32_t out_[4] = {0, 0, 0, 0};
    int have_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace cryocontrast
