#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "cryocontrast/rng.hpp"

using cryocontrast::Philox;

TEST_CASE("Philox4x32-10 known-answer vectors", "[rng]") {
    std::uint32_t out[4];

    SECTION("all-zero counter and key") {
        const std::uint32_t ctr[4] = {0, 0, 0, 0};
        const std::uint32_t key[2] = {0, 0};
        Philox::block(ctr, key, out);
        CHECK(out[0] == 0x6627e8d5u);
        CHECK(out[1] == 0xe169c58du);
        CHECK(out[2] == 0xbc57ac4cu);
        CHECK(out[3] == 0x9b00dbd8u);
    }

    SECTION("all-ones counter and key") {
        const std::uint32_t ctr[4] = {0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu};
        const std::uint32_t key[2] = {0xffffffffu, 0xffffffffu};
        Philox::block(ctr, key, out);
        CHECK(out[0] == 0x408f276du);
        CHECK(out[1] == 0x41c83b0eu);
        CHECK(out[2] == 0xa20bc7c6u);
        CHECK(out[3] == 0x6d5451fdu);
    }

    SECTION("pi-digit counter and key") {
        const std::uint32_t ctr[4] = {0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u};
        const std::uint32_t key[2] = {0xa4093822u, 0x299f31d0u};
        Philox::block(ctr, key, out);
        CHECK(out[0] == 0xd16cfe09u);
        CHECK(out[1] == 0x94fdccebu);
        CHECK(out[2] == 0x5001e420u);
        CHECK(out[3] == 0x24126ea1u);
    }
}

TEST_CASE("stream layout matches the block convention", "[rng]") {
    // Stream s, seed k: first four outputs must equal the raw block at
    // counter {0, 0, lo(s), hi(s)} with key {lo(k), hi(k)}.
    const std::uint64_t seed = 0x0123456789abcdefULL;
    const std::uint64_t stream = 0xfedcba9876543210ULL;
    Philox gen(seed, stream);

    const std::uint32_t ctr[4] = {0u, 0u, 0x76543210u, 0xfedcba98u};
    const std::uint32_t key[2] = {0x89abcdefu, 0x01234567u};
    std::uint32_t expect[4];
    Philox::block(ctr, key, expect);

    for (int i = 0; i < 4; ++i) CHECK(gen.next_u32() == expect[i]);
}

TEST_CASE("identical construction reproduces the sequence", "[rng]") {
    Philox a(42, 7), b(42, 7);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u32() == b.next_u32());
}

TEST_CASE("distinct streams decorrelate", "[rng]") {
    Philox a(42, 0), b(42, 1);
    int equal = 0;
    for (int i = 0; i < 1000; ++i)
        if (a.next_u32() == b.next_u32()) ++equal;
    CHECK(equal == 0);
}

TEST_CASE("uniform lies in [0,1) and fills the unit interval", "[rng]") {
    Philox gen(123);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double u = gen.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 1e-3);
    CHECK(hi > 1.0 - 1e-3);
}

TEST_CASE("normal moments", "[rng]") {
    Philox gen(2024);
    const int n = 200000;
    double s1 = 0.0, s2 = 0.0, s4 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = gen.normal();
        s1 += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    // Monte-Carlo tolerances ~5 standard errors at n = 2e5.
    CHECK(std::abs(s1 / n) < 0.012);
    CHECK(std::abs(s2 / n - 1.0) < 0.016);
    CHECK(std::abs(s4 / n - 3.0) < 0.11);
}

TEST_CASE("uniform(lo,hi) honors the bounds", "[rng]") {
    Philox gen(5);
    for (int i = 0; i < 10000; ++i) {
        const double u = gen.uniform(0.5, 1.5);
        REQUIRE(u >= 0.5);
        REQUIRE(u < 1.5);
    }
}
