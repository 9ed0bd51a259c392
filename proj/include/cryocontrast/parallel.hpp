#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace cryocontrast {

/// Worker count: explicit argument > CRYOCONTRAST_THREADS > hardware.
inline int resolve_threads(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("CRYOCONTRAST_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

/// Static block partition of [0, n).  Each index is visited exactly once and
/// results must be written to per-index slots, so the output is identical for
/// every thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                         int threads = 0) {
    const int nt = resolve_threads(threads);
    if (nt <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t nthreads = std::min<std::size_t>(nt, n);
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t]() {
            const std::size_t lo = n * t / nthreads;
            const std::size_t hi = n * (t + 1) / nthreads;
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace cryocontrast
