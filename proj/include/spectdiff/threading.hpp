#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace spectdiff {

inline int default_thread_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

/// Static-partition parallel loop. fn(i) must write only to slots owned by
/// index i, so results are identical for any thread count.
inline void parallel_for(int64_t n, int n_threads, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (n_threads < 1) n_threads = 1;
    if (n_threads == 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = int(n < n_threads ? n : n_threads);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            const int64_t lo = n * w / workers;
            const int64_t hi = n * (w + 1) / workers;
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace spectdiff
