#pragma once

// Deterministic parallel episode execution: indices are split into
// contiguous chunks, results land in preallocated slots, and all random
// streams are counter-based, so the worker count never changes results.

#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace qest {

inline int worker_count_from_env(const char* var = "QEST_WORKERS") {
    const char* s = std::getenv(var);
    if (s == nullptr || *s == '\0') return 1;
    const int n = std::atoi(s);
    return n < 1 ? 1 : n;
}

// fn(worker_id, index) for index in [0, n). worker_id < workers.
template <typename Fn>
void parallel_for(std::int64_t n, int workers, Fn&& fn) {
    if (n <= 0) return;
    if (workers > n) workers = static_cast<int>(n);
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(0, i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, w, lo, hi] {
            try {
                for (std::int64_t i = lo; i < hi; ++i) fn(w, i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace qest
