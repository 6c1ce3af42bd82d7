#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace opflayer {

/// Number of workers to use when the caller passes 0.
inline int default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Each index is
/// handled exactly once and results must be written to per-index slots, so
/// the outcome does not depend on scheduling. The first exception is
/// rethrown after all workers stop.
template <typename Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
    const auto nthreads = static_cast<std::size_t>(std::max(1, workers));
    if (nthreads == 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(count);
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(nthreads, count); ++t) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace opflayer
