#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dualrc {

namespace detail {
inline std::atomic<unsigned>& worker_slot() {
    static std::atomic<unsigned> n{[] {
        if (const char* env = std::getenv("DUALRC_WORKERS")) {
            int v = std::atoi(env);
            if (v > 0) return static_cast<unsigned>(v);
        }
        return std::max(1u, std::thread::hardware_concurrency());
    }()};
    return n;
}
} // namespace detail

inline unsigned num_workers() { return detail::worker_slot().load(); }
inline void set_num_workers(unsigned n) { detail::worker_slot().store(std::max(1u, n)); }

// Splits [0, n) into contiguous chunks, one per worker. Callers must only
// write to output elements owned by their index range; every element is then
// computed by exactly one thread in a fixed order, so results do not depend
// on the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    if (n == 0) return;
    const std::size_t workers = std::min<std::size_t>(num_workers(), n);
    if (workers <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&](std::size_t begin, std::size_t end) {
        try {
            fn(begin, end);
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
    };
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(n, begin + chunk);
        if (begin < end) pool.emplace_back(run, begin, end);
    }
    run(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace dualrc
