#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace restitch {

/// Worker count: RESTITCH_THREADS when set and positive, else the hardware
/// concurrency (at least 1).
inline std::size_t thread_budget() {
    if (const char* env = std::getenv("RESTITCH_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<std::size_t>(v);
        } catch (...) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n). Each index is handled by exactly one worker,
/// so results written per index do not depend on the schedule.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t threads = thread_budget()) {
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace restitch
