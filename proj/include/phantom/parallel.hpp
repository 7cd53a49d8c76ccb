#pragma once

// Thread fan-out for independent per-sample work (evaluation, batch
// generation). Results land at their input index, so output order never
// depends on scheduling.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace phantom {

/// BLAS runs single-threaded so GEMM results never depend on the core
/// count; parallelism comes from parallel_map over samples instead.
inline void pin_blas_threads() { openblas_set_num_threads(1); }

/// PHANTOM_THREADS if set and positive, else 1.
inline std::size_t thread_count()
{
    if (const char* env = std::getenv("PHANTOM_THREADS")) {
        try {
            const long n = std::stol(env);
            if (n > 0) return static_cast<std::size_t>(n);
        } catch (...) {
        }
    }
    return 1;
}

/// out[i] = fn(i) for i < n; the first exception thrown by any worker is rethrown.
template <class R, class F>
std::vector<R> parallel_map(std::size_t n, F&& fn, std::size_t threads = thread_count())
{
    std::vector<R> out(n);
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i; (i = next.fetch_add(1)) < n;) out[i] = fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
                next = n;
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace phantom
