#pragma once

// Deterministic fork-join over a fixed chunk partition. The partition does
// not depend on the worker count, so reductions performed chunk-by-chunk in
// index order give bit-identical results for any RKINN_THREADS.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace rkinn {

/// Worker cap from RKINN_THREADS (default 1).
inline std::size_t worker_count() {
    const char* env = std::getenv("RKINN_THREADS");
    if (!env || !*env) return 1;
    try {
        const long v = std::stol(env);
        return v < 1 ? 1 : static_cast<std::size_t>(std::min<long>(v, 256));
    } catch (...) {
        return 1;
    }
}

/// Calls f(chunk, worker) for every chunk in [0, n_chunks). Chunks are
/// claimed dynamically; f must only write chunk-owned or worker-owned state.
template <class F>
void parallel_chunks(std::size_t n_chunks, std::size_t workers, F&& f) {
    workers = std::max<std::size_t>(1, std::min(workers, n_chunks));
    if (workers == 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) f(c, std::size_t{0});
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t c = next++; c < n_chunks; c = next++) f(c, w);
            } catch (...) {
                errors[w] = std::current_exception();
                next = n_chunks;
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace rkinn
