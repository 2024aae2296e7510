#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace hcnn {

// Worker count: explicit request > HCNN_THREADS > 1. Default is single
// threaded because reproducibility is a contract, not an option; kernels
// are written so any count gives bit-identical results, but 1 is the
// reference mode.
inline int thread_count(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("HCNN_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

// Splits [0, n) into contiguous chunks, one worker each. Each index must be
// written by exactly one worker; there is no reduction across workers, so
// the result cannot depend on the split.
template <class F>
void parallel_for(std::size_t n, int threads, F&& body) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::size_t nw = static_cast<std::size_t>(threads);
    if (nw > n) nw = n;
    std::vector<std::thread> pool;
    pool.reserve(nw);
    std::size_t chunk = n / nw, extra = n % nw, begin = 0;
    for (std::size_t t = 0; t < nw; ++t) {
        std::size_t end = begin + chunk + (t < extra ? 1 : 0);
        pool.emplace_back([&body, begin, end] {
            for (std::size_t i = begin; i < end; ++i) body(i);
        });
        begin = end;
    }
    for (auto& th : pool) th.join();
}

}  // namespace hcnn
