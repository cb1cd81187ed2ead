#pragma once

// Row-level work sharing capped by the OTCIL_THREADS environment variable.
// Only embarrassingly parallel loops go through here: each index writes its
// own output slot, no reductions, so the numeric result does not depend on
// the thread count.

#include <algorithm>
#include <cstdlib>
#include <cstddef>
#include <string>
#include <thread>
#include <vector>

namespace otcil {

inline unsigned thread_budget() {
    static const unsigned cached = [] {
        unsigned hw = std::thread::hardware_concurrency();
        if (hw == 0) hw = 1;
        if (const char* env = std::getenv("OTCIL_THREADS")) {
            try {
                const long requested = std::stol(env);
                if (requested >= 1) return std::min<unsigned>(static_cast<unsigned>(requested), 256u);
            } catch (...) {
            }
        }
        return hw;
    }();
    return cached;
}

// fn(i) for i in [0, n); work_hint is a rough per-call flop count used to
// skip thread spawn on tiny problems.
template <class Fn>
void parallel_rows(std::size_t n, std::size_t work_hint, Fn&& fn) {
    const unsigned budget = thread_budget();
    if (budget <= 1 || n < 2 || n * work_hint < (1u << 20)) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned workers = std::min<unsigned>(budget, static_cast<unsigned>(n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace otcil
