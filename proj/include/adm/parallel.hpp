#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace adm {

namespace detail {
inline std::atomic<unsigned>& max_threads_ref() {
    static std::atomic<unsigned> n{1};
    return n;
}
}  // namespace detail

/// Caps the workers used by parallel_for. 1 (the default) runs inline.
inline void set_max_threads(unsigned n) { detail::max_threads_ref() = std::max(1u, n); }
inline unsigned max_threads() { return detail::max_threads_ref(); }

/// Runs fn(i) for i in [0, n). Callers only use it for independent work items
/// whose results are combined afterwards in index order, so the outcome does
/// not depend on the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(max_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace adm
