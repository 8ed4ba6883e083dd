#pragma once

#include <atomic>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mvlab::parallel {

enum class Mode { serial, openmp };

namespace detail {
inline std::atomic<int>& worker_count() {
    static std::atomic<int> n{0}; // 0 = library default
    return n;
}
inline std::atomic<Mode>& mode_flag() {
    static std::atomic<Mode> m{Mode::openmp};
    return m;
}
} // namespace detail

// 0 restores the OpenMP default.
inline void set_workers(int n) { detail::worker_count().store(n < 0 ? 0 : n); }

inline int workers() {
    const int n = detail::worker_count().load();
    if (n > 0) return n;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Serial mode runs every kernel through its reference path; kept for testing
// the OpenMP kernels against it and for the benchmark.
inline void set_mode(Mode m) { detail::mode_flag().store(m); }
inline Mode mode() { return detail::mode_flag().load(); }

// Data-parallel loop over [0, n). The body must only write state owned by
// iteration i; reductions are done by the caller as an ordered fold so that
// results are identical for any worker count.
template <class F>
void parallel_for(std::int64_t n, F&& f) {
#ifdef _OPENMP
    if (mode() == Mode::openmp && n > 1) {
        const int nw = workers();
#pragma omp parallel for schedule(static) num_threads(nw)
        for (std::int64_t i = 0; i < n; ++i) f(i);
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) f(i);
}

} // namespace mvlab::parallel
