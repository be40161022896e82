#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace trail {

// Runs fn(i) for i in [0, n). The OpenMP path requires every iteration to
// write only to its own slot; reductions that care about summation order must
// happen after the loop, in index order. Under that discipline the serial and
// parallel paths are bit-identical, which the tests assert.
//
// An exception may not unwind out of an OpenMP region, so the first one is
// captured and rethrown after the loop.
template <typename Fn>
void parallel_for(std::size_t n, bool parallel, Fn&& fn) {
#ifdef _OPENMP
  if (parallel && n > 1) {
    std::exception_ptr first;
    std::mutex mu;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      try {
        fn(static_cast<std::size_t>(i));
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first) first = std::current_exception();
      }
    }
    if (first) std::rethrow_exception(first);
    return;
  }
#else
  (void)parallel;
#endif
  for (std::size_t i = 0; i < n; ++i) {
    fn(i);
  }
}

inline int hardware_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_thread_count(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace trail
