#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gsnr {

/// Worker count: GSNR_THREADS env var if set, else hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("GSNR_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Static block partition of [0, n). Each index is visited exactly once and
/// writes only its own outputs, so results do not depend on the thread count.
template <typename Fn>
inline void parallel_for(std::int64_t n, Fn&& fn) {
  const int workers = worker_count();
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace gsnr
