#pragma once

#include <cstddef>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace slashlab {

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0 or 1 = inline).
/// Each index is visited exactly once; callers write results into
/// per-index slots and reduce afterwards, so output never depends on the
/// schedule.
inline void parallel_for(std::size_t n, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(threads, n);
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

/// Pairwise (tree) reduction in a fixed order. `items` is consumed.
template <typename T, typename Add>
T pairwise_sum(std::vector<T> items, Add add) {
  if (items.empty()) return T{};
  std::size_t n = items.size();
  while (n > 1) {
    const std::size_t half = (n + 1) / 2;
    for (std::size_t i = 0; i + half < n; ++i) {
      items[i] = add(items[i], items[i + half]);
    }
    n = half;
  }
  return std::move(items[0]);
}

/// Thread count from SLASHLAB_THREADS, or `fallback` when unset/invalid.
inline unsigned threads_from_env(unsigned fallback = 1) {
  if (const char* env = std::getenv("SLASHLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(v);
  }
  return fallback;
}

}  // namespace slashlab
