#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace fdnm {

/// Worker cap: FDNM_THREADS if set and positive, else hardware concurrency.
inline std::size_t thread_budget() {
  static const std::size_t budget = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("FDNM_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) return std::min<std::size_t>(static_cast<std::size_t>(v), 256);
      } catch (...) {
      }
    }
    return hw;
  }();
  return budget;
}

/// Runs fn(i) for i in [0, n). Each index must write disjoint memory.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) fn(i);
  };
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
}

}  // namespace fdnm
