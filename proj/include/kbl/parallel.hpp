#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace kbl {

// Number of worker threads used by parallel loops (default 1).
int num_threads();
void set_num_threads(int n);

// Static contiguous chunking: iteration i always runs on the same chunk for a
// given thread count, and each iteration writes only its own outputs, so the
// results do not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, F&& body)
{
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t k = 0; k < t; ++k) {
    const std::size_t lo = n * k / t, hi = n * (k + 1) / t;
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace kbl
