#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace mbd {

// Chunked parallel loop over [begin,end). Each worker owns a contiguous
// index range and must only write to locations derived from its own
// indices; with that discipline results are bit-identical for any thread
// count, including 1 (which runs inline).
inline void parallel_for(int begin, int end, int threads,
                         const std::function<void(int)>& body) {
  const int n = end - begin;
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = begin; i < end; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int lo = begin + t * chunk;
    const int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (int i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

} // namespace mbd
