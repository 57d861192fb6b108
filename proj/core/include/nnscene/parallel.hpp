#pragma once

#include <cstddef>
#include <functional>

namespace nnscene {

/// Worker count from NNSCENE_THREADS, falling back to hardware concurrency.
std::size_t default_thread_count();

/// Runs body(i) for i in [0, n). Indices are split into contiguous chunks, one
/// per worker; callers write results to per-index slots so the outcome never
/// depends on scheduling. threads == 0 means default_thread_count().
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                  std::size_t threads = 0);

}  // namespace nnscene
