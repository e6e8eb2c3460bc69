#pragma once

#include <cstddef>
#include <functional>

namespace xkt {

/// Worker cap from XKT_THREADS (0 or unset = hardware concurrency).
std::size_t worker_threads();
void set_worker_threads(std::size_t n);

/// Runs body(begin, end) over disjoint contiguous chunks of [0, n). Chunks
/// never share outputs, so results do not depend on the thread count.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace xkt
