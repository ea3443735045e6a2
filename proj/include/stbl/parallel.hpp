#pragma once

// Static-partition parallel loop on std::thread. Each index is processed by
// exactly one worker and results are written to per-index slots, so output is
// independent of the thread count.

#include <cstddef>
#include <functional>

namespace stbl {

/// Resolves a requested thread count: a positive request wins, otherwise
/// STBL_THREADS, otherwise 1.
std::size_t resolve_threads(std::size_t requested = 0);

void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace stbl
