#pragma once

#include <cstdint>
#include <functional>

namespace qsci {

/// Worker count: hardware concurrency, capped by QSCI_THREADS when set.
int worker_count();

/// Splits [0, n) into contiguous chunks, one per worker, and joins.
/// Chunk boundaries depend only on n and the worker count.
void parallel_for(int64_t n, const std::function<void(int64_t begin, int64_t end)>& fn);

}  // namespace qsci
