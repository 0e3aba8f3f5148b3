#pragma once

#include <cstdint>
#include <functional>

namespace edgexc {

// Worker thread cap: min(hardware_concurrency, EDGEXC_THREADS). Applies to
// both the internal parallel_for and the BLAS backend. Resolved once.
int worker_threads();

// Static range split of [0, n) across worker threads. Chunk boundaries depend
// only on n and the thread count, and every index is written by exactly one
// worker, so results are order-independent.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace edgexc
