#pragma once

#include <cstddef>
#include <functional>

namespace salt {

// Worker count for data-parallel helpers: SALT_THREADS env var if set,
// otherwise hardware concurrency. Always at least 1.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Work items must write to disjoint outputs;
// callers needing a reduction combine the per-item results afterwards in
// fixed index order, so results never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace salt
