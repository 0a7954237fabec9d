#pragma once

#include <cstddef>
#include <functional>

namespace ibpica {

/// Worker count: IBPICA_THREADS if set (at most 256), else hardware concurrency.
std::size_t worker_count();

/// Run fn(begin, end) over a static partition of [0, n). Each index is
/// visited exactly once, so results are independent of the worker count as
/// long as fn only writes to its own indices.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace ibpica
