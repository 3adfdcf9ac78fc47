#pragma once

#include <cstddef>
#include <functional>

namespace oodcv {

/// Number of worker lanes. Defaults to the hardware concurrency; the
/// OODCV_WORKERS environment variable overrides it.
std::size_t worker_lanes();

/// Runs fn(i) for i in [0, n) over `worker_lanes()` threads. Each index is
/// processed exactly once; callers must make fn(i) depend only on i so that
/// results do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace oodcv
