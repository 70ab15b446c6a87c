#pragma once

#include <cstddef>
#include <functional>

namespace fedsim {

// Runs fn(k) for k in [0, count), across up to `threads` workers. Results
// must not depend on scheduling: every k has to touch disjoint state. The
// first exception is rethrown after the pool drains.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace fedsim
