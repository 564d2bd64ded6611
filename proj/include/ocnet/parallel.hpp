#pragma once

#include <cstddef>
#include <functional>

namespace ocnet {

/// Runs fn(0..count-1) on up to `workers` threads. Each index writes only its
/// own output slot, so results do not depend on the worker count. If several
/// calls throw, the exception of the lowest index is rethrown.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace ocnet
