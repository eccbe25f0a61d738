#pragma once

#include <cstdint>
#include <functional>

namespace fb {

// Number of worker threads the library may use. Reads FB_THREADS once on
// first call; falls back to std::thread::hardware_concurrency().
int worker_count();

// Runs fn(i) for i in [0, n). Work is split into chunks whose boundaries
// depend only on n, never on the worker count, so any reduction performed
// inside a single chunk sees the same operand order no matter how many
// threads execute. Exceptions from fn are rethrown on the calling thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace fb
