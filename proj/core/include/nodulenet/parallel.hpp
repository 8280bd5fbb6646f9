#pragma once

#include <cstddef>
#include <functional>

namespace nodulenet {

/// Worker count used by batch-parallel kernels. 0 restores the default
/// (hardware concurrency).
void set_num_threads(int n);
int num_threads();

/// Runs body(i) for i in [0, n) on up to num_threads() workers with a static
/// contiguous partition. Callers must make body(i) independent across i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

/// Asks the C allocator to keep freed large blocks instead of returning them
/// to the OS, so per-step activation buffers are reused without page faults.
/// Process-wide; meant for long training runs. No-op off glibc.
void retain_freed_memory();

}  // namespace nodulenet
