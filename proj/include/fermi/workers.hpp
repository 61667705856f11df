#pragma once

#include <cstddef>
#include <functional>

namespace fermi {

// Deterministic task runner: tasks are indexed, each task writes only its own
// output slot, and every stream of randomness is derived from (seed, task id).
// Results are therefore identical for any worker count.
class WorkerPool {
 public:
  explicit WorkerPool(unsigned workers);

  unsigned size() const { return workers_; }

  // Runs task(0..count-1) across the pool; rethrows the first task error.
  void run(std::size_t count, const std::function<void(std::size_t)>& task);

 private:
  unsigned workers_;
};

}  // namespace fermi
