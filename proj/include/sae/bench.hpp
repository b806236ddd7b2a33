#pragma once

#include <cstdint>

#include "sae/tensor.hpp"

namespace sae {

struct BenchResult {
  FlopReport flops;
  double dense_seconds = 0.0;   // per repetition
  double sparse_seconds = 0.0;  // per repetition
  double speedup = 0.0;         // dense / sparse
  double max_abs_diff = 0.0;    // between the two paths' outputs
  std::size_t reps = 0;
};

// Times the dense and sparse implementations of one training-step component on
// random inputs of the queried shape. Both paths use the dispatched kernels.
BenchResult bench_kernel(const FlopQuery& q, std::size_t reps, std::uint64_t seed);

}  // namespace sae
