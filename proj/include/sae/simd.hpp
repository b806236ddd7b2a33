#pragma once

// Runtime-dispatched inner loops. Every kernel has a scalar reference
// implementation; an AVX2/FMA variant is chosen at first use when the CPU
// supports it. Set SAE_SIMD=scalar to force the reference path.
//
// Within one process the selected table never changes, so results are
// deterministic for fixed inputs. The two tables agree to float rounding,
// not bitwise (different reduction trees).

#include <cstddef>
#include <string_view>

namespace sae::simd {

struct KernelTable {
  std::string_view name;

  float (*dot)(const float* a, const float* b, std::size_t n);
  // out[j] = dot(x, w[j]) for j < 4
  void (*dot4)(const float* x, const float* w0, const float* w1, const float* w2, const float* w3,
               std::size_t n, float* out);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  void (*scale)(float alpha, float* x, std::size_t n);
  // sum (a - b)^2, accumulated in double
  double (*sqdist)(const float* a, const float* b, std::size_t n);
  // Bias-corrected Adam over a flat slice. lr_t = lr / (1 - beta1^t), vc = 1 / (1 - beta2^t).
  void (*adam)(float* p, float* m, float* v, const float* g, std::size_t n, float lr_t, float beta1,
               float beta2, float eps, float vc);
};

const KernelTable& scalar_kernels();
// nullptr when not compiled in or not supported by this CPU.
const KernelTable* avx2_kernels();

// The table used by the library.
const KernelTable& kernels();

}  // namespace sae::simd
