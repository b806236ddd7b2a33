#include <cmath>

#include "sae/simd.hpp"

namespace sae::simd {
namespace {

float dot_scalar(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(acc);
}

void dot4_scalar(const float* x, const float* w0, const float* w1, const float* w2, const float* w3,
                 std::size_t n, float* out) {
  out[0] = dot_scalar(x, w0, n);
  out[1] = dot_scalar(x, w1, n);
  out[2] = dot_scalar(x, w2, n);
  out[3] = dot_scalar(x, w3, n);
}

void axpy_scalar(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(float alpha, float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double sqdist_scalar(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(a[i]) - b[i];
    acc += t * t;
  }
  return acc;
}

void adam_scalar(float* p, float* m, float* v, const float* g, std::size_t n, float lr_t,
                 float beta1, float beta2, float eps, float vc) {
  const float one_m_b1 = 1.0f - beta1;
  const float one_m_b2 = 1.0f - beta2;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + one_m_b1 * g[i];
    v[i] = beta2 * v[i] + one_m_b2 * g[i] * g[i];
    p[i] -= lr_t * m[i] / (std::sqrt(v[i] * vc) + eps);
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{"scalar",      dot_scalar,    dot4_scalar, axpy_scalar,
                                 scale_scalar,  sqdist_scalar, adam_scalar};
  return table;
}

}  // namespace sae::simd
