#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sae/tensor.hpp"

namespace sae::testing {

inline DenseMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> N(0.0f, sd);
  DenseMatrix m(r, c);
  for (auto& v : m.data) v = N(rng);
  return m;
}

inline std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> N(0.0f, sd);
  std::vector<float> v(n);
  for (auto& x : v) x = N(rng);
  return v;
}

// k distinct indices, positive values.
inline SparseVec random_sparse(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<LatentId> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<LatentId>(i);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng() % (n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::uniform_real_distribution<float> U(0.1f, 2.0f);
  SparseVec z;
  z.dim = n;
  for (auto i : idx) z.entries.push_back({i, U(rng)});
  return z;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

}  // namespace sae::testing
