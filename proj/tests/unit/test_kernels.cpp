#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/bench.hpp"
#include "sae/error.hpp"
#include "sae/simd.hpp"
#include "sae/tensor.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

TEST_CASE("scalar and avx2 kernel tables agree") {
  const simd::KernelTable* fast = simd::avx2_kernels();
  if (!fast) {
    MESSAGE("AVX2 kernels unavailable on this machine; only the scalar table is exercised");
    return;
  }
  const auto& ref = simd::scalar_kernels();
  std::mt19937_64 rng(7);
  for (std::size_t n : {1u, 3u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 64u, 100u, 257u}) {
    auto a = random_vector(n, rng), b = random_vector(n, rng);
    CHECK(rel_err(ref.dot(a.data(), b.data(), n), fast->dot(a.data(), b.data(), n)) < 1e-5);
    CHECK(rel_err(ref.sqdist(a.data(), b.data(), n), fast->sqdist(a.data(), b.data(), n)) < 1e-5);

    auto w0 = random_vector(n, rng), w1 = random_vector(n, rng), w2 = random_vector(n, rng), w3 = random_vector(n, rng);
    float o1[4], o2[4];
    ref.dot4(a.data(), w0.data(), w1.data(), w2.data(), w3.data(), n, o1);
    fast->dot4(a.data(), w0.data(), w1.data(), w2.data(), w3.data(), n, o2);
    for (int j = 0; j < 4; ++j) CHECK(std::abs(o1[j] - o2[j]) <= 1e-4f * (1.0f + std::abs(o1[j])));

    auto y1 = b, y2 = b;
    ref.axpy(0.37f, a.data(), y1.data(), n);
    fast->axpy(0.37f, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-6));
    ref.scale(-1.5f, y1.data(), n);
    fast->scale(-1.5f, y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-6));

    auto p1 = a, p2 = a, m1 = b, m2 = b;
    std::vector<float> v1(n, 0.5f), v2(n, 0.5f);
    ref.adam(p1.data(), m1.data(), v1.data(), b.data(), n, 1e-3f, 0.9f, 0.999f, 1e-8f, 1.001f);
    fast->adam(p2.data(), m2.data(), v2.data(), b.data(), n, 1e-3f, 0.9f, 0.999f, 1e-8f, 1.001f);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-6));
      CHECK(m1[i] == doctest::Approx(m2[i]).epsilon(1e-6));
      CHECK(v1[i] == doctest::Approx(v2[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("topk picks the largest values and breaks ties toward the lower index") {
  const std::vector<float> v{1.0f, 3.0f, 3.0f, -2.0f, 5.0f, 3.0f};
  const auto o = topk_order(v, 3);
  REQUIRE(o.size() == 3);
  CHECK(o[0] == 4);
  CHECK(o[1] == 1);
  CHECK(o[2] == 2);
  const SparseVec z = topk_select(v, 3);
  REQUIRE(z.entries.size() == 3);
  CHECK(z.entries[0].index == 1);
  CHECK(z.entries[2].index == 4);
  CHECK_THROWS_AS(topk_order(v, 0), InvalidArgument);
  CHECK_THROWS_AS(topk_order(v, 7), InvalidArgument);
}

TEST_CASE("topk with relu_after keeps k entries but clamps negatives") {
  const std::vector<float> v{-1.0f, -3.0f, 2.0f, -0.5f};
  const SparseVec z = topk_select(v, 3, true);
  REQUIRE(z.entries.size() == 3);
  CHECK(z.nnz() == 1);
  for (const auto& e : z.entries) CHECK(e.value >= 0.0f);
}

TEST_CASE("topk matches a full-sort oracle") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng() % 300;
    const std::size_t k = 1 + rng() % n;
    auto v = random_vector(n, rng);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] > v[b]; });
    const auto o = topk_order(v, k);
    for (std::size_t i = 0; i < k; ++i) CHECK(o[i] == idx[i]);
  }
}

TEST_CASE("sparse matmuls match dense references") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 1 + rng() % 40, n = 8 + rng() % 120, k = 1 + rng() % 8;
    const DenseMatrix Wt = random_matrix(n, d, rng);
    const SparseVec z = random_sparse(n, k, rng);
    std::vector<double> ref(d, 0.0);
    const auto dense = z.to_dense();
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t i = 0; i < n; ++i) ref[c] += static_cast<double>(Wt(i, c)) * dense[i];
    std::vector<float> out(d, 0.0f);
    dense_sparse_matmul_rows(Wt, z, out);
    const auto out2 = dense_sparse_matmul(Wt.transposed(), z);
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(out[c] == doctest::Approx(ref[c]).epsilon(1e-5).scale(1.0));
      CHECK(out2[c] == doctest::Approx(ref[c]).epsilon(1e-5).scale(1.0));
    }

    const std::size_t B = 1 + rng() % 5;
    const DenseMatrix X = random_matrix(B, d, rng);
    std::vector<std::vector<LatentId>> sets(B);
    for (auto& s : sets)
      for (const auto& e : random_sparse(n, k, rng).entries) s.push_back(e.index);
    const auto got = matmul_at_sparse_indices(X, Wt, sets);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < sets[b].size(); ++j) {
        double r = 0.0;
        for (std::size_t c = 0; c < d; ++c) r += static_cast<double>(X(b, c)) * Wt(sets[b][j], c);
        CHECK(got[b][j] == doctest::Approx(r).epsilon(1e-5).scale(1.0));
      }

    std::vector<SparseVec> g;
    for (std::size_t b = 0; b < B; ++b) g.push_back(random_sparse(n, k, rng));
    const auto pb = pre_bias_gradient(g, Wt);
    for (std::size_t c = 0; c < d; ++c) {
      double r = 0.0;
      for (const auto& gv : g)
        for (const auto& e : gv.entries) r += static_cast<double>(e.value) * Wt(e.index, c);
      CHECK(pb[c] == doctest::Approx(r).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("matmul_nt matches the naive product") {
  std::mt19937_64 rng(5);
  const DenseMatrix A = random_matrix(7, 13, rng), W = random_matrix(11, 13, rng);
  DenseMatrix C;
  matmul_nt(A, W, C);
  REQUIRE(C.rows == 7);
  REQUIRE(C.cols == 11);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t j = 0; j < 11; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 13; ++c) s += static_cast<double>(A(r, c)) * W(j, c);
      CHECK(C(r, j) == doctest::Approx(s).epsilon(1e-5));
    }
}

TEST_CASE("sparse kernels reject bad shapes") {
  DenseMatrix W(4, 3);
  SparseVec z{5, {{0, 1.0f}}};
  std::vector<float> out(3);
  CHECK_THROWS_AS(dense_sparse_matmul_rows(W, z, out), InvalidArgument);
  SparseVec bad{4, {{9, 1.0f}}};
  CHECK_THROWS_AS(dense_sparse_matmul_rows(W, bad, out), InvalidArgument);
}

TEST_CASE("sharded topk equals global topk at full capacity") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 200; ++t) {
    const std::size_t S = 1 + rng() % 6, per = 4 + rng() % 20, k = 1 + rng() % per;
    std::vector<std::vector<float>> shards(S);
    std::vector<float> all;
    for (auto& s : shards) {
      s = random_vector(per, rng);
      all.insert(all.end(), s.begin(), s.end());
    }
    CHECK(sharded_topk(shards, k, static_cast<double>(S)) == topk_select(all, k));
  }
  CHECK_THROWS_AS(sharded_topk({}, 1, 1.0), InvalidArgument);
}

TEST_CASE("flop counts") {
  const FlopReport r = count_flops({KernelOp::decoder_forward, 1, 64, 4096, 32});
  CHECK(r.ratio == doctest::Approx(128.0));
  const FlopReport f = count_flops({KernelOp::full_step, 1024, 64, 4096, 32});
  CHECK(f.ratio > 4.0);
  CHECK(f.ratio <= 6.0);
  CHECK(parse_kernel_op(kernel_op_name(KernelOp::pre_bias_grad)) == KernelOp::pre_bias_grad);
  CHECK_THROWS_AS(parse_kernel_op("nope"), InvalidArgument);
}

TEST_CASE("bench paths compute the same result") {
  for (auto op : {KernelOp::decoder_forward, KernelOp::decoder_grad, KernelOp::latent_grad, KernelOp::pre_bias_grad}) {
    const BenchResult r = bench_kernel({op, 16, 16, 128, 4}, 1, 1);
    CHECK(r.max_abs_diff < 1e-3);
  }
}
