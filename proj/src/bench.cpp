#include "sae/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<float> N(0.0f, 1.0f);
  DenseMatrix m(r, c);
  for (auto& v : m.data) v = N(rng);
  return m;
}

struct Inputs {
  DenseMatrix X;    // B x d
  DenseMatrix W;    // n x d (encoder or decoder, latent-major)
  DenseMatrix E;    // B x d upstream gradient
  DenseMatrix Z;    // B x n dense view of the codes
  std::vector<SparseVec> z;
  std::vector<std::vector<LatentId>> idx;
};

Inputs make_inputs(const FlopQuery& q, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Inputs in;
  in.X = random_matrix(q.batch, q.d, rng);
  in.W = random_matrix(q.n, q.d, rng);
  in.E = random_matrix(q.batch, q.d, rng);
  in.Z = DenseMatrix(q.batch, q.n);
  std::normal_distribution<float> N(0.0f, 1.0f);
  std::vector<float> pre(q.n);
  for (std::size_t b = 0; b < q.batch; ++b) {
    for (auto& v : pre) v = N(rng);
    in.z.push_back(topk_select(pre, q.k));
    std::vector<LatentId> ids;
    for (const auto& e : in.z.back().entries) {
      in.Z(b, e.index) = e.value;
      ids.push_back(e.index);
    }
    in.idx.push_back(std::move(ids));
  }
  return in;
}

// out (B x d) = Z W, touching every latent.
void dense_decoder(const Inputs& in, DenseMatrix& out) {
  const auto& kt = simd::kernels();
  out = DenseMatrix(in.Z.rows, in.W.cols);
  for (std::size_t b = 0; b < in.Z.rows; ++b)
    for (std::size_t i = 0; i < in.W.rows; ++i) kt.axpy(in.Z(b, i), in.W.row(i).data(), out.row(b).data(), in.W.cols);
}

void sparse_decoder(const Inputs& in, DenseMatrix& out) {
  out = DenseMatrix(in.Z.rows, in.W.cols);
  for (std::size_t b = 0; b < in.Z.rows; ++b) dense_sparse_matmul_rows(in.W, in.z[b], out.row(b));
}

// gW (n x d) = Z^T E
void dense_weight_grad(const Inputs& in, DenseMatrix& g) {
  const auto& kt = simd::kernels();
  g = DenseMatrix(in.W.rows, in.W.cols);
  for (std::size_t b = 0; b < in.Z.rows; ++b)
    for (std::size_t i = 0; i < in.W.rows; ++i) kt.axpy(in.Z(b, i), in.E.row(b).data(), g.row(i).data(), in.W.cols);
}

void sparse_weight_grad(const Inputs& in, DenseMatrix& g) {
  const auto& kt = simd::kernels();
  g = DenseMatrix(in.W.rows, in.W.cols);
  for (std::size_t b = 0; b < in.Z.rows; ++b)
    for (const auto& e : in.z[b].entries) kt.axpy(e.value, in.E.row(b).data(), g.row(e.index).data(), in.W.cols);
}

// Gradient wrt the codes: E W^T, dense over all latents vs only the active ones.
void dense_latent_grad(const Inputs& in, DenseMatrix& g) { matmul_nt(in.E, in.W, g); }

void sparse_latent_grad(const Inputs& in, DenseMatrix& g) {
  const auto vals = matmul_at_sparse_indices(in.E, in.W, in.idx);
  g = DenseMatrix(in.Z.rows, in.W.rows);
  for (std::size_t b = 0; b < vals.size(); ++b)
    for (std::size_t j = 0; j < vals[b].size(); ++j) g(b, in.idx[b][j]) = vals[b][j];
}

// Pre-bias gradient: W^T applied to every code row, summed.
void dense_pre_bias(const Inputs& in, DenseMatrix& g) {
  const auto& kt = simd::kernels();
  g = DenseMatrix(1, in.W.cols);
  for (std::size_t b = 0; b < in.Z.rows; ++b)
    for (std::size_t i = 0; i < in.W.rows; ++i) kt.axpy(in.Z(b, i), in.W.row(i).data(), g.row(0).data(), in.W.cols);
}

void sparse_pre_bias(const Inputs& in, DenseMatrix& g) {
  const auto v = pre_bias_gradient(in.z, in.W);
  g = DenseMatrix(1, in.W.cols);
  std::copy(v.begin(), v.end(), g.data.begin());
}

double max_diff(const DenseMatrix& a, const DenseMatrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a.data[i] - b.data[i])));
  return m;
}

// Latent gradients are only needed on the support, so compare there.
double max_diff_on_support(const Inputs& in, const DenseMatrix& a, const DenseMatrix& b) {
  double m = 0.0;
  for (std::size_t r = 0; r < in.idx.size(); ++r)
    for (LatentId i : in.idx[r]) m = std::max(m, static_cast<double>(std::abs(a(r, i) - b(r, i))));
  return m;
}

template <typename F>
double time_reps(F&& f, std::size_t reps) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < reps; ++r) f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / static_cast<double>(reps);
}

}  // namespace

BenchResult bench_kernel(const FlopQuery& q, std::size_t reps, std::uint64_t seed) {
  require(reps >= 1, "bench: reps must be >= 1");
  BenchResult r;
  r.flops = count_flops(q);
  r.reps = reps;
  const Inputs in = make_inputs(q, seed);
  DenseMatrix a, b, enc;

  using Fn = void (*)(const Inputs&, DenseMatrix&);
  std::vector<std::pair<Fn, Fn>> parts;
  switch (q.op) {
    case KernelOp::decoder_forward: parts = {{dense_decoder, sparse_decoder}}; break;
    case KernelOp::decoder_grad:
    case KernelOp::encoder_grad: parts = {{dense_weight_grad, sparse_weight_grad}}; break;
    case KernelOp::latent_grad: parts = {{dense_latent_grad, sparse_latent_grad}}; break;
    case KernelOp::pre_bias_grad: parts = {{dense_pre_bias, sparse_pre_bias}}; break;
    case KernelOp::full_step:
      parts = {{dense_decoder, sparse_decoder},
               {dense_latent_grad, sparse_latent_grad},
               {dense_weight_grad, sparse_weight_grad},
               {dense_weight_grad, sparse_weight_grad},
               {dense_pre_bias, sparse_pre_bias}};
      break;
  }
  for (const auto& [dense, sparse] : parts) {
    r.dense_seconds += time_reps([&] { dense(in, a); }, reps);
    r.sparse_seconds += time_reps([&] { sparse(in, b); }, reps);
    const double diff = dense == dense_latent_grad ? max_diff_on_support(in, a, b) : max_diff(a, b);
    r.max_abs_diff = std::max(r.max_abs_diff, diff);
  }
  if (q.op == KernelOp::full_step) {
    // The encoder forward pass is dense in both implementations.
    const double t = time_reps([&] { matmul_nt(in.X, in.W, enc); }, reps);
    r.dense_seconds += t;
    r.sparse_seconds += t;
  }
  r.speedup = r.sparse_seconds > 0.0 ? r.dense_seconds / r.sparse_seconds : 0.0;
  return r;
}

}  // namespace sae
