#include "sae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols, rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool DenseMatrix::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

std::size_t SparseVec::nnz() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const SparseEntry& e) { return e.value != 0.0f; }));
}

std::vector<float> SparseVec::to_dense() const {
  std::vector<float> out(dim, 0.0f);
  for (const auto& e : entries) out[e.index] = e.value;
  return out;
}

SparseVec SparseVec::from_dense(std::span<const float> v) {
  SparseVec s;
  s.dim = v.size();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] != 0.0f) s.entries.push_back({static_cast<LatentId>(i), v[i]});
  return s;
}

namespace {

// a ranks ahead of b: larger value, then lower index.
struct Ahead {
  std::span<const float> v;
  bool operator()(LatentId a, LatentId b) const { return v[a] > v[b] || (v[a] == v[b] && a < b); }
};

}  // namespace

std::vector<LatentId> topk_order(std::span<const float> values, std::size_t k) {
  const std::size_t n = values.size();
  if (k == 0 || k > n) throw InvalidArgument("topk: need 1 <= k <= n (k=" + std::to_string(k) +
                                             ", n=" + std::to_string(n) + ")");
  const Ahead ahead{values};
  std::vector<LatentId> out;
  if (k * 8 < n) {
    // Heap whose front is the weakest of the current k.
    out.reserve(k);
    for (LatentId i = 0; i < k; ++i) out.push_back(i);
    std::make_heap(out.begin(), out.end(), ahead);
    for (LatentId i = static_cast<LatentId>(k); i < n; ++i) {
      if (ahead(i, out.front())) {
        std::pop_heap(out.begin(), out.end(), ahead);
        out.back() = i;
        std::push_heap(out.begin(), out.end(), ahead);
      }
    }
  } else {
    out.resize(n);
    std::iota(out.begin(), out.end(), LatentId{0});
    if (k < n) std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k - 1), out.end(), ahead);
    out.resize(k);
  }
  std::sort(out.begin(), out.end(), ahead);
  return out;
}

SparseVec topk_select(std::span<const float> values, std::size_t k, bool relu_after) {
  std::vector<LatentId> idx = topk_order(values, k);
  std::sort(idx.begin(), idx.end());
  SparseVec z;
  z.dim = values.size();
  z.entries.reserve(k);
  for (LatentId i : idx) {
    float v = values[i];
    if (relu_after && v < 0.0f) v = 0.0f;
    z.entries.push_back({i, v});
  }
  return z;
}

std::vector<float> dense_sparse_matmul(const DenseMatrix& W, const SparseVec& z) {
  if (z.dim != W.cols)
    throw InvalidArgument("dense_sparse_matmul: z.dim " + std::to_string(z.dim) + " != W.cols " +
                          std::to_string(W.cols));
  std::vector<float> out(W.rows, 0.0f);
  for (const auto& e : z.entries) {
    if (e.index >= W.cols) throw InvalidArgument("dense_sparse_matmul: index out of range");
    for (std::size_t r = 0; r < W.rows; ++r) out[r] += e.value * W(r, e.index);
  }
  return out;
}

void dense_sparse_matmul_rows(const DenseMatrix& Wt, const SparseVec& z, std::span<float> out) {
  if (z.dim != Wt.rows || out.size() != Wt.cols)
    throw InvalidArgument("dense_sparse_matmul_rows: dimension mismatch");
  const auto& kt = simd::kernels();
  for (const auto& e : z.entries) {
    if (e.index >= Wt.rows) throw InvalidArgument("dense_sparse_matmul_rows: index out of range");
    kt.axpy(e.value, Wt.row(e.index).data(), out.data(), Wt.cols);
  }
}

std::vector<std::vector<float>> matmul_at_sparse_indices(const DenseMatrix& X, const DenseMatrix& W,
                                                         const std::vector<std::vector<LatentId>>& index_sets) {
  if (X.cols != W.cols) throw InvalidArgument("matmul_at_sparse_indices: inner dims differ");
  if (index_sets.size() != X.rows) throw InvalidArgument("matmul_at_sparse_indices: one index set per row");
  const auto& kt = simd::kernels();
  std::vector<std::vector<float>> out(X.rows);
  for (std::size_t b = 0; b < X.rows; ++b) {
    out[b].reserve(index_sets[b].size());
    for (LatentId i : index_sets[b]) {
      if (i >= W.rows)
        throw InvalidArgument("matmul_at_sparse_indices: index " + std::to_string(i) + " >= " +
                              std::to_string(W.rows));
      out[b].push_back(kt.dot(X.row(b).data(), W.row(i).data(), X.cols));
    }
  }
  return out;
}

std::vector<float> pre_bias_gradient(std::span<const SparseVec> grad_pre, const DenseMatrix& W_enc) {
  std::vector<double> summed(W_enc.rows, 0.0);
  for (const auto& g : grad_pre) {
    if (g.dim != W_enc.rows) throw InvalidArgument("pre_bias_gradient: grad dim != W_enc rows");
    for (const auto& e : g.entries) summed[e.index] += e.value;
  }
  std::vector<float> out(W_enc.cols, 0.0f);
  const auto& kt = simd::kernels();
  for (std::size_t i = 0; i < summed.size(); ++i)
    if (summed[i] != 0.0) kt.axpy(static_cast<float>(summed[i]), W_enc.row(i).data(), out.data(), W_enc.cols);
  return out;
}

void matmul_nt(const DenseMatrix& A, const DenseMatrix& W, DenseMatrix& C) {
  if (A.cols != W.cols) throw InvalidArgument("matmul_nt: inner dims differ");
  if (C.rows != A.rows || C.cols != W.rows) C = DenseMatrix(A.rows, W.rows);
  const auto& kt = simd::kernels();
  const std::size_t d = A.cols;
  const std::size_t n = W.rows;
  // Block over latents so a slab of W stays in cache across rows of A.
  constexpr std::size_t kBlock = 256;
  for (std::size_t i0 = 0; i0 < n; i0 += kBlock) {
    const std::size_t i1 = std::min(n, i0 + kBlock);
    for (std::size_t b = 0; b < A.rows; ++b) {
      const float* x = A.row(b).data();
      float* c = C.row(b).data();
      std::size_t i = i0;
      for (; i + 4 <= i1; i += 4)
        kt.dot4(x, W.row(i).data(), W.row(i + 1).data(), W.row(i + 2).data(), W.row(i + 3).data(), d, c + i);
      for (; i < i1; ++i) c[i] = kt.dot(x, W.row(i).data(), d);
    }
  }
}

SparseVec sharded_topk(const std::vector<std::vector<float>>& shards, std::size_t k, double capacity_factor) {
  if (shards.empty()) throw InvalidArgument("sharded_topk: no shards");
  if (k == 0) throw InvalidArgument("sharded_topk: k must be >= 1");
  if (!(capacity_factor >= 1.0)) throw InvalidArgument("sharded_topk: capacity_factor must be >= 1");
  const std::size_t S = shards.size();
  const auto per_shard = static_cast<std::size_t>(std::ceil(capacity_factor * static_cast<double>(k) / S));

  std::vector<LatentId> cand_index;
  std::vector<float> cand_value;
  std::size_t offset = 0;
  for (const auto& shard : shards) {
    const std::size_t take = std::min({per_shard, k, shard.size()});
    if (take > 0) {
      for (LatentId local : topk_order(shard, take)) {
        cand_index.push_back(static_cast<LatentId>(offset + local));
        cand_value.push_back(shard[local]);
      }
    }
    offset += shard.size();
  }
  if (cand_index.size() < k)
    throw InvalidArgument("sharded_topk: candidate pool (" + std::to_string(cand_index.size()) +
                          ") smaller than k; raise capacity_factor");

  std::vector<LatentId> order = topk_order(cand_value, k);
  SparseVec z;
  z.dim = offset;
  for (LatentId c : order) z.entries.push_back({cand_index[c], cand_value[c]});
  std::sort(z.entries.begin(), z.entries.end(), [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  return z;
}

KernelOp parse_kernel_op(std::string_view name) {
  if (name == "decoder-forward") return KernelOp::decoder_forward;
  if (name == "decoder-grad") return KernelOp::decoder_grad;
  if (name == "latent-grad") return KernelOp::latent_grad;
  if (name == "encoder-grad") return KernelOp::encoder_grad;
  if (name == "pre-bias-grad") return KernelOp::pre_bias_grad;
  if (name == "full-step") return KernelOp::full_step;
  throw InvalidArgument("unknown kernel op: " + std::string(name));
}

std::string_view kernel_op_name(KernelOp op) {
  switch (op) {
    case KernelOp::decoder_forward: return "decoder-forward";
    case KernelOp::decoder_grad: return "decoder-grad";
    case KernelOp::latent_grad: return "latent-grad";
    case KernelOp::encoder_grad: return "encoder-grad";
    case KernelOp::pre_bias_grad: return "pre-bias-grad";
    case KernelOp::full_step: return "full-step";
  }
  return "?";
}

FlopReport count_flops(const FlopQuery& q) {
  if (q.batch == 0 || q.d == 0 || q.n == 0 || q.k == 0 || q.k > q.n)
    throw InvalidArgument("count_flops: need batch, d, n >= 1 and 1 <= k <= n");
  const double B = static_cast<double>(q.batch);
  const double d = static_cast<double>(q.d);
  const double n = static_cast<double>(q.n);
  const double k = static_cast<double>(q.k);
  const double dense_mm = 2.0 * B * n * d;
  const double sparse_mm = 2.0 * B * k * d;
  // Pre-bias: sum B sparse rows (B*k adds) then one n x d matvec.
  const double sparse_pre_bias = B * k + 2.0 * n * d;

  FlopReport r;
  switch (q.op) {
    case KernelOp::decoder_forward:
    case KernelOp::decoder_grad:
    case KernelOp::latent_grad:
    case KernelOp::encoder_grad:
      r.dense_flops = dense_mm;
      r.sparse_flops = sparse_mm;
      break;
    case KernelOp::pre_bias_grad:
      r.dense_flops = dense_mm;
      r.sparse_flops = sparse_pre_bias;
      break;
    case KernelOp::full_step:
      // Encoder forward stays dense in both.
      r.dense_flops = dense_mm + 5.0 * dense_mm;
      r.sparse_flops = dense_mm + 4.0 * sparse_mm + sparse_pre_bias;
      break;
  }
  r.ratio = r.dense_flops / r.sparse_flops;
  return r;
}

}  // namespace sae
