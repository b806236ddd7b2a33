#pragma once

// Dense/sparse linear algebra used by the autoencoder: TopK selection, the two
// sparsity-exploiting matmuls, the pre-bias gradient trick, the sharded TopK
// simulation and analytic flop accounting.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sae {

using LatentId = std::uint32_t;

// Row-major float32 matrix.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  DenseMatrix transposed() const;
  bool all_finite() const;
};

struct SparseEntry {
  LatentId index;
  float value;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

// Entries are kept sorted by strictly increasing index.
struct SparseVec {
  std::size_t dim = 0;
  std::vector<SparseEntry> entries;

  std::size_t nnz() const;  // entries with a nonzero value
  std::vector<float> to_dense() const;
  static SparseVec from_dense(std::span<const float> v);  // keeps nonzeros

  friend bool operator==(const SparseVec&, const SparseVec&) = default;
};

// Indices of the k largest values, ordered by descending value; ties go to the
// lower index. Throws InvalidArgument unless 1 <= k <= values.size().
std::vector<LatentId> topk_order(std::span<const float> values, std::size_t k);

// The k largest values as a SparseVec (index-sorted). With relu_after, selected
// values are clamped to >= 0 but the selected set still has size k.
SparseVec topk_select(std::span<const float> values, std::size_t k, bool relu_after = false);

// W (d x n) times z: sum of z_i * column_i(W), accumulated in ascending index order.
std::vector<float> dense_sparse_matmul(const DenseMatrix& W, const SparseVec& z);

// Same product with the weight stored latent-major (Wt is n x d, row i is column i
// of the logical d x n matrix). out += Wt^T z. This is the layout the decoder uses.
void dense_sparse_matmul_rows(const DenseMatrix& Wt, const SparseVec& z, std::span<float> out);

// For row b and each listed index i, dot(X_b, W_i).  X is B x d, W is n x d.
std::vector<std::vector<float>> matmul_at_sparse_indices(const DenseMatrix& X, const DenseMatrix& W,
                                                         const std::vector<std::vector<LatentId>>& index_sets);

// W_enc^T * (sum_b grad_pre_b), summing the sparse rows first.
std::vector<float> pre_bias_gradient(std::span<const SparseVec> grad_pre, const DenseMatrix& W_enc);

// C (B x n) = A (B x d) * W^T, W is n x d. Uses the dispatched dot4 kernel.
void matmul_nt(const DenseMatrix& A, const DenseMatrix& W, DenseMatrix& C);

// Logical tensor-sharded TopK. Each shard keeps its local top
// min(ceil(capacity_factor * k / S), k, shard size) candidates, then a global
// TopK over the candidates is taken. Indices refer to the concatenation.
SparseVec sharded_topk(const std::vector<std::vector<float>>& shards, std::size_t k, double capacity_factor);

enum class KernelOp { decoder_forward, decoder_grad, latent_grad, encoder_grad, pre_bias_grad, full_step };

KernelOp parse_kernel_op(std::string_view name);
std::string_view kernel_op_name(KernelOp op);

struct FlopQuery {
  KernelOp op = KernelOp::full_step;
  std::size_t batch = 1;
  std::size_t d = 0;
  std::size_t n = 0;
  std::size_t k = 0;
};

struct FlopReport {
  double dense_flops = 0;
  double sparse_flops = 0;
  double ratio = 0;
};

// Analytic multiply-add counts (2 flops per MAC) of the dense and sparse
// implementations of one training-step component.
FlopReport count_flops(const FlopQuery& q);

}  // namespace sae
