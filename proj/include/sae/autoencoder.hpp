#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "sae/tensor.hpp"

namespace sae {

enum class Activation { relu, topk, multi_topk };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view s);

struct MultiTopkTerm {
  std::size_t k = 0;
  float weight = 1.0f;
};

struct AeConfig {
  Activation activation = Activation::topk;
  std::size_t n = 0;  // latent count
  std::size_t k = 32;
  // Empty means the default [(k, 1), (4k, 1/8)].
  std::vector<MultiTopkTerm> multi_topk_terms;
  float l1_coeff = 0.0f;
  float aux_coeff = 1.0f / 32.0f;
  std::size_t k_aux = 0;  // 0 means "power of two nearest d/2"
  std::uint64_t dead_threshold_tokens = 10'000'000;
  bool relu_after_topk = true;
  std::optional<bool> use_b_enc;  // unset: on for ReLU, off otherwise
  bool encoder_magnitude_init = false;
  bool tied_init = true;
};

// Fills defaults that depend on the input dimension and validates the result.
AeConfig resolve_config(AeConfig cfg, std::size_t d);

std::vector<MultiTopkTerm> effective_terms(const AeConfig& cfg);

struct AutoencoderParams {
  std::size_t n = 0;
  std::size_t d = 0;
  DenseMatrix W_enc;          // n x d
  std::vector<float> b_enc;   // n, or empty when disabled
  DenseMatrix W_dec;          // latent-major n x d: row i is decoder column i
  std::vector<float> b_pre;   // d

  bool has_b_enc() const { return !b_enc.empty(); }
};

// Per-example centering and scale; normalized = (x - mean) / scale.
struct NormStats {
  float mean = 0.0f;
  float scale = 1.0f;
};

// Subtracts the mean over the d entries and scales to unit L2 norm.
// Throws DegenerateInput when the centered vector is zero.
NormStats normalize_input(std::span<const float> x, std::span<float> out);
std::pair<std::vector<float>, NormStats> normalize_input(std::span<const float> x);
void denormalize(std::span<float> y, const NormStats& s);

// Normalizes every row of X in place.
void normalize_rows(DenseMatrix& X);

// W_enc (x - b_pre) (+ b_enc when present).
std::vector<float> encoder_preacts(const AutoencoderParams& p, std::span<const float> x);
void encoder_preacts(const AutoencoderParams& p, const DenseMatrix& X, DenseMatrix& pre);

// Applies the configured activation to pre-activations. Multi-TopK encodes at
// its first (smallest) k.
SparseVec activate(const AeConfig& cfg, std::span<const float> pre);

SparseVec encode(const AutoencoderParams& p, const AeConfig& cfg, std::span<const float> x);
std::vector<float> decode(const AutoencoderParams& p, const SparseVec& z);
void decode_into(const AutoencoderParams& p, const SparseVec& z, std::span<float> out);

struct ForwardResult {
  SparseVec latents;
  std::vector<float> reconstruction;
  float mse = 0.0f;
};

ForwardResult forward(const AutoencoderParams& p, const AeConfig& cfg, std::span<const float> x);

// Mean squared error over all entries.
double mse(std::span<const float> x, std::span<const float> xhat);
double mse(const DenseMatrix& X, const DenseMatrix& Xhat);
// MSE of always predicting the column means of X (two-pass).
double mean_predictor_mse(const DenseMatrix& X);
// Throws DegenerateInput when baseline <= 0.
double normalized_mse(double batch_mse, double baseline);

struct AuxResult {
  double loss = 0.0;               // 0 when no latent is dead or the value is NaN
  std::vector<SparseVec> latents;  // aux codes per row (empty vectors when inactive)
  DenseMatrix ehat;                // B x d aux reconstruction of the error
  double normalizer = 0.0;         // sum over the batch of ||e||^2
};

// AuxK: reconstruct the main error e = x - x_hat from the top-k_aux dead latents
// (pre-activations without b_enc, then clamped at zero). The squared error is
// normalized by the batch's own error energy. NaN results are replaced by 0.
AuxResult aux_loss(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& pre,
                   const DenseMatrix& err, std::span<const std::uint8_t> dead);

struct MultiTopkLoss {
  double total = 0.0;
  std::vector<double> per_term;  // MSE of each term, ascending k
};

// sum_i weight_i * MSE(x, decode(TopK(pre, k_i))) with one shared encoder pass.
MultiTopkLoss multi_topk_loss(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X);

// Test-time JumpReLU: keeps pre-activations strictly greater than theta.
SparseVec jumprelu_encode(const AutoencoderParams& p, std::span<const float> x, float theta);
SparseVec jumprelu_activate(std::span<const float> pre, float theta);

struct GeometricMedianOptions {
  double tol = 1e-6;
  int max_iter = 100;
  std::uint64_t seed = 0;
};

// Weiszfeld iteration. Restarts with a small jitter when an iterate lands on a sample point.
std::vector<float> geometric_median(const DenseMatrix& points, const GeometricMedianOptions& opt = {});

// sample holds normalized input rows.
AutoencoderParams init_params(const DenseMatrix& sample, const AeConfig& cfg, std::uint64_t seed);

class DeadTracker {
 public:
  DeadTracker() = default;
  DeadTracker(std::size_t n, std::uint64_t threshold) : since_fire_(n, 0), threshold_(threshold) {}

  // Advances every counter by tokens, then resets latents that fired (nonzero value) in the batch.
  void update(std::span<const SparseVec> batch, std::uint64_t tokens);

  bool dead(std::size_t i) const { return since_fire_[i] > threshold_; }
  std::vector<std::uint8_t> mask() const;
  std::size_t dead_count() const;
  std::uint64_t threshold() const { return threshold_; }
  std::size_t size() const { return since_fire_.size(); }
  std::span<const std::uint64_t> counters() const { return since_fire_; }
  void reset(std::size_t i) { since_fire_[i] = 0; }

 private:
  std::vector<std::uint64_t> since_fire_;
  std::uint64_t threshold_ = 0;
};

// Unit sphere direction, shared by init and decoder repair.
void random_unit_vector(std::span<float> out, std::mt19937_64& rng);

}  // namespace sae
