#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sae/autoencoder.hpp"
#include "sae/data.hpp"
#include "sae/subject.hpp"

namespace sae {

// ---- probes ----

struct LogisticFit {
  double w = 0.0;
  double b = 0.0;
  double ce = 0.0;  // mean cross entropy in nats
  int iters = 0;
};

struct ProbeOptions {
  int max_iter = 10;
  double w_cap = 50.0;
  double damping = 1e-6;
};

// Damped Newton-Raphson on (w, b) for P(y=1) = sigmoid(w z + b), started at the
// best constant predictor. Each accepted step lowers the loss.
LogisticFit fit_logistic_1d(std::span<const float> z, std::span<const std::uint8_t> y, const ProbeOptions& opt = {});

struct ProbeResult {
  std::string task;
  std::size_t best_latent = 0;
  double best_ce = 0.0;
  double w = 0.0;
  double b = 0.0;
  double constant_ce = 0.0;
  std::vector<double> per_latent_ce;  // filled when requested
};

// pre is rows x n (one column per latent). Throws InvalidArgument for a
// single-class task.
ProbeResult probe_metric(const DenseMatrix& pre, const ProbeTask& task, bool keep_per_latent = false,
                         const ProbeOptions& opt = {});

// Encoder pre-activations (including b_enc) of normalized rows.
DenseMatrix encoder_preact_matrix(const AutoencoderParams& p, const DenseMatrix& X);

// ---- latent tables ----

// Latent codes of every position of every sequence (sequence-major).
struct LatentTable {
  std::size_t seq_len = 0;
  std::vector<SparseVec> codes;

  float value(std::size_t row, LatentId latent) const;
};

LatentTable encode_sequences(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                             const SequenceStore& seqs);

// ---- N2G ----

inline constexpr std::uint32_t kWildcard = 0xFFFFFFFFu;

struct N2GPattern {
  std::vector<std::uint32_t> tokens;  // oldest first; the last is the activating token; kWildcard matches anything
  bool anchored = false;              // must start at sequence position 0
  double value = 0.0;                 // activation it predicts
};

struct N2GNode {
  std::map<std::uint32_t, std::size_t> children;  // keyed backward from the activating token
  bool terminal = false;
  bool terminal_anchored = false;
  double value = 0.0;  // mean activation of the patterns ending here
  double value_anchored = 0.0;
  std::size_t count = 0;
  std::size_t count_anchored = 0;
};

struct N2GExplanation {
  LatentId latent = 0;
  std::vector<N2GPattern> patterns;
  std::vector<N2GNode> nodes;  // nodes[0] is the root
  double scale = 1.0;
  bool empty = true;  // latent never fired in the build store

  void add(const N2GPattern& p);
  // Max value over matching patterns ending at position pos, 0 if none.
  double predict(std::span<const std::uint32_t> seq, std::size_t pos) const;
};

// Activation of one latent at the final position of a token list.
using LatentOracle = std::function<float(std::span<const std::uint32_t> tokens)>;

LatentOracle make_latent_oracle(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                LatentId latent);

struct N2GBuildOptions {
  std::size_t max_contexts = 16;
  std::uint32_t pad_token = 0;
  std::uint64_t seed = 0;
};

// Builds an explanation from up to max_contexts activating positions of the
// table (which must encode store).
N2GExplanation n2g_build(LatentId latent, const SequenceStore& store, const LatentTable& table,
                         const LatentOracle& oracle, const N2GBuildOptions& opt = {});

struct N2GScores {
  std::optional<double> recall;
  std::optional<double> precision;
  std::optional<double> f1;
  std::size_t positives = 0;
  std::size_t predicted = 0;
};

N2GScores n2g_scores(const N2GExplanation& ex, const SequenceStore& heldout, const LatentTable& table);

struct ScaleFit {
  double scale = 0.0;
  bool degenerate = false;  // E[s^2] == 0
};

// argmin_c E[(a - c s)^2] = E[sa] / E[s^2].
ScaleFit least_squares_scale(std::span<const double> s, std::span<const double> a);
ScaleFit n2g_simulate_scale(const N2GExplanation& ex, const SequenceStore& store, const LatentTable& table);

// Simulated latents for one position given the sequence and the true code.
using LatentSimulator =
    std::function<SparseVec(std::span<const std::uint32_t> seq, std::size_t pos, const SparseVec& true_code)>;

struct ExplanationCe {
  double ce_clean = 0.0;
  double ce_reconstruct = 0.0;
  double ce_zero = 0.0;
  double ce_explained = 0.0;
};

ExplanationCe explanation_reconstruction(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                         const LatentSimulator& sim, const SequenceStore& seqs,
                                         std::size_t max_seqs = 0);

// Simulator from N2G explanations: latent i takes scale_i * predict_i (missing
// explanations simulate 0).
LatentSimulator n2g_simulator(const std::vector<N2GExplanation>& explanations, std::size_t n);

// ---- ablation sparsity ----

struct AblationOptions {
  std::size_t T = 16;
  std::size_t positions = 4;
  std::size_t max_sequences = 8;
  std::size_t max_per_position = 0;  // 0 = all active latents / all channels
  std::size_t random_directions = 8;
  std::uint64_t seed = 0;
};

struct AblationSparsityResult {
  double mean = 0.0;
  std::vector<double> values;
  std::size_t T = 0;
  std::size_t V = 0;
  std::size_t skipped_positions = 0;
  std::size_t degenerate = 0;
};

// (L1/L2)^2 / (V*T) of the per-token median-centered logit differences at
// positions p..p+T-1. Empty when the difference vector is all zero.
std::optional<double> effect_sparsity(const DenseMatrix& base_logits, const DenseMatrix& ablated_logits,
                                      std::size_t p, std::size_t T);

// Probe positions: `positions` evenly spaced starts in [0, seq_len - T].
std::vector<std::size_t> probe_positions(std::size_t seq_len, std::size_t T, std::size_t positions);

AblationSparsityResult ablation_sparsity(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                         const SequenceStore& seqs, const AblationOptions& opt = {});
AblationSparsityResult ablation_sparsity_channels(const SubjectModel& m, const SequenceStore& seqs,
                                                  const AblationOptions& opt = {});
AblationSparsityResult ablation_sparsity_random(const SubjectModel& m, const SequenceStore& seqs,
                                                const AblationOptions& opt = {});

// ---- refinement ----

// Projected gradient descent on the nonzero entries of z (kept >= 0) to
// minimize ||x - decode(z)||^2 with the sparsity mask frozen.
SparseVec refine_code(const AutoencoderParams& p, std::span<const float> x, const SparseVec& z, std::size_t iters = 200);

struct ShrinkageReport {
  double mean_relative_change = 0.0;  // sum(z' - z) / sum(z) over active entries
  double mse_before = 0.0;
  double mse_after = 0.0;
  std::optional<double> delta_ce_before;
  std::optional<double> delta_ce_after;
  std::size_t rows = 0;
};

ShrinkageReport refine_activations(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                   std::size_t iters = 200);

// ---- test-time sweeps ----

struct SweepPoint {
  std::string mode;  // "topk" or "jumprelu"
  double param = 0.0;
  double l0 = 0.0;
  double nmse = 0.0;
};

std::vector<SweepPoint> test_time_sweep(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                        std::span<const std::size_t> ks, std::span<const float> thetas);

// ---- density ----

struct DensityStats {
  std::vector<double> density;     // fraction of rows where the latent is nonzero
  std::vector<double> importance;  // E[z^2]
  std::vector<double> log10_bins;  // histogram bin edges
  std::vector<std::size_t> histogram;
  std::size_t never_fired = 0;
  double l0 = 0.0;
  double dense_solution_score = 0.0;  // mean density of the d densest latents / L0
};

DensityStats density_stats(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X);

// Normalized MSE of each context position (rows are sequence-major with
// seq_len positions); each position uses its own slice's mean predictor.
std::vector<double> mse_by_position(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                    std::size_t seq_len);

}  // namespace sae
