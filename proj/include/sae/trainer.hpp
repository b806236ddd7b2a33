#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sae/autoencoder.hpp"
#include "sae/data.hpp"
#include "sae/optimizer.hpp"

namespace sae {

enum class StopMode { budget, converged };

std::string_view stop_mode_name(StopMode m);
StopMode parse_stop_mode(std::string_view s);

struct LrRule {
  double lr_ref = 0.0;
  double n_ref = 0.0;
};

// lr_ref * sqrt(n_ref / n).
double lr_for_n(const LrRule& rule, std::size_t n);

struct TrainConfig {
  std::size_t batch_size = 4096;
  std::uint64_t token_budget = 4096ull * 1000;
  double lr = 1e-3;
  std::optional<LrRule> lr_rule;  // when set, overrides lr
  StopMode stop_mode = StopMode::budget;
  double convergence_tol = 0.002;
  std::size_t convergence_window = 5;
  double clip_norm = 1.0;  // <= 0 disables
  std::size_t eval_every = 100;  // steps
  std::size_t val_max_rows = 8192;
  std::uint64_t seed = 0;
  std::size_t resample_events = 4;  // ReLU baseline only
  double ema_coeff = 0.999;
  float adam_eps = 6.25e-10f;
  // Linear decay to zero over this final fraction of steps; 0 keeps lr constant.
  double lr_decay_fraction = 0.0;
  std::size_t init_sample_rows = 4096;  // rows used for the geometric median and loss baseline
  bool verbose = false;
};

struct TrainRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double train_mse = 0.0;     // normalized, last batch
  double val_nmse = 0.0;      // min(raw, ema)
  double val_nmse_raw = 0.0;
  double val_nmse_ema = 0.0;
  double dead_frac = 0.0;
  double l0 = 0.0;            // mean active latents, last batch
  double aux_loss = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::uint64_t skipped_steps = 0;
  std::uint64_t resampled_latents = 0;
};

// Fixed column order:
// step,tokens_seen,train_mse,val_nmse,val_nmse_raw,val_nmse_ema,dead_frac,l0,aux_loss,lr
void write_trainlog_csv(std::ostream& os, const TrainLog& log);
void write_trainlog_jsonl(std::ostream& os, const TrainLog& log);

struct TrainResult {
  AeConfig config;  // resolved
  AutoencoderParams params;
  AutoencoderParams ema;
  AdamState adam;
  EmaState ema_state;
  DeadTracker dead;
  TrainLog log;
  double loss_baseline = 0.0;
  std::uint64_t tokens_seen = 0;
  bool converged = false;
};

// Called after every logged evaluation.
using TrainObserver = std::function<void(const TrainRecord&)>;

TrainResult train(const AeConfig& ae_cfg, const TrainConfig& tcfg, const ActivationStore& data,
                  const TrainObserver& observer = {});

// Loss, gradients and activations for one normalized batch. Exposed for
// gradient checks.
struct StepStats {
  double loss = 0.0;      // main (normalized) loss
  double aux_loss = 0.0;
  double l1 = 0.0;        // mean L1 norm of the codes (ReLU)
  double total = 0.0;
  double l0 = 0.0;
  std::vector<SparseVec> latents;
};

StepStats compute_gradients(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X, double baseline,
                            std::span<const std::uint8_t> dead, AeGrads& grads);

struct BatchEval {
  double mse = 0.0;
  double nmse = 0.0;
  double l0 = 0.0;
};

// Reconstruction error of normalized rows X under the given activation.
BatchEval evaluate(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X);
// Same with an arbitrary activation callback.
BatchEval evaluate_with(const AutoencoderParams& p, const DenseMatrix& X,
                        const std::function<SparseVec(std::span<const float>)>& act);

// Resets each flagged latent to the normalized residual direction of a
// high-error row of sample (highest error first, cycling), with the encoder row
// set to 0.2 times that direction and b_enc zeroed. Adam moments of the touched
// slices are zeroed when adam is given. Returns the number of latents reset.
std::size_t resample_dead(AutoencoderParams& p, const AeConfig& cfg, std::span<const std::uint8_t> dead,
                          const DenseMatrix& sample, AdamState* adam);

// True when the best validation loss over the trailing window improved on the
// best before it by less than eps_rel relative.
bool detect_convergence(std::span<const double> val_losses, double eps_rel, std::size_t window);

// A copy of the store with every row normalized.
DenseMatrix normalized_copy(const DenseMatrix& raw);

}  // namespace sae
