#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "sae/autoencoder.hpp"

namespace sae {

struct AdamState {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 6.25e-10f;
  std::uint64_t step = 0;
  std::uint64_t skipped_steps = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

AdamState make_adam(float lr, std::span<const std::size_t> slot_sizes, float eps = 6.25e-10f);

// One bias-corrected Adam step over parallel params/grads slots. A step whose
// gradients contain NaN or Inf is rejected: nothing changes except skipped_steps.
// Returns whether the step was applied.
bool adam_step(AdamState& state, std::span<const std::span<float>> params,
               std::span<const std::span<const float>> grads);

// Gradients in the same layout as AutoencoderParams (decoder latent-major).
struct AeGrads {
  DenseMatrix W_enc;
  std::vector<float> b_enc;
  DenseMatrix W_dec;
  std::vector<float> b_pre;

  static AeGrads zeros_like(const AutoencoderParams& p);
  void zero();
};

// Slot order used everywhere (optimizer, EMA, checkpoint): W_enc, b_enc, W_dec, b_pre.
std::vector<std::span<float>> param_slots(AutoencoderParams& p);
std::vector<std::span<const float>> param_slots(const AutoencoderParams& p);
std::vector<std::span<float>> grad_slots(AeGrads& g);
std::vector<std::size_t> slot_sizes(const AutoencoderParams& p);

// Removes from each decoder-direction gradient its component along that direction.
void project_decoder_grad(DenseMatrix& grad_dec, const DenseMatrix& W_dec);

// Uniformly rescales so the global L2 norm is at most max_norm (max_norm <= 0
// disables). Returns the norm before clipping.
double clip_grads(std::span<const std::span<float>> grads, double max_norm);

// Unit-normalizes every decoder direction. Zero rows are redrawn from the unit
// sphere; returns how many were redrawn.
std::size_t renorm_decoder(DenseMatrix& W_dec, std::mt19937_64& rng);

struct EmaState {
  double coeff = 0.999;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> shadow;
};

EmaState make_ema(std::span<const std::size_t> slot_sizes, double coeff = 0.999);
void ema_update(EmaState& ema, std::span<const std::span<const float>> params);
// Bias-corrected shadow: shadow / (1 - coeff^step).
std::vector<std::vector<float>> ema_read(const EmaState& ema);
AutoencoderParams ema_params(const EmaState& ema, const AutoencoderParams& like);

}  // namespace sae
