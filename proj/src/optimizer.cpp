#include "sae/optimizer.hpp"

#include <cmath>

#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

AdamState make_adam(float lr, std::span<const std::size_t> slot_sizes, float eps) {
  AdamState s;
  s.lr = lr;
  s.eps = eps;
  for (std::size_t n : slot_sizes) {
    s.m.emplace_back(n, 0.0f);
    s.v.emplace_back(n, 0.0f);
  }
  return s;
}

bool adam_step(AdamState& state, std::span<const std::span<float>> params,
               std::span<const std::span<const float>> grads) {
  require(params.size() == grads.size() && params.size() == state.m.size(), "adam_step: slot count mismatch");
  for (std::size_t s = 0; s < params.size(); ++s) {
    require(params[s].size() == grads[s].size() && params[s].size() == state.m[s].size(),
            "adam_step: slot size mismatch");
    for (float g : grads[s])
      if (!std::isfinite(g)) {
        ++state.skipped_steps;
        return false;
      }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const float lr_t = static_cast<float>(state.lr / (1.0 - std::pow(static_cast<double>(state.beta1), t)));
  const float vc = static_cast<float>(1.0 / (1.0 - std::pow(static_cast<double>(state.beta2), t)));
  const auto& kt = simd::kernels();
  for (std::size_t s = 0; s < params.size(); ++s) {
    if (params[s].empty()) continue;
    kt.adam(params[s].data(), state.m[s].data(), state.v[s].data(), grads[s].data(), params[s].size(), lr_t,
            state.beta1, state.beta2, state.eps, vc);
  }
  return true;
}

AeGrads AeGrads::zeros_like(const AutoencoderParams& p) {
  AeGrads g;
  g.W_enc = DenseMatrix(p.n, p.d);
  g.b_enc.assign(p.b_enc.size(), 0.0f);
  g.W_dec = DenseMatrix(p.n, p.d);
  g.b_pre.assign(p.d, 0.0f);
  return g;
}

void AeGrads::zero() {
  std::fill(W_enc.data.begin(), W_enc.data.end(), 0.0f);
  std::fill(b_enc.begin(), b_enc.end(), 0.0f);
  std::fill(W_dec.data.begin(), W_dec.data.end(), 0.0f);
  std::fill(b_pre.begin(), b_pre.end(), 0.0f);
}

std::vector<std::span<float>> param_slots(AutoencoderParams& p) {
  return {p.W_enc.data, p.b_enc, p.W_dec.data, p.b_pre};
}

std::vector<std::span<const float>> param_slots(const AutoencoderParams& p) {
  return {p.W_enc.data, p.b_enc, p.W_dec.data, p.b_pre};
}

std::vector<std::span<float>> grad_slots(AeGrads& g) { return {g.W_enc.data, g.b_enc, g.W_dec.data, g.b_pre}; }

std::vector<std::size_t> slot_sizes(const AutoencoderParams& p) {
  return {p.W_enc.data.size(), p.b_enc.size(), p.W_dec.data.size(), p.b_pre.size()};
}

void project_decoder_grad(DenseMatrix& grad_dec, const DenseMatrix& W_dec) {
  require(grad_dec.rows == W_dec.rows && grad_dec.cols == W_dec.cols, "project_decoder_grad: shape mismatch");
  const auto& kt = simd::kernels();
  for (std::size_t i = 0; i < W_dec.rows; ++i) {
    float* g = grad_dec.row(i).data();
    const float* w = W_dec.row(i).data();
    const float gw = kt.dot(g, w, W_dec.cols);
    if (gw != 0.0f) kt.axpy(-gw, w, g, W_dec.cols);
  }
}

double clip_grads(std::span<const std::span<float>> grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (float v : g) ss += static_cast<double>(v) * v;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    for (const auto& g : grads) simd::kernels().scale(f, g.data(), g.size());
  }
  return norm;
}

std::size_t renorm_decoder(DenseMatrix& W_dec, std::mt19937_64& rng) {
  std::size_t repaired = 0;
  for (std::size_t i = 0; i < W_dec.rows; ++i) {
    auto row = W_dec.row(i);
    double ss = 0.0;
    for (float v : row) ss += static_cast<double>(v) * v;
    if (!(ss > 0.0) || !std::isfinite(ss)) {
      random_unit_vector(row, rng);
      ++repaired;
      continue;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (float& v : row) v = static_cast<float>(v * inv);
  }
  return repaired;
}

EmaState make_ema(std::span<const std::size_t> slot_sizes, double coeff) {
  EmaState e;
  e.coeff = coeff;
  for (std::size_t n : slot_sizes) e.shadow.emplace_back(n, 0.0);
  return e;
}

void ema_update(EmaState& ema, std::span<const std::span<const float>> params) {
  require(params.size() == ema.shadow.size(), "ema_update: slot count mismatch");
  const double c = ema.coeff;
  for (std::size_t s = 0; s < params.size(); ++s) {
    require(params[s].size() == ema.shadow[s].size(), "ema_update: slot size mismatch");
    auto& sh = ema.shadow[s];
    for (std::size_t i = 0; i < sh.size(); ++i) sh[i] = c * sh[i] + (1.0 - c) * params[s][i];
  }
  ++ema.step;
}

std::vector<std::vector<float>> ema_read(const EmaState& ema) {
  const double corr = ema.step == 0 ? 1.0 : 1.0 / (1.0 - std::pow(ema.coeff, static_cast<double>(ema.step)));
  std::vector<std::vector<float>> out;
  out.reserve(ema.shadow.size());
  for (const auto& sh : ema.shadow) {
    std::vector<float> v(sh.size());
    for (std::size_t i = 0; i < sh.size(); ++i) v[i] = static_cast<float>(sh[i] * corr);
    out.push_back(std::move(v));
  }
  return out;
}

AutoencoderParams ema_params(const EmaState& ema, const AutoencoderParams& like) {
  AutoencoderParams p = like;
  auto vals = ema_read(ema);
  auto slots = param_slots(p);
  require(vals.size() == slots.size(), "ema_params: slot count mismatch");
  for (std::size_t s = 0; s < slots.size(); ++s) std::copy(vals[s].begin(), vals[s].end(), slots[s].begin());
  return p;
}

}  // namespace sae
