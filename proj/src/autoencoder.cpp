#include "sae/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::topk: return "topk";
    case Activation::multi_topk: return "multi_topk";
  }
  return "?";
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "topk") return Activation::topk;
  if (s == "multi_topk" || s == "multi-topk") return Activation::multi_topk;
  throw InvalidArgument("unknown activation: " + std::string(s));
}

AeConfig resolve_config(AeConfig cfg, std::size_t d) {
  require(d >= 2, "autoencoder: d must be >= 2");
  require(cfg.n >= 1, "autoencoder: n must be >= 1");
  if (!cfg.use_b_enc) cfg.use_b_enc = (cfg.activation == Activation::relu);
  if (cfg.k_aux == 0) {
    const double half = std::max(1.0, static_cast<double>(d) / 2.0);
    cfg.k_aux = std::size_t{1} << static_cast<int>(std::lround(std::log2(half)));
  }
  cfg.k_aux = std::min(cfg.k_aux, cfg.n);
  require(cfg.l1_coeff >= 0.0f, "autoencoder: l1_coeff must be >= 0");
  require(cfg.aux_coeff >= 0.0f, "autoencoder: aux_coeff must be >= 0");
  if (cfg.activation != Activation::relu) {
    require(cfg.k >= 1 && cfg.k <= cfg.n, "autoencoder: need 1 <= k <= n");
  }
  if (cfg.activation == Activation::multi_topk) {
    if (cfg.multi_topk_terms.empty()) cfg.multi_topk_terms = {{cfg.k, 1.0f}, {4 * cfg.k, 1.0f / 8.0f}};
    for (std::size_t i = 0; i < cfg.multi_topk_terms.size(); ++i) {
      const auto& t = cfg.multi_topk_terms[i];
      if (t.k == 0 || t.k > cfg.n) throw InvalidArgument("multi_topk: term k out of range");
      if (i > 0 && t.k <= cfg.multi_topk_terms[i - 1].k)
        throw InvalidArgument("multi_topk: terms must have strictly ascending k");
    }
    cfg.k = cfg.multi_topk_terms.front().k;
  }
  return cfg;
}

std::vector<MultiTopkTerm> effective_terms(const AeConfig& cfg) {
  if (cfg.activation == Activation::multi_topk) {
    if (cfg.multi_topk_terms.empty()) return {{cfg.k, 1.0f}, {4 * cfg.k, 1.0f / 8.0f}};
    return cfg.multi_topk_terms;
  }
  return {{cfg.k, 1.0f}};
}

NormStats normalize_input(std::span<const float> x, std::span<float> out) {
  require(out.size() == x.size(), "normalize_input: output size mismatch");
  require(!x.empty(), "normalize_input: empty input");
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (float v : x) ss += (v - mean) * (v - mean);
  if (!(ss > 0.0) || !std::isfinite(ss)) throw DegenerateInput("normalize_input: zero vector after centering");
  const double scale = std::sqrt(ss);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>((x[i] - mean) / scale);
  return {static_cast<float>(mean), static_cast<float>(scale)};
}

std::pair<std::vector<float>, NormStats> normalize_input(std::span<const float> x) {
  std::vector<float> out(x.size());
  NormStats s = normalize_input(x, out);
  return {std::move(out), s};
}

void denormalize(std::span<float> y, const NormStats& s) {
  for (float& v : y) v = v * s.scale + s.mean;
}

void normalize_rows(DenseMatrix& X) {
  std::vector<float> tmp(X.cols);
  for (std::size_t r = 0; r < X.rows; ++r) {
    normalize_input(X.row(r), tmp);
    std::copy(tmp.begin(), tmp.end(), X.row(r).begin());
  }
}

std::vector<float> encoder_preacts(const AutoencoderParams& p, std::span<const float> x) {
  require(x.size() == p.d, "encode: input dim mismatch");
  std::vector<float> xc(p.d);
  for (std::size_t j = 0; j < p.d; ++j) xc[j] = x[j] - p.b_pre[j];
  std::vector<float> pre(p.n);
  const auto& kt = simd::kernels();
  for (std::size_t i = 0; i < p.n; ++i) pre[i] = kt.dot(p.W_enc.row(i).data(), xc.data(), p.d);
  if (p.has_b_enc())
    for (std::size_t i = 0; i < p.n; ++i) pre[i] += p.b_enc[i];
  return pre;
}

void encoder_preacts(const AutoencoderParams& p, const DenseMatrix& X, DenseMatrix& pre) {
  require(X.cols == p.d, "encode: input dim mismatch");
  DenseMatrix Xc = X;
  for (std::size_t b = 0; b < X.rows; ++b) {
    auto r = Xc.row(b);
    for (std::size_t j = 0; j < p.d; ++j) r[j] -= p.b_pre[j];
  }
  matmul_nt(Xc, p.W_enc, pre);
  if (p.has_b_enc()) {
    for (std::size_t b = 0; b < pre.rows; ++b) {
      auto r = pre.row(b);
      for (std::size_t i = 0; i < p.n; ++i) r[i] += p.b_enc[i];
    }
  }
}

SparseVec activate(const AeConfig& cfg, std::span<const float> pre) {
  switch (cfg.activation) {
    case Activation::relu: {
      SparseVec z;
      z.dim = pre.size();
      for (std::size_t i = 0; i < pre.size(); ++i)
        if (pre[i] > 0.0f) z.entries.push_back({static_cast<LatentId>(i), pre[i]});
      return z;
    }
    case Activation::topk:
    case Activation::multi_topk:
      return topk_select(pre, cfg.k, cfg.relu_after_topk);
  }
  return {};
}

SparseVec encode(const AutoencoderParams& p, const AeConfig& cfg, std::span<const float> x) {
  return activate(cfg, encoder_preacts(p, x));
}

void decode_into(const AutoencoderParams& p, const SparseVec& z, std::span<float> out) {
  if (z.dim != p.n) throw InvalidArgument("decode: latent dim mismatch");
  require(out.size() == p.d, "decode: output dim mismatch");
  std::copy(p.b_pre.begin(), p.b_pre.end(), out.begin());
  dense_sparse_matmul_rows(p.W_dec, z, out);
}

std::vector<float> decode(const AutoencoderParams& p, const SparseVec& z) {
  std::vector<float> out(p.d);
  decode_into(p, z, out);
  return out;
}

double mse(std::span<const float> x, std::span<const float> xhat) {
  require(x.size() == xhat.size() && !x.empty(), "mse: size mismatch");
  return simd::kernels().sqdist(x.data(), xhat.data(), x.size()) / static_cast<double>(x.size());
}

double mse(const DenseMatrix& X, const DenseMatrix& Xhat) {
  require(X.rows == Xhat.rows && X.cols == Xhat.cols && !X.data.empty(), "mse: shape mismatch");
  return simd::kernels().sqdist(X.data.data(), Xhat.data.data(), X.data.size()) /
         static_cast<double>(X.data.size());
}

double mean_predictor_mse(const DenseMatrix& X) {
  require(X.rows >= 1, "mean_predictor_mse: empty matrix");
  std::vector<double> mean(X.cols, 0.0);
  for (std::size_t r = 0; r < X.rows; ++r)
    for (std::size_t c = 0; c < X.cols; ++c) mean[c] += X(r, c);
  for (double& m : mean) m /= static_cast<double>(X.rows);
  double acc = 0.0;
  for (std::size_t r = 0; r < X.rows; ++r)
    for (std::size_t c = 0; c < X.cols; ++c) {
      const double t = X(r, c) - mean[c];
      acc += t * t;
    }
  return acc / static_cast<double>(X.rows * X.cols);
}

double normalized_mse(double batch_mse, double baseline) {
  if (!(baseline > 0.0)) throw DegenerateInput("normalized_mse: baseline must be > 0");
  return batch_mse / baseline;
}

ForwardResult forward(const AutoencoderParams& p, const AeConfig& cfg, std::span<const float> x) {
  ForwardResult r;
  r.latents = encode(p, cfg, x);
  r.reconstruction = decode(p, r.latents);
  r.mse = static_cast<float>(mse(x, r.reconstruction));
  return r;
}

AuxResult aux_loss(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& pre,
                   const DenseMatrix& err, std::span<const std::uint8_t> dead) {
  require(dead.size() == p.n, "aux_loss: dead mask size mismatch");
  require(pre.rows == err.rows && pre.cols == p.n && err.cols == p.d, "aux_loss: shape mismatch");
  AuxResult r;
  r.ehat = DenseMatrix(err.rows, p.d);
  r.latents.assign(err.rows, SparseVec{p.n, {}});

  std::vector<LatentId> dead_ids;
  for (std::size_t i = 0; i < p.n; ++i)
    if (dead[i]) dead_ids.push_back(static_cast<LatentId>(i));
  if (dead_ids.empty() || cfg.k_aux == 0) return r;
  const std::size_t kk = std::min(cfg.k_aux, dead_ids.size());

  std::vector<float> cand(dead_ids.size());
  double num = 0.0;
  double den = 0.0;
  const auto& kt = simd::kernels();
  const std::vector<float> zero(p.d, 0.0f);
  for (std::size_t b = 0; b < err.rows; ++b) {
    const auto row = pre.row(b);
    for (std::size_t j = 0; j < dead_ids.size(); ++j) {
      const LatentId i = dead_ids[j];
      cand[j] = row[i] - (p.has_b_enc() ? p.b_enc[i] : 0.0f);
    }
    SparseVec& z = r.latents[b];
    std::vector<LatentId> sel = topk_order(cand, kk);
    std::sort(sel.begin(), sel.end());
    for (LatentId j : sel) z.entries.push_back({dead_ids[j], std::max(cand[j], 0.0f)});
    dense_sparse_matmul_rows(p.W_dec, z, r.ehat.row(b));
    num += kt.sqdist(err.row(b).data(), r.ehat.row(b).data(), p.d);
    den += kt.sqdist(err.row(b).data(), zero.data(), p.d);
  }
  r.normalizer = den;
  const double loss = num / den;
  r.loss = std::isnan(loss) ? 0.0 : loss;
  return r;
}

MultiTopkLoss multi_topk_loss(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X) {
  const auto terms = effective_terms(cfg);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].k == 0 || terms[i].k > p.n) throw InvalidArgument("multi_topk: term k > n");
    if (i > 0 && terms[i].k <= terms[i - 1].k) throw InvalidArgument("multi_topk: terms must ascend in k");
  }
  DenseMatrix pre;
  encoder_preacts(p, X, pre);
  MultiTopkLoss out;
  out.per_term.assign(terms.size(), 0.0);
  const std::size_t kmax = terms.back().k;
  std::vector<float> xhat(p.d);
  const auto& kt = simd::kernels();
  for (std::size_t b = 0; b < X.rows; ++b) {
    const std::vector<LatentId> order = topk_order(pre.row(b), kmax);
    std::copy(p.b_pre.begin(), p.b_pre.end(), xhat.begin());
    std::size_t used = 0;
    // Each term's support is a prefix of the next one's.
    for (std::size_t t = 0; t < terms.size(); ++t) {
      for (; used < terms[t].k; ++used) {
        float v = pre(b, order[used]);
        if (cfg.relu_after_topk && v < 0.0f) v = 0.0f;
        kt.axpy(v, p.W_dec.row(order[used]).data(), xhat.data(), p.d);
      }
      out.per_term[t] += kt.sqdist(X.row(b).data(), xhat.data(), p.d);
    }
  }
  for (std::size_t t = 0; t < terms.size(); ++t) {
    out.per_term[t] /= static_cast<double>(X.rows * p.d);
    out.total += terms[t].weight * out.per_term[t];
  }
  return out;
}

SparseVec jumprelu_activate(std::span<const float> pre, float theta) {
  require(theta >= 0.0f, "jumprelu: theta must be >= 0");
  SparseVec z;
  z.dim = pre.size();
  for (std::size_t i = 0; i < pre.size(); ++i)
    if (pre[i] > theta) z.entries.push_back({static_cast<LatentId>(i), pre[i]});
  return z;
}

SparseVec jumprelu_encode(const AutoencoderParams& p, std::span<const float> x, float theta) {
  return jumprelu_activate(encoder_preacts(p, x), theta);
}

std::vector<float> geometric_median(const DenseMatrix& points, const GeometricMedianOptions& opt) {
  require(points.rows >= 1, "geometric_median: empty sample");
  const std::size_t m = points.rows;
  const std::size_t d = points.cols;
  std::vector<double> y(d, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) y[c] += points(r, c);
  for (double& v : y) v /= static_cast<double>(m);
  if (m == 1) return std::vector<float>(points.data.begin(), points.data.end());

  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> jitter(0.0, 1.0);
  double spread = 0.0;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) spread += std::abs(points(r, c) - y[c]);
  spread = std::max(spread / static_cast<double>(m * d), 1e-12);

  std::vector<double> next(d);
  for (int it = 0; it < opt.max_iter; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    double wsum = 0.0;
    bool coincident = false;
    for (std::size_t r = 0; r < m; ++r) {
      double dist2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = points(r, c) - y[c];
        dist2 += t * t;
      }
      const double dist = std::sqrt(dist2);
      if (dist < 1e-12 * spread) {
        coincident = true;
        break;
      }
      const double w = 1.0 / dist;
      wsum += w;
      for (std::size_t c = 0; c < d; ++c) next[c] += w * points(r, c);
    }
    if (coincident) {
      for (double& v : y) v += 1e-6 * spread * jitter(rng);
      continue;
    }
    double move2 = 0.0;
    double norm2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      next[c] /= wsum;
      move2 += (next[c] - y[c]) * (next[c] - y[c]);
      norm2 += next[c] * next[c];
    }
    y.swap(next);
    if (std::sqrt(move2) <= opt.tol * std::max(1.0, std::sqrt(norm2))) break;
  }
  return std::vector<float>(y.begin(), y.end());
}

void random_unit_vector(std::span<float> out, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  double ss = 0.0;
  do {
    ss = 0.0;
    for (float& v : out) {
      v = g(rng);
      ss += static_cast<double>(v) * v;
    }
  } while (ss == 0.0);
  const float inv = static_cast<float>(1.0 / std::sqrt(ss));
  for (float& v : out) v *= inv;
}

AutoencoderParams init_params(const DenseMatrix& sample, const AeConfig& cfg_in, std::uint64_t seed) {
  require(sample.rows >= 1, "init_params: empty sample");
  const AeConfig cfg = resolve_config(cfg_in, sample.cols);
  AutoencoderParams p;
  p.n = cfg.n;
  p.d = sample.cols;
  std::mt19937_64 rng(seed);

  p.b_pre = geometric_median(sample, {1e-6, 100, seed});

  p.W_dec = DenseMatrix(p.n, p.d);
  for (std::size_t i = 0; i < p.n; ++i) random_unit_vector(p.W_dec.row(i), rng);

  if (cfg.tied_init) {
    p.W_enc = p.W_dec;
  } else {
    // Independent encoder, uniform in +-1/sqrt(d) like common framework defaults.
    p.W_enc = DenseMatrix(p.n, p.d);
    const float bound = 1.0f / std::sqrt(static_cast<float>(p.d));
    std::uniform_real_distribution<float> u(-bound, bound);
    for (float& v : p.W_enc.data) v = u(rng);
  }
  if (*cfg.use_b_enc) p.b_enc.assign(p.n, 0.0f);

  if (cfg.encoder_magnitude_init && cfg.activation != Activation::relu) {
    // TopK selection is invariant to a positive encoder scale, so the decoded
    // norm is linear in it and one pass gives the matching factor.
    double in_norm = 0.0;
    double out_norm = 0.0;
    std::vector<float> xc(p.d);
    for (std::size_t r = 0; r < sample.rows; ++r) {
      const auto x = sample.row(r);
      for (std::size_t j = 0; j < p.d; ++j) xc[j] = x[j] - p.b_pre[j];
      SparseVec z = encode(p, cfg, x);
      std::vector<float> rec(p.d, 0.0f);
      dense_sparse_matmul_rows(p.W_dec, z, rec);
      double a = 0.0, b = 0.0;
      for (std::size_t j = 0; j < p.d; ++j) {
        a += static_cast<double>(xc[j]) * xc[j];
        b += static_cast<double>(rec[j]) * rec[j];
      }
      in_norm += std::sqrt(a);
      out_norm += std::sqrt(b);
    }
    if (out_norm > 0.0) simd::kernels().scale(static_cast<float>(in_norm / out_norm), p.W_enc.data.data(), p.W_enc.data.size());
  }
  return p;
}

void DeadTracker::update(std::span<const SparseVec> batch, std::uint64_t tokens) {
  for (auto& c : since_fire_) c += tokens;
  for (const auto& z : batch)
    for (const auto& e : z.entries)
      if (e.value != 0.0f && e.index < since_fire_.size()) since_fire_[e.index] = 0;
}

std::vector<std::uint8_t> DeadTracker::mask() const {
  std::vector<std::uint8_t> m(since_fire_.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = dead(i) ? 1 : 0;
  return m;
}

std::size_t DeadTracker::dead_count() const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < since_fire_.size(); ++i) c += dead(i) ? 1 : 0;
  return c;
}

}  // namespace sae
