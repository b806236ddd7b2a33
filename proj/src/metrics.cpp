#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/error.hpp"
#include "sae/eval.hpp"
#include "sae/simd.hpp"
#include "sae/trainer.hpp"

namespace sae {

namespace {

double median_of(std::vector<double>& v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

double finish_mean(AblationSparsityResult& r) {
  r.mean = r.values.empty() ? std::numeric_limits<double>::quiet_NaN()
                            : std::accumulate(r.values.begin(), r.values.end(), 0.0) / static_cast<double>(r.values.size());
  return r.mean;
}

// Shared driver: for each sequence and probe position, `visit` produces
// (base residual edit, list of ablated residual edits) and we score each.
template <typename Visit>
AblationSparsityResult run_ablation(const SubjectModel& m, const SequenceStore& seqs, const AblationOptions& opt,
                                    Visit&& visit) {
  require(m.cfg.variant == SubjectVariant::transformer || opt.T == 1,
          "ablation_sparsity: effects on future tokens need the transformer subject (or T = 1)");
  require(opt.T >= 1, "ablation_sparsity: T must be >= 1");
  AblationSparsityResult res;
  res.T = opt.T;
  res.V = m.cfg.vocab;
  const std::size_t S = std::min(opt.max_sequences == 0 ? seqs.n_seqs() : opt.max_sequences, seqs.n_seqs());
  const auto positions = probe_positions(seqs.seq_len, opt.T, opt.positions);
  if (positions.empty()) res.skipped_positions += S * opt.positions;
  for (std::size_t s = 0; s < S; ++s) {
    const auto tok = seqs.seq(s);
    const DenseMatrix resid = forward_to_splice(m, tok);
    for (std::size_t p : positions) {
      std::vector<float> base_row;
      std::vector<std::vector<float>> ablated_rows;
      visit(s, p, resid.row(p), base_row, ablated_rows);
      DenseMatrix r = resid;
      if (!base_row.empty()) std::copy(base_row.begin(), base_row.end(), r.row(p).begin());
      const DenseMatrix base = forward_from_splice(m, r);
      for (const auto& ab : ablated_rows) {
        std::copy(ab.begin(), ab.end(), r.row(p).begin());
        const DenseMatrix abl = forward_from_splice(m, r);
        if (auto v = effect_sparsity(base, abl, p, opt.T)) res.values.push_back(*v);
        else ++res.degenerate;
      }
    }
  }
  finish_mean(res);
  return res;
}

}  // namespace

std::optional<double> effect_sparsity(const DenseMatrix& base_logits, const DenseMatrix& ablated_logits,
                                      std::size_t p, std::size_t T) {
  require(base_logits.rows == ablated_logits.rows && base_logits.cols == ablated_logits.cols,
          "effect_sparsity: logit shapes differ");
  require(p + T <= base_logits.rows, "effect_sparsity: window runs past the sequence end");
  const std::size_t V = base_logits.cols;
  double l1 = 0.0, l2 = 0.0;
  std::vector<double> diff(V), scratch(V);
  for (std::size_t t = p; t < p + T; ++t) {
    for (std::size_t v = 0; v < V; ++v)
      diff[v] = static_cast<double>(ablated_logits(t, v)) - static_cast<double>(base_logits(t, v));
    scratch = diff;
    const double med = median_of(scratch);
    for (std::size_t v = 0; v < V; ++v) {
      const double c = diff[v] - med;
      l1 += std::abs(c);
      l2 += c * c;
    }
  }
  if (l2 == 0.0) return std::nullopt;
  return l1 * l1 / l2 / static_cast<double>(V * T);
}

std::vector<std::size_t> probe_positions(std::size_t seq_len, std::size_t T, std::size_t positions) {
  std::vector<std::size_t> out;
  if (seq_len < T || positions == 0) return out;
  const std::size_t hi = seq_len - T;
  if (positions == 1) return {hi / 2};
  for (std::size_t j = 0; j < positions; ++j) {
    const std::size_t p = static_cast<std::size_t>(std::llround(static_cast<double>(j) * hi / (positions - 1)));
    if (out.empty() || out.back() != p) out.push_back(p);
  }
  return out;
}

AblationSparsityResult ablation_sparsity(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                         const SequenceStore& seqs, const AblationOptions& opt) {
  require(ae.d == m.cfg.d_model, "ablation_sparsity: autoencoder d != subject d_model");
  std::vector<float> xn(ae.d);
  return run_ablation(m, seqs, opt, [&](std::size_t, std::size_t, std::span<const float> row, std::vector<float>& base,
                                        std::vector<std::vector<float>>& ablated) {
    const NormStats ns = normalize_input(row, xn);
    const SparseVec z = encode(ae, cfg, xn);
    base = decode(ae, z);
    denormalize(base, ns);
    std::size_t count = 0;
    for (std::size_t e = 0; e < z.entries.size(); ++e) {
      if (z.entries[e].value <= 0.0f) continue;
      if (opt.max_per_position && count >= opt.max_per_position) break;
      SparseVec zz = z;
      zz.entries[e].value = 0.0f;
      std::vector<float> a = decode(ae, zz);
      denormalize(a, ns);
      ablated.push_back(std::move(a));
      ++count;
    }
  });
}

AblationSparsityResult ablation_sparsity_channels(const SubjectModel& m, const SequenceStore& seqs,
                                                  const AblationOptions& opt) {
  const std::size_t d = m.cfg.d_model;
  const std::size_t count = opt.max_per_position ? std::min(opt.max_per_position, d) : d;
  return run_ablation(m, seqs, opt, [&](std::size_t, std::size_t, std::span<const float> row, std::vector<float>&,
                                        std::vector<std::vector<float>>& ablated) {
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t c = j * d / count;
      std::vector<float> a(row.begin(), row.end());
      a[c] = 0.0f;
      ablated.push_back(std::move(a));
    }
  });
}

AblationSparsityResult ablation_sparsity_random(const SubjectModel& m, const SequenceStore& seqs,
                                                const AblationOptions& opt) {
  const std::size_t d = m.cfg.d_model;
  std::mt19937_64 rng(opt.seed);
  std::vector<float> u(d);
  return run_ablation(m, seqs, opt, [&](std::size_t, std::size_t, std::span<const float> row, std::vector<float>&,
                                        std::vector<std::vector<float>>& ablated) {
    for (std::size_t j = 0; j < opt.random_directions; ++j) {
      random_unit_vector(u, rng);
      std::vector<float> a(row.begin(), row.end());
      const float proj = simd::kernels().dot(a.data(), u.data(), d);
      simd::kernels().axpy(-proj, u.data(), a.data(), d);
      ablated.push_back(std::move(a));
    }
  });
}

SparseVec refine_code(const AutoencoderParams& p, std::span<const float> x, const SparseVec& z, std::size_t iters) {
  require(x.size() == p.d, "refine: input width != d");
  std::vector<LatentId> idx;
  std::vector<double> val;
  for (const auto& e : z.entries)
    if (e.value != 0.0f) {
      idx.push_back(e.index);
      val.push_back(std::max(0.0f, e.value));
    }
  const std::size_t k = idx.size();
  if (k == 0) return z;
  const auto& kt = simd::kernels();
  std::vector<float> r0(p.d);
  for (std::size_t c = 0; c < p.d; ++c) r0[c] = x[c] - p.b_pre[c];
  std::vector<double> G(k * k), c(k);
  for (std::size_t i = 0; i < k; ++i) {
    c[i] = kt.dot(p.W_dec.row(idx[i]).data(), r0.data(), p.d);
    for (std::size_t j = 0; j <= i; ++j) G[i * k + j] = G[j * k + i] = kt.dot(p.W_dec.row(idx[i]).data(), p.W_dec.row(idx[j]).data(), p.d);
  }
  // Gershgorin bound on the largest eigenvalue of the Gram matrix.
  double L = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::abs(G[i * k + j]);
    L = std::max(L, s);
  }
  if (!(L > 0.0)) return z;
  const double step = 0.1 / L;
  std::vector<double> cur = val, grad(k);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < k; ++i) {
      double g = -c[i];
      for (std::size_t j = 0; j < k; ++j) g += G[i * k + j] * cur[j];
      grad[i] = g;
    }
    for (std::size_t i = 0; i < k; ++i) cur[i] = std::max(0.0, cur[i] - step * grad[i]);
  }
  SparseVec out;
  out.dim = z.dim;
  for (std::size_t i = 0; i < k; ++i) out.entries.push_back({idx[i], static_cast<float>(cur[i])});
  // Keep the original code if float rounding makes the refined one no better.
  const std::vector<float> a = decode(p, z);
  const std::vector<float> b = decode(p, out);
  if (kt.sqdist(x.data(), b.data(), p.d) > kt.sqdist(x.data(), a.data(), p.d)) return z;
  return out;
}

ShrinkageReport refine_activations(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                   std::size_t iters) {
  require(X.cols == p.d && X.rows >= 1, "refine: bad input shape");
  ShrinkageReport rep;
  rep.rows = X.rows;
  double before = 0.0, after = 0.0, sum_z = 0.0, sum_dz = 0.0;
  const auto& kt = simd::kernels();
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto x = X.row(r);
    const SparseVec z = encode(p, cfg, x);
    const SparseVec z2 = refine_code(p, x, z, iters);
    before += kt.sqdist(x.data(), decode(p, z).data(), p.d);
    after += kt.sqdist(x.data(), decode(p, z2).data(), p.d);
    for (const auto& e : z.entries) {
      if (e.value == 0.0f) continue;
      sum_z += e.value;
      for (const auto& f : z2.entries)
        if (f.index == e.index) sum_dz += static_cast<double>(f.value) - e.value;
    }
  }
  const double denom = static_cast<double>(X.rows) * p.d;
  rep.mse_before = before / denom;
  rep.mse_after = after / denom;
  rep.mean_relative_change = sum_z > 0.0 ? sum_dz / sum_z : 0.0;
  return rep;
}

std::vector<SweepPoint> test_time_sweep(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                        std::span<const std::size_t> ks, std::span<const float> thetas) {
  std::vector<SweepPoint> out;
  for (std::size_t k : ks) {
    require(k >= 1 && k <= p.n, "test_time_sweep: k' out of range");
    const BatchEval e =
        evaluate_with(p, X, [&](std::span<const float> pre) { return topk_select(pre, k, cfg.relu_after_topk); });
    out.push_back({"topk", static_cast<double>(k), e.l0, e.nmse});
  }
  for (float th : thetas) {
    const BatchEval e = evaluate_with(p, X, [&](std::span<const float> pre) { return jumprelu_activate(pre, th); });
    out.push_back({"jumprelu", th, e.l0, e.nmse});
  }
  return out;
}

DensityStats density_stats(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X) {
  require(X.cols == p.d && X.rows >= 1, "density_stats: bad input shape");
  DensityStats s;
  s.density.assign(p.n, 0.0);
  s.importance.assign(p.n, 0.0);
  double nnz = 0.0;
  for (std::size_t r = 0; r < X.rows; ++r) {
    const SparseVec z = encode(p, cfg, X.row(r));
    for (const auto& e : z.entries) {
      if (e.value == 0.0f) continue;
      s.density[e.index] += 1.0;
      s.importance[e.index] += static_cast<double>(e.value) * e.value;
      nnz += 1.0;
    }
  }
  const double rows = static_cast<double>(X.rows);
  for (std::size_t i = 0; i < p.n; ++i) {
    s.density[i] /= rows;
    s.importance[i] /= rows;
    if (s.density[i] == 0.0) ++s.never_fired;
  }
  s.l0 = nnz / rows;
  for (double e = -7.0; e <= 0.0 + 1e-9; e += 0.5) s.log10_bins.push_back(e);
  s.histogram.assign(s.log10_bins.size() - 1, 0);
  for (double dens : s.density) {
    if (dens == 0.0) continue;
    const double lg = std::log10(dens);
    std::size_t b = 0;
    while (b + 1 < s.histogram.size() && lg >= s.log10_bins[b + 1]) ++b;
    ++s.histogram[b];
  }
  std::vector<double> sorted = s.density;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t top = std::min(p.d, p.n);
  const double mean_top = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0.0) /
                          static_cast<double>(top);
  s.dense_solution_score = s.l0 > 0.0 ? mean_top / s.l0 : 0.0;
  return s;
}

std::vector<double> mse_by_position(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X,
                                    std::size_t seq_len) {
  require(seq_len >= 1 && X.rows % seq_len == 0, "mse_by_position: rows must be a multiple of seq_len");
  const std::size_t S = X.rows / seq_len;
  require(S >= 2, "mse_by_position: need at least 2 sequences per position");
  std::vector<double> out(seq_len);
  DenseMatrix slice;
  std::vector<std::size_t> rows(S);
  for (std::size_t j = 0; j < seq_len; ++j) {
    for (std::size_t s = 0; s < S; ++s) rows[s] = s * seq_len + j;
    gather_rows(X, rows, slice);
    out[j] = evaluate(p, cfg, slice).nmse;
  }
  return out;
}

}  // namespace sae
