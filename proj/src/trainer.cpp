#include "sae/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numeric>
#include <utility>

#include <json.hpp>

#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

std::string_view stop_mode_name(StopMode m) { return m == StopMode::budget ? "budget" : "converged"; }

StopMode parse_stop_mode(std::string_view s) {
  if (s == "budget") return StopMode::budget;
  if (s == "converged") return StopMode::converged;
  throw InvalidArgument("unknown stop_mode '" + std::string(s) + "' (expected budget|converged)");
}

double lr_for_n(const LrRule& rule, std::size_t n) {
  require(rule.lr_ref > 0.0 && rule.n_ref > 0.0 && n > 0, "lr rule needs positive lr_ref, n_ref and n");
  return rule.lr_ref * std::sqrt(rule.n_ref / static_cast<double>(n));
}

DenseMatrix normalized_copy(const DenseMatrix& raw) {
  DenseMatrix X = raw;
  for (std::size_t r = 0; r < X.rows; ++r) {
    try {
      normalize_input(raw.row(r), X.row(r));
    } catch (const DegenerateInput&) {
      throw DegenerateInput("activation row " + std::to_string(r) + " is constant; cannot normalize");
    }
  }
  return X;
}

namespace {

void add_scaled(std::span<float> dst, std::span<const float> src, float a) {
  simd::kernels().axpy(a, src.data(), dst.data(), dst.size());
}

}  // namespace

StepStats compute_gradients(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X, double baseline,
                            std::span<const std::uint8_t> dead, AeGrads& grads) {
  require(X.cols == p.d, "compute_gradients: input width != d");
  require(baseline > 0.0, "compute_gradients: loss baseline must be positive");
  const std::size_t B = X.rows;
  const std::size_t d = p.d;
  const auto& kt = simd::kernels();

  DenseMatrix Xc = X;
  for (std::size_t b = 0; b < B; ++b) add_scaled(Xc.row(b), p.b_pre, -1.0f);
  DenseMatrix pre;
  matmul_nt(Xc, p.W_enc, pre);
  if (p.has_b_enc())
    for (std::size_t b = 0; b < B; ++b) add_scaled(pre.row(b), p.b_enc, 1.0f);

  std::vector<MultiTopkTerm> terms;
  if (cfg.activation == Activation::multi_topk) terms = effective_terms(cfg);
  else terms = {{cfg.k, 1.0f}};
  const std::size_t J = terms.size();
  const std::size_t kmax = terms.back().k;

  const double gscale = -2.0 / (static_cast<double>(B) * static_cast<double>(d) * baseline);
  const float l1_grad = static_cast<float>(cfg.l1_coeff / static_cast<double>(B));

  StepStats st;
  st.latents.assign(B, SparseVec{p.n, {}});
  std::vector<SparseVec> gpre(B, SparseVec{p.n, {}});
  DenseMatrix E(B, d);  // main-term error, for AuxK
  std::vector<double> term_sq(J, 0.0);
  std::vector<double> bpre_grad(d, 0.0);
  double l1_sum = 0.0;

  std::vector<float> xhat(d), e(d);
  std::vector<std::vector<float>> g(J, std::vector<float>(d));
  std::vector<std::vector<float>> suffix(J, std::vector<float>(d));
  std::vector<LatentId> order;
  std::vector<float> zval;

  for (std::size_t b = 0; b < B; ++b) {
    const auto prow = pre.row(b);
    const auto x = X.row(b);
    order.clear();
    zval.clear();
    if (cfg.activation == Activation::relu) {
      for (std::size_t i = 0; i < p.n; ++i)
        if (prow[i] > 0.0f) {
          order.push_back(static_cast<LatentId>(i));
          zval.push_back(prow[i]);
        }
    } else {
      order = topk_order(prow, kmax);
      for (LatentId i : order) zval.push_back(cfg.relu_after_topk ? std::max(prow[i], 0.0f) : prow[i]);
    }

    // Reconstructions of nested prefixes; a ReLU row is one segment covering all actives.
    std::copy(p.b_pre.begin(), p.b_pre.end(), xhat.begin());
    std::size_t pos = 0;
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t end = cfg.activation == Activation::relu ? order.size() : terms[j].k;
      for (; pos < end; ++pos)
        if (zval[pos] != 0.0f) kt.axpy(zval[pos], p.W_dec.row(order[pos]).data(), xhat.data(), d);
      double sq = 0.0;
      const float gs = static_cast<float>(gscale * terms[j].weight);
      for (std::size_t c = 0; c < d; ++c) {
        e[c] = x[c] - xhat[c];
        sq += static_cast<double>(e[c]) * e[c];
        g[j][c] = gs * e[c];
      }
      term_sq[j] += sq;
      if (j == 0) std::copy(e.begin(), e.end(), E.row(b).begin());
    }
    for (std::size_t jj = J; jj-- > 0;)
      for (std::size_t c = 0; c < d; ++c) suffix[jj][c] = g[jj][c] + (jj + 1 < J ? suffix[jj + 1][c] : 0.0f);
    for (std::size_t c = 0; c < d; ++c) bpre_grad[c] += suffix[0][c];

    SparseVec& z = st.latents[b];
    const std::size_t k0 = cfg.activation == Activation::relu ? order.size() : terms[0].k;
    for (std::size_t r = 0; r < k0; ++r)
      if (zval[r] != 0.0f) z.entries.push_back({order[r], zval[r]});
    std::sort(z.entries.begin(), z.entries.end(), [](const SparseEntry& a, const SparseEntry& c) { return a.index < c.index; });

    std::size_t seg = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      while (cfg.activation != Activation::relu && r >= terms[seg].k) ++seg;
      const LatentId i = order[r];
      const float zi = zval[r];
      const float* S = suffix[seg].data();
      float gz = kt.dot(S, p.W_dec.row(i).data(), d);
      if (zi != 0.0f) kt.axpy(zi, S, grads.W_dec.row(i).data(), d);
      if (cfg.activation == Activation::relu) {
        gz += l1_grad;
        l1_sum += zi;
      }
      const bool passes = cfg.activation == Activation::relu || !cfg.relu_after_topk || prow[i] > 0.0f;
      if (passes && gz != 0.0f) gpre[b].entries.push_back({i, gz});
    }
  }

  st.loss = 0.0;
  for (std::size_t j = 0; j < J; ++j) st.loss += terms[j].weight * term_sq[j] / (static_cast<double>(B) * d * baseline);
  st.l1 = l1_sum / static_cast<double>(B);
  double nnz = 0.0;
  for (const auto& z : st.latents) nnz += static_cast<double>(z.nnz());
  st.l0 = nnz / static_cast<double>(B);

  // b_enc sees only the main path (AuxK pre-activations exclude it).
  if (p.has_b_enc())
    for (const auto& gp : gpre)
      for (const auto& en : gp.entries) grads.b_enc[en.index] += en.value;

  const bool use_aux = cfg.activation != Activation::relu && cfg.aux_coeff > 0.0f && !dead.empty() &&
                       std::any_of(dead.begin(), dead.end(), [](std::uint8_t v) { return v != 0; });
  if (use_aux) {
    AuxResult aux = aux_loss(p, cfg, pre, E, dead);
    st.aux_loss = aux.loss;
    if (aux.loss > 0.0 && aux.normalizer > 0.0) {
      const float ga = static_cast<float>(-2.0 * cfg.aux_coeff / aux.normalizer);
      std::vector<float> gh(d);
      for (std::size_t b = 0; b < B; ++b) {
        const auto eh = aux.ehat.row(b);
        const auto er = E.row(b);
        for (std::size_t c = 0; c < d; ++c) gh[c] = ga * (er[c] - eh[c]);
        for (const auto& en : aux.latents[b].entries) {
          if (en.value <= 0.0f) continue;
          const float gz = kt.dot(gh.data(), p.W_dec.row(en.index).data(), d);
          kt.axpy(en.value, gh.data(), grads.W_dec.row(en.index).data(), d);
          if (gz != 0.0f) gpre[b].entries.push_back({en.index, gz});
        }
      }
    }
  }
  st.total = st.loss + cfg.aux_coeff * st.aux_loss + cfg.l1_coeff * st.l1;

  for (std::size_t b = 0; b < B; ++b)
    for (const auto& en : gpre[b].entries) kt.axpy(en.value, Xc.row(b).data(), grads.W_enc.row(en.index).data(), d);

  const std::vector<float> through_enc = pre_bias_gradient(gpre, p.W_enc);
  for (std::size_t c = 0; c < d; ++c) grads.b_pre[c] += static_cast<float>(bpre_grad[c]) - through_enc[c];
  return st;
}

BatchEval evaluate_with(const AutoencoderParams& p, const DenseMatrix& X,
                        const std::function<SparseVec(std::span<const float>)>& act) {
  require(X.cols == p.d && X.rows >= 1, "evaluate: bad input shape");
  constexpr std::size_t kChunk = 512;
  DenseMatrix Xc, pre;
  std::vector<float> rec(p.d);
  double sq = 0.0;
  double nnz = 0.0;
  for (std::size_t r0 = 0; r0 < X.rows; r0 += kChunk) {
    const std::size_t r1 = std::min(X.rows, r0 + kChunk);
    Xc = DenseMatrix(r1 - r0, p.d);
    for (std::size_t r = r0; r < r1; ++r) {
      auto dst = Xc.row(r - r0);
      const auto src = X.row(r);
      for (std::size_t c = 0; c < p.d; ++c) dst[c] = src[c] - p.b_pre[c];
    }
    matmul_nt(Xc, p.W_enc, pre);
    for (std::size_t r = r0; r < r1; ++r) {
      auto prow = pre.row(r - r0);
      if (p.has_b_enc()) add_scaled(prow, p.b_enc, 1.0f);
      const SparseVec z = act(prow);
      nnz += static_cast<double>(z.nnz());
      std::copy(p.b_pre.begin(), p.b_pre.end(), rec.begin());
      dense_sparse_matmul_rows(p.W_dec, z, rec);
      sq += simd::kernels().sqdist(X.row(r).data(), rec.data(), p.d);
    }
  }
  BatchEval ev;
  ev.mse = sq / (static_cast<double>(X.rows) * p.d);
  const double base = mean_predictor_mse(X);
  ev.nmse = base > 0.0 ? ev.mse / base : std::numeric_limits<double>::quiet_NaN();
  ev.l0 = nnz / static_cast<double>(X.rows);
  return ev;
}

BatchEval evaluate(const AutoencoderParams& p, const AeConfig& cfg, const DenseMatrix& X) {
  return evaluate_with(p, X, [&](std::span<const float> pre) { return activate(cfg, pre); });
}

std::size_t resample_dead(AutoencoderParams& p, const AeConfig& cfg, std::span<const std::uint8_t> dead,
                          const DenseMatrix& sample, AdamState* adam) {
  require(dead.size() == p.n, "resample_dead: mask size mismatch");
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < p.n; ++i)
    if (dead[i]) ids.push_back(i);
  if (ids.empty()) return 0;
  require(sample.rows >= 1 && sample.cols == p.d, "resample_dead: bad sample");

  DenseMatrix resid(sample.rows, p.d);
  std::vector<double> err(sample.rows);
  for (std::size_t r = 0; r < sample.rows; ++r) {
    const SparseVec z = encode(p, cfg, sample.row(r));
    const std::vector<float> rec = decode(p, z);
    auto out = resid.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < p.d; ++c) {
      out[c] = sample(r, c) - rec[c];
      s += static_cast<double>(out[c]) * out[c];
    }
    err[r] = s;
  }
  std::vector<std::size_t> rank(sample.rows);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });

  std::size_t done = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const std::size_t i = ids[j];
    const std::size_t r = rank[j % rank.size()];
    if (!(err[r] > 0.0)) continue;
    const float inv = static_cast<float>(1.0 / std::sqrt(err[r]));
    auto dec = p.W_dec.row(i);
    auto enc = p.W_enc.row(i);
    for (std::size_t c = 0; c < p.d; ++c) {
      dec[c] = resid(r, c) * inv;
      enc[c] = 0.2f * dec[c];
    }
    if (p.has_b_enc()) p.b_enc[i] = 0.0f;
    if (adam && !adam->m.empty()) {
      for (auto* mom : {&adam->m, &adam->v}) {
        std::fill_n((*mom)[0].begin() + static_cast<std::ptrdiff_t>(i * p.d), p.d, 0.0f);
        if (!(*mom)[1].empty()) (*mom)[1][i] = 0.0f;
        std::fill_n((*mom)[2].begin() + static_cast<std::ptrdiff_t>(i * p.d), p.d, 0.0f);
      }
    }
    ++done;
  }
  return done;
}

bool detect_convergence(std::span<const double> val_losses, double eps_rel, std::size_t window) {
  require(window >= 2, "detect_convergence: window must be >= 2");
  const std::size_t m = val_losses.size();
  if (m < window) return false;
  const double before = *std::min_element(val_losses.begin(), val_losses.begin() + static_cast<std::ptrdiff_t>(m - window + 1));
  const double best = *std::min_element(val_losses.begin(), val_losses.end());
  if (!(before > 0.0)) return true;
  return (before - best) / before < eps_rel;
}

void write_trainlog_csv(std::ostream& os, const TrainLog& log) {
  os << "step,tokens_seen,train_mse,val_nmse,val_nmse_raw,val_nmse_ema,dead_frac,l0,aux_loss,lr\n";
  char buf[512];
  for (const auto& r : log.records) {
    std::snprintf(buf, sizeof buf, "%" PRIu64 ",%" PRIu64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step,
                  r.tokens_seen, r.train_mse, r.val_nmse, r.val_nmse_raw, r.val_nmse_ema, r.dead_frac, r.l0,
                  r.aux_loss, r.lr);
    os << buf;
  }
}

void write_trainlog_jsonl(std::ostream& os, const TrainLog& log) {
  for (const auto& r : log.records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["tokens_seen"] = r.tokens_seen;
    j["train_mse"] = r.train_mse;
    j["val_nmse"] = r.val_nmse;
    j["val_nmse_raw"] = r.val_nmse_raw;
    j["val_nmse_ema"] = r.val_nmse_ema;
    j["dead_frac"] = r.dead_frac;
    j["l0"] = r.l0;
    j["aux_loss"] = r.aux_loss;
    j["lr"] = r.lr;
    os << j.dump() << "\n";
  }
}

TrainResult train(const AeConfig& ae_cfg, const TrainConfig& tcfg, const ActivationStore& data,
                  const TrainObserver& observer) {
  require(tcfg.batch_size >= 1, "train: batch_size must be >= 1");
  require(tcfg.token_budget >= tcfg.batch_size, "train: token_budget must be >= batch_size");
  require(data.rows() >= tcfg.batch_size, "train: data has " + std::to_string(data.rows()) +
                                              " rows, fewer than batch_size " + std::to_string(tcfg.batch_size));
  require(tcfg.eval_every >= 1, "train: eval_every must be >= 1");
  require(tcfg.ema_coeff >= 0.0 && tcfg.ema_coeff < 1.0, "train: ema_coeff must be in [0,1)");
  require(tcfg.lr_decay_fraction >= 0.0 && tcfg.lr_decay_fraction <= 1.0, "train: lr_decay_fraction in [0,1]");
  const std::size_t d = data.d();

  TrainResult res;
  res.config = resolve_config(ae_cfg, d);
  const AeConfig& cfg = res.config;

  const DenseMatrix X = normalized_copy(data.acts);
  const std::size_t n_val = validation_rows(X.rows);
  const std::size_t n_train = X.rows - n_val;
  require(n_val >= 1, "train: need at least 2 rows for a validation split");

  // Initialization sample: a seeded subset of training rows.
  std::vector<std::size_t> train_idx(n_train);
  std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
  {
    std::mt19937_64 rng(tcfg.seed ^ 0x5eed5eedULL);
    seeded_shuffle(train_idx, rng);
  }
  const std::size_t n_init = std::min(n_train, std::max<std::size_t>(1, tcfg.init_sample_rows));
  DenseMatrix sample;
  gather_rows(X, std::span<const std::size_t>(train_idx.data(), n_init), sample);
  res.loss_baseline = mean_predictor_mse(sample);
  if (!(res.loss_baseline > 0.0)) throw DegenerateInput("train: initialization sample has zero variance");

  res.params = init_params(sample, cfg, tcfg.seed);
  const double lr = tcfg.lr_rule ? lr_for_n(*tcfg.lr_rule, cfg.n) : tcfg.lr;
  require(lr >= 0.0 && std::isfinite(lr), "train: lr must be finite and >= 0");
  res.adam = make_adam(static_cast<float>(lr), slot_sizes(res.params), tcfg.adam_eps);
  res.ema_state = make_ema(slot_sizes(res.params), tcfg.ema_coeff);
  res.dead = DeadTracker(cfg.n, cfg.dead_threshold_tokens);

  std::vector<std::size_t> val_idx;
  for (std::size_t r = n_train; r < X.rows && val_idx.size() < tcfg.val_max_rows; ++r) val_idx.push_back(r);
  DenseMatrix Xval;
  gather_rows(X, val_idx, Xval);

  const std::uint64_t steps = tcfg.token_budget / tcfg.batch_size;
  std::vector<std::uint64_t> resample_at;
  if (cfg.activation == Activation::relu)
    for (std::size_t i = 1; i <= tcfg.resample_events; ++i) resample_at.push_back(steps * i / (tcfg.resample_events + 1));
  std::uint64_t last_resample_tokens = 0;

  BatchIterator it(X.rows, tcfg.batch_size, tcfg.seed, Split::train);
  std::mt19937_64 repair_rng(tcfg.seed + 0x9e3779b97f4a7c15ULL);
  AeGrads grads = AeGrads::zeros_like(res.params);
  DenseMatrix Xb;
  std::vector<double> val_history;
  int nonfinite_streak = 0;
  const bool want_aux = cfg.activation != Activation::relu && cfg.aux_coeff > 0.0f;

  for (std::uint64_t step = 1; step <= steps; ++step) {
    const auto idx = it.next();
    gather_rows(X, idx, Xb);
    const std::vector<std::uint8_t> dead = want_aux ? res.dead.mask() : std::vector<std::uint8_t>{};
    grads.zero();
    StepStats st = compute_gradients(res.params, cfg, Xb, res.loss_baseline, dead, grads);
    project_decoder_grad(grads.W_dec, res.params.W_dec);
    auto gslots = grad_slots(grads);
    clip_grads(gslots, tcfg.clip_norm);

    double lr_now = lr;
    if (tcfg.lr_decay_fraction > 0.0) {
      const double start = static_cast<double>(steps) * (1.0 - tcfg.lr_decay_fraction);
      if (static_cast<double>(step) > start)
        lr_now = lr * std::max(0.0, (static_cast<double>(steps) - static_cast<double>(step) + 1) /
                                        (static_cast<double>(steps) - start + 1));
    }
    res.adam.lr = static_cast<float>(lr_now);
    std::vector<std::span<const float>> cg(gslots.begin(), gslots.end());
    if (adam_step(res.adam, param_slots(res.params), cg)) {
      renorm_decoder(res.params.W_dec, repair_rng);
      ema_update(res.ema_state, param_slots(std::as_const(res.params)));
    }
    res.dead.update(st.latents, Xb.rows);
    res.tokens_seen += Xb.rows;

    if (std::find(resample_at.begin(), resample_at.end(), step) != resample_at.end()) {
      const std::uint64_t window = res.tokens_seen - last_resample_tokens;
      std::vector<std::uint8_t> mask(cfg.n, 0);
      for (std::size_t i = 0; i < cfg.n; ++i) mask[i] = res.dead.counters()[i] >= window ? 1 : 0;
      const std::size_t reset = resample_dead(res.params, cfg, mask, Xb, &res.adam);
      for (std::size_t i = 0; i < cfg.n; ++i)
        if (mask[i]) res.dead.reset(i);
      res.log.resampled_latents += reset;
      last_resample_tokens = res.tokens_seen;
    }

    if (step % tcfg.eval_every == 0 || step == steps) {
      TrainRecord rec;
      rec.step = step;
      rec.tokens_seen = res.tokens_seen;
      rec.train_mse = st.loss;
      rec.val_nmse_raw = evaluate(res.params, cfg, Xval).nmse;
      if (res.ema_state.step > 0) rec.val_nmse_ema = evaluate(ema_params(res.ema_state, res.params), cfg, Xval).nmse;
      else rec.val_nmse_ema = rec.val_nmse_raw;
      rec.val_nmse = std::min(rec.val_nmse_raw, rec.val_nmse_ema);
      if (std::isnan(rec.val_nmse_raw) || std::isnan(rec.val_nmse_ema)) rec.val_nmse = std::numeric_limits<double>::quiet_NaN();
      rec.dead_frac = static_cast<double>(res.dead.dead_count()) / static_cast<double>(cfg.n);
      rec.l0 = st.l0;
      rec.aux_loss = st.aux_loss;
      rec.lr = lr_now;
      res.log.records.push_back(rec);
      if (observer) observer(rec);
      if (tcfg.verbose)
        std::fprintf(stderr, "step %" PRIu64 "/%" PRIu64 " tokens %" PRIu64 " val_nmse %.5g dead %.4f L0 %.2f\n", step,
                     steps, res.tokens_seen, rec.val_nmse, rec.dead_frac, rec.l0);

      if (!std::isfinite(rec.val_nmse)) {
        if (++nonfinite_streak >= 2)
          throw NumericalError("validation loss non-finite at two consecutive evaluations (step " +
                               std::to_string(step) + ", skipped steps " + std::to_string(res.adam.skipped_steps) +
                               ")");
      } else {
        nonfinite_streak = 0;
        val_history.push_back(rec.val_nmse);
      }
      if (tcfg.stop_mode == StopMode::converged &&
          detect_convergence(val_history, tcfg.convergence_tol, tcfg.convergence_window)) {
        res.converged = true;
        break;
      }
    }
  }
  res.log.skipped_steps = res.adam.skipped_steps;
  res.ema = res.ema_state.step > 0 ? ema_params(res.ema_state, res.params) : res.params;
  return res;
}

}  // namespace sae
