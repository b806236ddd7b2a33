#include "acceptance/fixtures.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "sae/eval.hpp"

namespace fixtures {

DenseMatrix heldout_rows(const ActivationStore& s, std::size_t count) {
  const std::size_t start = s.rows() - count;
  DenseMatrix X(count, s.d());
  for (std::size_t r = 0; r < count; ++r) {
    const auto src = s.acts.row(start + r);
    std::copy(src.begin(), src.end(), X.row(r).begin());
  }
  normalize_rows(X);
  return X;
}

Chosen best_weights(const TrainResult& r, const DenseMatrix& X) {
  const BatchEval raw = evaluate(r.params, r.config, X);
  const BatchEval ema = evaluate(r.ema, r.config, X);
  if (ema.nmse <= raw.nmse) return {&r.ema, ema};
  return {&r.params, raw};
}

double mean_max_cosine(const DenseMatrix& D, const DenseMatrix& W) {
  double total = 0.0;
  for (std::size_t i = 0; i < D.rows; ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < W.rows; ++j) {
      double dot = 0.0, nd = 0.0, nw = 0.0;
      for (std::size_t c = 0; c < D.cols; ++c) {
        dot += static_cast<double>(D(i, c)) * W(j, c);
        nd += static_cast<double>(D(i, c)) * D(i, c);
        nw += static_cast<double>(W(j, c)) * W(j, c);
      }
      if (nd > 0 && nw > 0) best = std::max(best, dot / std::sqrt(nd * nw));
    }
    total += best;
  }
  return total / static_cast<double>(D.rows);
}

double loglog_interp(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (x <= xs.front()) return ys.front();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (x <= xs[i]) {
      const double t = std::log(x / xs[i - 1]) / std::log(xs[i] / xs[i - 1]);
      return std::exp(std::log(ys[i - 1]) + t * std::log(ys[i] / ys[i - 1]));
    }
  }
  return ys.back();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

BigramSubject make_bigram_subject(std::size_t vocab, std::size_t ctx, std::uint64_t seed) {
  const std::size_t d = vocab + ctx + vocab;
  const std::size_t pos0 = vocab, prev0 = vocab + ctx;
  SubjectConfig cfg;
  cfg.layers = 2;
  cfg.d_model = d;
  cfg.heads = 1;
  cfg.vocab = vocab;
  cfg.ctx = ctx;
  cfg.splice_layer = 1;
  BigramSubject s;
  s.vocab = vocab;
  SubjectModel& m = s.model;
  m = random_subject(cfg, seed);
  m.wte = DenseMatrix(vocab, d);
  for (std::size_t t = 0; t < vocab; ++t) m.wte(t, t) = 1.0f;
  m.wpe = DenseMatrix(ctx, d);
  for (std::size_t p = 0; p < ctx; ++p) m.wpe(p, pos0 + p) = 1.0f;

  for (auto& L : m.layers) {
    L.ln1_g.assign(d, 1.0f);
    L.ln1_b.assign(d, 0.0f);
    L.ln2_g.assign(d, 1.0f);
    L.ln2_b.assign(d, 0.0f);
    L.wq = DenseMatrix(d, d);
    L.wk = DenseMatrix(d, d);
    L.wv = DenseMatrix(d, d);
    L.wo = DenseMatrix(d, d);
    L.w1 = DenseMatrix(4 * d, d);
    L.b1.assign(4 * d, 0.0f);
    L.w2 = DenseMatrix(d, 4 * d);
    L.b2.assign(d, 0.0f);
  }
  // Layer 0: position p queries with angle p, position j keys with angle j+1,
  // so the sharpest match is j = p-1. The angles sum to zero over the context,
  // which cancels the layer-norm mean term.
  auto& L0 = m.layers[0];
  const double B = 14.0;
  for (std::size_t p = 0; p < ctx; ++p) {
    const double a = 2.0 * M_PI * static_cast<double>(p) / static_cast<double>(ctx);
    const double b = 2.0 * M_PI * static_cast<double>(p + 1) / static_cast<double>(ctx);
    L0.wq(0, pos0 + p) = static_cast<float>(B * std::cos(a));
    L0.wq(1, pos0 + p) = static_cast<float>(B * std::sin(a));
    L0.wk(0, pos0 + p) = static_cast<float>(B * std::cos(b));
    L0.wk(1, pos0 + p) = static_cast<float>(B * std::sin(b));
  }
  for (std::size_t t = 0; t < vocab; ++t) L0.wv(prev0 + t, t) = 1.0f;
  for (std::size_t c = 0; c < d; ++c) L0.wo(c, c) = 1.0f;

  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  std::normal_distribution<float> N(0.0f, 0.5f);
  m.unembed = DenseMatrix(vocab, d);
  for (auto& v : m.unembed.data) v = N(rng);
  m.lnf_g.assign(d, 1.0f);
  m.lnf_b.assign(d, 0.0f);
  m.validate();

  // Read the coordinate values off one sequence and check they do not vary.
  std::vector<std::uint32_t> tok(ctx);
  for (std::size_t p = 0; p < ctx; ++p) tok[p] = static_cast<std::uint32_t>(1 + (p * 7) % (vocab - 1));
  const DenseMatrix r = forward_to_splice(m, tok);
  std::vector<float> xn(d);
  for (std::size_t p = 0; p < ctx; ++p) {
    normalize_input(r.row(p), xn);
    const std::uint32_t cur = tok[p], prv = tok[p == 0 ? 0 : p - 1];
    const std::uint32_t other = cur == 1 ? 2 : 1, other_prev = prv == 1 ? 2 : 1;
    if (p == 0) {
      s.tok_on = xn[cur];
      s.tok_off = xn[other];
      s.prev_on = xn[prev0 + prv];
      s.prev_off = xn[prev0 + other_prev];
    }
    const float tol = 1e-5f;
    if (std::abs(xn[cur] - s.tok_on) > tol || std::abs(xn[other] - s.tok_off) > tol ||
        std::abs(xn[prev0 + prv] - s.prev_on) > tol || std::abs(xn[prev0 + other_prev] - s.prev_off) > tol)
      throw std::runtime_error("bigram subject: residual coordinates vary with position");
  }
  return s;
}

AutoencoderParams make_hand_autoencoder(const BigramSubject& s, const std::vector<HandLatent>& latents,
                                        std::uint64_t seed) {
  const std::size_t d = s.model.cfg.d_model, V = s.vocab, prev0 = V + s.model.cfg.ctx;
  AutoencoderParams p;
  p.n = latents.size();
  p.d = d;
  p.W_enc = DenseMatrix(p.n, d);
  p.W_dec = DenseMatrix(p.n, d);
  p.b_pre.assign(d, 0.0f);
  p.b_enc.assign(p.n, 0.0f);
  const double dt = s.tok_on - s.tok_off, dp = s.prev_on - s.prev_off;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < p.n; ++i) {
    const HandLatent& h = latents[i];
    // pre = [current matches] + [previous matches] - needed + 0.5
    double offset = 0.0, needed = 1.0;
    for (std::uint32_t t : h.current) {
      p.W_enc(i, t) = static_cast<float>(1.0 / dt);
      offset += s.tok_off / dt;
    }
    if (h.previous >= 0) {
      p.W_enc(i, prev0 + static_cast<std::size_t>(h.previous)) = static_cast<float>(1.0 / dp);
      offset += s.prev_off / dp;
      needed = 2.0;
    }
    p.b_enc[i] = static_cast<float>(-offset - needed + 0.5);
    random_unit_vector(p.W_dec.row(i), rng);
  }
  return p;
}

SequenceStore nonpad_sequences(std::size_t vocab, std::size_t seq_len, std::size_t n, std::uint64_t seed) {
  SequenceStore s;
  s.vocab = static_cast<std::uint32_t>(vocab);
  s.seq_len = static_cast<std::uint32_t>(seq_len);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> U(1, static_cast<std::uint32_t>(vocab - 1));
  s.tokens.resize(seq_len * n);
  for (auto& t : s.tokens) t = U(rng);
  return s;
}

}  // namespace fixtures
