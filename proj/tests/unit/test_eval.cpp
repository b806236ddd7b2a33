#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sae/error.hpp"
#include "sae/eval.hpp"
#include "sae/trainer.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

namespace {

double logistic_ce(std::span<const float> z, std::span<const std::uint8_t> y, double w, double b) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double u = w * z[i] + b;
    // log(1 + e^u) - y u, computed stably
    s += (u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u))) - (y[i] ? u : 0.0);
  }
  return s / static_cast<double>(z.size());
}

SequenceStore seqs_from(std::size_t vocab, std::size_t L, std::size_t n, std::uint64_t seed) {
  SequenceStore s = random_sequences(vocab, L, n, seed);
  // Token 0 is the pad token; keep it out of the data.
  for (auto& t : s.tokens)
    if (t == 0) t = 1;
  return s;
}

LatentTable table_from(const SequenceStore& s, const std::function<float(std::span<const std::uint32_t>)>& f,
                       LatentId latent) {
  LatentTable t;
  t.seq_len = s.seq_len;
  for (std::size_t q = 0; q < s.n_seqs(); ++q)
    for (std::size_t p = 0; p < s.seq_len; ++p) {
      SparseVec z{latent + 1, {}};
      const float v = f(s.seq(q).subspan(0, p + 1));
      if (v > 0.0f) z.entries.push_back({latent, v});
      t.codes.push_back(z);
    }
  return t;
}

}  // namespace

TEST_CASE("1-d logistic probe reaches the grid minimum") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> z(400);
  std::vector<std::uint8_t> y(400);
  for (std::size_t i = 0; i < z.size(); ++i) {
    y[i] = i % 3 == 0;
    z[i] = nd(rng) + (y[i] ? 1.2f : -0.4f);
  }
  const LogisticFit f = fit_logistic_1d(z, y);
  CHECK(f.ce == doctest::Approx(logistic_ce(z, y, f.w, f.b)).epsilon(1e-9));
  double best = 1e9;
  for (double w = -1.0; w <= 5.0; w += 0.01)
    for (double b = -3.0; b <= 2.0; b += 0.01) best = std::min(best, logistic_ce(z, y, w, b));
  CHECK(f.ce <= best + 1e-6);
  CHECK(f.w > 0.0);
}

TEST_CASE("probe metric picks the informative latent and rejects one-class tasks") {
  std::mt19937_64 rng(5);
  DenseMatrix pre = random_matrix(300, 6, rng);
  ProbeTask task{"t", std::vector<std::uint8_t>(300)};
  for (std::size_t r = 0; r < 300; ++r) {
    task.labels[r] = r % 2;
    pre(r, 4) += task.labels[r] ? 2.0f : -2.0f;
  }
  const ProbeResult res = probe_metric(pre, task, true);
  CHECK(res.best_latent == 4);
  CHECK(res.constant_ce == doctest::Approx(std::log(2.0)));
  CHECK(res.best_ce < 0.5 * res.constant_ce);
  CHECK(res.per_latent_ce.size() == 6);
  ProbeTask flat{"flat", std::vector<std::uint8_t>(300, 1)};
  CHECK_THROWS_AS(probe_metric(pre, flat), InvalidArgument);
}

TEST_CASE("effect sparsity") {
  DenseMatrix base(4, 5), abl(4, 5);
  abl(1, 2) = 3.0f;
  // One nonzero logit difference over V*T = 10 entries.
  REQUIRE(effect_sparsity(base, abl, 1, 2));
  CHECK(*effect_sparsity(base, abl, 1, 2) == doctest::Approx(0.1));
  CHECK_FALSE(effect_sparsity(base, abl, 2, 2));
  // A constant shift of every logit is removed by the median.
  DenseMatrix shift(4, 5, 7.0f);
  CHECK_FALSE(effect_sparsity(base, shift, 0, 4));
  CHECK_THROWS_AS(effect_sparsity(base, abl, 3, 2), InvalidArgument);

  // Gaussian differences: (E|g|)^2 / E[g^2] = 2/pi.
  std::mt19937_64 rng(1);
  DenseMatrix big_base(2, 20001), big = random_matrix(2, 20001, rng);
  CHECK(*effect_sparsity(big_base, big, 0, 2) == doctest::Approx(2.0 / M_PI).epsilon(0.02));
}

TEST_CASE("probe positions are evenly spaced") {
  CHECK(probe_positions(64, 16, 4) == std::vector<std::size_t>{0, 16, 32, 48});
  CHECK(probe_positions(20, 16, 1) == std::vector<std::size_t>{2});
  CHECK(probe_positions(17, 16, 5) == std::vector<std::size_t>{0, 1});
  CHECK(probe_positions(8, 16, 4).empty());
}

TEST_CASE("N2G recovers bigram, unigram, skip and anchored patterns") {
  const SequenceStore build = seqs_from(12, 10, 60, 1), held = seqs_from(12, 10, 60, 2);
  struct Case {
    const char* name;
    std::function<float(std::span<const std::uint32_t>)> f;
  };
  const std::vector<Case> cases{
      {"bigram", [](auto t) { return t.size() >= 2 && t[t.size() - 2] == 5 && t.back() == 3 ? 1.0f : 0.0f; }},
      {"unigram", [](auto t) { return t.back() == 7 ? 0.5f : 0.0f; }},
      {"skip", [](auto t) { return t.size() >= 3 && t[t.size() - 3] == 4 && t.back() == 9 ? 2.0f : 0.0f; }},
      {"first", [](auto t) { return t.size() == 1 && t[0] == 2 ? 1.0f : 0.0f; }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const LatentTable tb = table_from(build, c.f, 0), th = table_from(held, c.f, 0);
    N2GBuildOptions opt;
    opt.max_contexts = 64;
    N2GExplanation ex = n2g_build(0, build, tb, c.f, opt);
    REQUIRE_FALSE(ex.empty);
    const N2GScores s = n2g_scores(ex, held, th);
    REQUIRE(s.recall);
    REQUIRE(s.precision);
    CHECK(*s.recall == 1.0);
    CHECK(*s.precision == 1.0);
    const ScaleFit sc = n2g_simulate_scale(ex, build, tb);
    CHECK(sc.scale == doctest::Approx(1.0));
  }
  const LatentTable tb = table_from(build, cases[2].f, 0);
  const N2GExplanation skip = n2g_build(0, build, tb, cases[2].f);
  CHECK(skip.patterns.front().tokens == std::vector<std::uint32_t>{4, kWildcard, 9});
  const LatentTable t0 = table_from(build, cases[3].f, 0);
  CHECK(n2g_build(0, build, t0, cases[3].f).patterns.front().anchored);
  const LatentTable none = table_from(build, [](auto) { return 0.0f; }, 0);
  CHECK(n2g_build(0, build, none, cases[0].f).empty);
}

TEST_CASE("least squares scale") {
  const std::vector<double> s{1, 2, 0}, a{2, 4, 1};
  CHECK(least_squares_scale(s, a).scale == doctest::Approx(2.0));
  const std::vector<double> zero{0, 0, 0};
  CHECK(least_squares_scale(zero, a).degenerate);
}

TEST_CASE("refinement undoes uniform shrinkage against an orthonormal decoder") {
  const std::size_t d = 8;
  AutoencoderParams p;
  p.n = d;
  p.d = d;
  p.W_enc = DenseMatrix(d, d);
  p.W_dec = DenseMatrix(d, d);
  p.b_pre.assign(d, 0.0f);
  for (std::size_t i = 0; i < d; ++i) {
    p.W_enc(i, i) = 0.5f;
    p.W_dec(i, i) = 1.0f;
  }
  AeConfig cfg;
  cfg.n = d;
  cfg.k = 3;
  cfg = resolve_config(cfg, d);
  DenseMatrix X(2, d);
  X(0, 1) = 1.0f;
  X(0, 4) = 2.0f;
  X(0, 6) = 0.5f;
  X(1, 0) = 1.0f;
  X(1, 2) = 1.0f;
  X(1, 3) = 1.0f;
  const ShrinkageReport r = refine_activations(p, cfg, X);
  CHECK(r.rows == 2);
  CHECK(r.mean_relative_change == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(r.mse_after < 1e-8);
  CHECK(r.mse_before > 0.1);
  const SparseVec z2 = refine_code(p, X.row(0), encode(p, cfg, X.row(0)));
  REQUIRE(z2.entries.size() == 3);
  CHECK(z2.entries[1].value == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("refinement never increases the error") {
  std::mt19937_64 rng(11);
  DenseMatrix S = random_matrix(200, 12, rng);
  normalize_rows(S);
  AeConfig cfg;
  cfg.n = 40;
  cfg.k = 5;
  cfg = resolve_config(cfg, 12);
  const AutoencoderParams p = init_params(S, cfg, 2);
  for (std::size_t r = 0; r < 50; ++r) {
    const auto x = S.row(r);
    const SparseVec z = encode(p, cfg, x);
    const SparseVec z2 = refine_code(p, x, z);
    CHECK(mse(x, decode(p, z2)) <= mse(x, decode(p, z)) + 1e-9);
    for (const auto& e : z2.entries) CHECK(e.value >= 0.0f);
  }
}

TEST_CASE("test-time sweep and density stats") {
  std::mt19937_64 rng(12);
  DenseMatrix S = random_matrix(300, 16, rng);
  normalize_rows(S);
  AeConfig cfg;
  cfg.n = 64;
  cfg.k = 4;
  cfg = resolve_config(cfg, 16);
  const AutoencoderParams p = init_params(S, cfg, 1);
  const std::vector<std::size_t> ks{4, 16};
  const std::vector<float> th{0.0f, 0.2f};
  const auto pts = test_time_sweep(p, cfg, S, ks, th);
  REQUIRE(pts.size() == 4);
  CHECK(pts[0].mode == "topk");
  CHECK(pts[0].nmse == doctest::Approx(evaluate(p, cfg, S).nmse));
  CHECK(pts[1].l0 > pts[0].l0);
  CHECK(pts[2].mode == "jumprelu");
  CHECK(pts[3].l0 <= pts[2].l0);

  const DensityStats ds = density_stats(p, cfg, S);
  CHECK(std::accumulate(ds.density.begin(), ds.density.end(), 0.0) == doctest::Approx(ds.l0));
  CHECK(ds.log10_bins.size() == 15);
  CHECK(std::accumulate(ds.histogram.begin(), ds.histogram.end(), std::size_t{0}) + ds.never_fired == 64);
  std::vector<double> sorted = ds.density;
  std::sort(sorted.rbegin(), sorted.rend());
  CHECK(ds.dense_solution_score == doctest::Approx(std::accumulate(sorted.begin(), sorted.begin() + 16, 0.0) / 16.0 / ds.l0));
}

TEST_CASE("mse by position uses each position's own baseline") {
  std::mt19937_64 rng(13);
  DenseMatrix S = random_matrix(40, 8, rng);
  normalize_rows(S);
  AeConfig cfg;
  cfg.n = 16;
  cfg.k = 2;
  cfg = resolve_config(cfg, 8);
  const AutoencoderParams p = init_params(S, cfg, 1);
  const auto per = mse_by_position(p, cfg, S, 4);
  REQUIRE(per.size() == 4);
  DenseMatrix slice(10, 8);
  for (std::size_t s = 0; s < 10; ++s)
    for (std::size_t c = 0; c < 8; ++c) slice(s, c) = S(s * 4 + 2, c);
  CHECK(per[2] == doctest::Approx(evaluate(p, cfg, slice).nmse));
  CHECK_THROWS_AS(mse_by_position(p, cfg, S, 3), InvalidArgument);
}
