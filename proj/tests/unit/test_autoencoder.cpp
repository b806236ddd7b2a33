#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sae/autoencoder.hpp"
#include "sae/error.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

namespace {

AutoencoderParams small_params(std::size_t n, std::size_t d, bool b_enc, std::mt19937_64& rng) {
  AutoencoderParams p;
  p.n = n;
  p.d = d;
  p.W_enc = random_matrix(n, d, rng, 0.5f);
  p.W_dec = random_matrix(n, d, rng, 0.5f);
  p.b_pre = random_vector(d, rng, 0.1f);
  if (b_enc) p.b_enc = random_vector(n, rng, 0.1f);
  return p;
}

}  // namespace

TEST_CASE("input normalization centers, scales to unit norm and round-trips") {
  const std::vector<float> x{3.0f, -1.0f, 4.0f, 1.0f, -5.0f};
  auto [xn, s] = normalize_input(x);
  double mean = 0.0, ss = 0.0;
  for (float v : xn) mean += v;
  for (float v : xn) ss += static_cast<double>(v) * v;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(ss == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(s.mean == doctest::Approx(0.4));
  std::vector<float> back = xn;
  denormalize(back, s);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-5));
  const std::vector<float> flat(4, 2.5f);
  CHECK_THROWS_AS(normalize_input(flat), DegenerateInput);
}

TEST_CASE("config resolution") {
  AeConfig c;
  c.n = 64;
  c.k = 4;
  const AeConfig r = resolve_config(c, 64);
  CHECK(r.k_aux == 32);
  CHECK_FALSE(*r.use_b_enc);
  CHECK(resolve_config(c, 48).k_aux == 32);  // 24 rounds to 32 on the log scale
  c.activation = Activation::relu;
  CHECK(*resolve_config(c, 64).use_b_enc);
  c.activation = Activation::multi_topk;
  const AeConfig m = resolve_config(c, 64);
  REQUIRE(m.multi_topk_terms.size() == 2);
  CHECK(m.multi_topk_terms[1].k == 16);
  CHECK(m.multi_topk_terms[1].weight == doctest::Approx(0.125));
  c.activation = Activation::topk;
  c.k = 65;
  CHECK_THROWS_AS(resolve_config(c, 64), InvalidArgument);
  CHECK_THROWS_AS(parse_activation("gelu"), InvalidArgument);
}

TEST_CASE("encode and decode follow the definitions") {
  std::mt19937_64 rng(1);
  const std::size_t n = 12, d = 6;
  for (bool with_b : {false, true}) {
    const AutoencoderParams p = small_params(n, d, with_b, rng);
    AeConfig cfg;
    cfg.n = n;
    cfg.k = 3;
    cfg = resolve_config(cfg, d);
    const auto x = random_vector(d, rng);
    std::vector<double> pre(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = with_b ? p.b_enc[i] : 0.0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(p.W_enc(i, c)) * (x[c] - p.b_pre[c]);
      pre[i] = s;
    }
    const auto got = encoder_preacts(p, x);
    for (std::size_t i = 0; i < n; ++i) CHECK(got[i] == doctest::Approx(pre[i]).epsilon(1e-5));
    const SparseVec z = encode(p, cfg, x);
    CHECK(z.entries.size() == 3);
    const auto rec = decode(p, z);
    for (std::size_t c = 0; c < d; ++c) {
      double s = p.b_pre[c];
      for (const auto& e : z.entries) s += static_cast<double>(e.value) * p.W_dec(e.index, c);
      CHECK(rec[c] == doctest::Approx(s).epsilon(1e-5));
    }
  }
}

TEST_CASE("mean predictor mse") {
  DenseMatrix X(2, 2);
  X.data = {1, 2, 3, 6};
  // means (2,4); deviations 1,2 each -> (1+4+1+4)/4
  CHECK(mean_predictor_mse(X) == doctest::Approx(2.5));
  CHECK_THROWS_AS(normalized_mse(1.0, 0.0), DegenerateInput);
}

TEST_CASE("aux loss matches a direct computation") {
  std::mt19937_64 rng(2);
  const std::size_t n = 16, d = 8, B = 5;
  const AutoencoderParams p = small_params(n, d, true, rng);
  AeConfig cfg;
  cfg.n = n;
  cfg.k = 2;
  cfg.k_aux = 3;
  cfg = resolve_config(cfg, d);
  const DenseMatrix X = random_matrix(B, d, rng);
  DenseMatrix pre;
  encoder_preacts(p, X, pre);
  const DenseMatrix err = random_matrix(B, d, rng, 0.2f);
  std::vector<std::uint8_t> dead(n, 0);
  for (std::size_t i : {1u, 4u, 5u, 9u, 13u}) dead[i] = 1;
  const AuxResult r = aux_loss(p, cfg, pre, err, dead);

  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    // Pre-activations without b_enc, restricted to dead latents.
    std::vector<std::pair<double, std::size_t>> c;
    for (std::size_t i = 0; i < n; ++i)
      if (dead[i]) c.push_back({-(pre(b, i) - p.b_enc[i]), i});
    std::sort(c.begin(), c.end());
    std::vector<double> eh(d, 0.0);
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = std::max(0.0, -c[j].first);
      for (std::size_t q = 0; q < d; ++q) eh[q] += v * p.W_dec(c[j].second, q);
    }
    for (std::size_t q = 0; q < d; ++q) {
      num += (err(b, q) - eh[q]) * (err(b, q) - eh[q]);
      den += static_cast<double>(err(b, q)) * err(b, q);
    }
  }
  CHECK(r.loss == doctest::Approx(num / den).epsilon(1e-5));
  CHECK(r.normalizer == doctest::Approx(den).epsilon(1e-6));

  std::vector<std::uint8_t> none(n, 0);
  CHECK(aux_loss(p, cfg, pre, err, none).loss == 0.0);
}

TEST_CASE("multi-topk loss is the weighted sum of nested topk losses") {
  std::mt19937_64 rng(4);
  const std::size_t n = 20, d = 6, B = 7;
  const AutoencoderParams p = small_params(n, d, false, rng);
  AeConfig cfg;
  cfg.n = n;
  cfg.k = 2;
  cfg.activation = Activation::multi_topk;
  cfg = resolve_config(cfg, d);
  const DenseMatrix X = random_matrix(B, d, rng);
  const MultiTopkLoss l = multi_topk_loss(p, cfg, X);
  REQUIRE(l.per_term.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) {
    AeConfig single = cfg;
    single.activation = Activation::topk;
    single.k = cfg.multi_topk_terms[t].k;
    double sq = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto rec = decode(p, encode(p, single, X.row(b)));
      for (std::size_t c = 0; c < d; ++c) sq += (X(b, c) - rec[c]) * (X(b, c) - rec[c]);
    }
    CHECK(l.per_term[t] == doctest::Approx(sq / (B * d)).epsilon(1e-5));
  }
  CHECK(l.total == doctest::Approx(l.per_term[0] + l.per_term[1] / 8.0).epsilon(1e-9));
}

TEST_CASE("jumprelu keeps values strictly above the threshold") {
  const std::vector<float> pre{0.1f, 0.5f, 0.2f, -1.0f, 0.3f};
  const SparseVec z = jumprelu_activate(pre, 0.2f);
  REQUIRE(z.entries.size() == 2);
  CHECK(z.entries[0].index == 1);
  CHECK(z.entries[1].index == 4);
  CHECK(z.entries[1].value == 0.3f);
  CHECK_THROWS_AS(jumprelu_activate(pre, -0.1f), InvalidArgument);
}

TEST_CASE("geometric median minimizes the summed distance") {
  std::mt19937_64 rng(6);
  DenseMatrix P = random_matrix(41, 3, rng);
  for (std::size_t c = 0; c < 3; ++c) P(0, c) = 50.0f;  // an outlier pulls the mean but not the median
  const auto y = geometric_median(P, {1e-9, 1000, 0});
  auto cost = [&](const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t r = 0; r < P.rows; ++r) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) d2 += (P(r, c) - q[c]) * (P(r, c) - q[c]);
      s += std::sqrt(d2);
    }
    return s;
  };
  const std::vector<double> yd(y.begin(), y.end());
  const double best = cost(yd);
  for (int t = 0; t < 50; ++t) {
    auto q = yd;
    for (auto& v : q) v += 0.01 * std::normal_distribution<double>(0, 1)(rng);
    CHECK(cost(q) >= best - 1e-6);
  }
  // Collinear odd sample: the middle point.
  DenseMatrix L(3, 2);
  L.data = {0, 0, 1, 1, 5, 5};
  const auto m = geometric_median(L, {1e-10, 2000, 0});
  CHECK(m[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(m[1] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("initialization: unit decoder rows, tied encoder, median pre-bias") {
  std::mt19937_64 rng(8);
  DenseMatrix S = random_matrix(200, 10, rng);
  normalize_rows(S);
  AeConfig cfg;
  cfg.n = 32;
  cfg.k = 4;
  const AutoencoderParams p = init_params(S, cfg, 3);
  for (std::size_t i = 0; i < p.n; ++i) {
    double ss = 0.0;
    for (float v : p.W_dec.row(i)) ss += static_cast<double>(v) * v;
    CHECK(ss == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(p.W_enc.data == p.W_dec.data);
  CHECK_FALSE(p.has_b_enc());
  const auto gm = geometric_median(S, {1e-6, 100, 3});
  for (std::size_t c = 0; c < 10; ++c) CHECK(p.b_pre[c] == doctest::Approx(gm[c]));
  cfg.tied_init = false;
  CHECK(init_params(S, cfg, 3).W_enc.data != p.W_dec.data);
}

TEST_CASE("dead tracker counts tokens since the last firing") {
  DeadTracker t(3, 10);
  SparseVec a{3, {{0, 1.0f}}};
  SparseVec none{3, {}};
  std::vector<SparseVec> b1{a, none};
  t.update(b1, 6);
  CHECK(t.dead_count() == 0);
  std::vector<SparseVec> b2{none};
  t.update(b2, 6);
  CHECK_FALSE(t.dead(0));
  CHECK(t.dead(1));
  CHECK(t.dead(2));
  CHECK(t.mask() == std::vector<std::uint8_t>{0, 1, 1});
}
