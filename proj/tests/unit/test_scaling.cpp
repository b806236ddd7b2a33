#include <doctest.h>

#include <cmath>

#include "sae/error.hpp"
#include "sae/scaling.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

namespace {

std::vector<double> logspace(double lo, double hi, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::pow(10.0, lo + (hi - lo) * static_cast<double>(i) / (n - 1));
  return x;
}

double paper_law(double n, double k) {
  const double lk = std::log(k), ln = std::log(n);
  return std::exp(-0.50 + 0.26 * lk - 0.017 * ln - 0.042 * lk * ln) + std::exp(-1.32 - 0.085 * lk);
}

}  // namespace

TEST_CASE("power law fit is exact on noiseless data") {
  const auto x = logspace(0, 3, 12);
  std::vector<double> y(x.size()), y0(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = 2.5 * std::pow(x[i], -0.4) + 0.1;
    y0[i] = 2.5 * std::pow(x[i], -0.4);
  }
  const PowerLawFit f = fit_power_law(x, y, true);
  CHECK(f.alpha == doctest::Approx(2.5).epsilon(1e-3));
  CHECK(f.beta == doctest::Approx(-0.4).epsilon(1e-3));
  CHECK(f.e == doctest::Approx(0.1).epsilon(1e-3));
  CHECK(f.log_rms < 1e-5);
  CHECK(f(10.0) == doctest::Approx(2.5 * std::pow(10.0, -0.4) + 0.1).epsilon(1e-4));

  const PowerLawFit g = fit_power_law(x, y0, false);
  CHECK(g.e == 0.0);
  CHECK(g.alpha == doctest::Approx(2.5).epsilon(1e-9));
  CHECK(g.beta == doctest::Approx(-0.4).epsilon(1e-9));
  // Without an irreducible term in the data, both forms agree.
  const PowerLawFit h = fit_power_law(x, y0, true);
  CHECK(h.e < 1e-3);
  CHECK(h.beta == doctest::Approx(-0.4).epsilon(1e-2));
}

TEST_CASE("power law recovery under lognormal noise") {
  // e is only identifiable once the curve visibly flattens, hence five decades.
  const auto x = logspace(0, 5, 12);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 0.01);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (1.5 * std::pow(x[i], -0.4) + 0.05) * std::exp(nd(rng));
    const PowerLawFit f = fit_power_law(x, y, true);
    CHECK(rel_err(f.alpha, 1.5) < 0.05);
    CHECK(rel_err(f.beta, -0.4) < 0.05);
    CHECK(rel_err(f.e, 0.05) < 0.05);
  }
}

TEST_CASE("power law input validation") {
  const std::vector<double> x{1, 2}, y{1, 0.5};
  CHECK_THROWS_AS(fit_power_law(x, y, true), InvalidArgument);
  const std::vector<double> x3{1, 2, 3}, bad{1, -1, 0.5};
  CHECK_THROWS_AS(fit_power_law(x3, bad, false), InvalidArgument);
}

TEST_CASE("paper-constant joint law evaluates to 0.299 at k=32, n=2^24") {
  JointFit j;
  j.alpha = -0.50;
  j.beta_k = 0.26;
  j.beta_n = -0.017;
  j.gamma = -0.042;
  j.zeta = -1.32;
  j.eta = -0.085;
  const double n = std::ldexp(1.0, 24);
  CHECK(paper_law(n, 32) == doctest::Approx(0.299).epsilon(5e-3));
  CHECK(j(n, 32) == doctest::Approx(paper_law(n, 32)).epsilon(1e-12));
}

TEST_CASE("joint fit recovers a noiseless planted law") {
  std::vector<JointPoint> pts;
  for (int e = 6; e <= 24; e += 2)
    for (double k : {2.0, 8.0, 32.0, 128.0}) {
      const double n = std::ldexp(1.0, e);
      pts.push_back({n, k, paper_law(n, k)});
    }
  const JointFit f = fit_joint(pts);
  CHECK(f.points == pts.size());
  CHECK(f.log_rms < 1e-4);
  CHECK(rel_err(f.alpha, -0.50) < 0.02);
  CHECK(rel_err(f.beta_k, 0.26) < 0.02);
  CHECK(rel_err(f.gamma, -0.042) < 0.02);
  CHECK(rel_err(f.zeta, -1.32) < 0.02);
  CHECK(f.gamma < 0.0);
}

TEST_CASE("joint fit refuses underdetermined input") {
  std::vector<JointPoint> pts;
  for (double n : {64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0, 16384.0})
    pts.push_back({n, 8.0, paper_law(n, 8.0)});
  CHECK_THROWS_AS(fit_joint(pts), InvalidArgument);
  pts.resize(3);
  pts.push_back({64.0, 16.0, paper_law(64.0, 16.0)});
  CHECK_THROWS_AS(fit_joint(pts), InvalidArgument);
}

TEST_CASE("compute frontier is the lower envelope of best-so-far curves") {
  std::vector<SweepCurve> c(2);
  c[0].compute = {1, 2, 4};
  c[0].best_nmse = {0.9, 0.5, 0.4};
  c[1].compute = {3, 6};
  c[1].best_nmse = {0.45, 0.2};
  const std::vector<double> grid{0.5, 1, 3, 5, 10};
  const auto f = compute_frontier(c, grid);
  CHECK(std::isinf(f[0]));
  CHECK(f[1] == 0.9);
  CHECK(f[2] == 0.45);
  CHECK(f[3] == 0.4);
  CHECK(f[4] == 0.2);
}

TEST_CASE("compute proxy and divergence") {
  CHECK(compute_proxy(64, 1024, 1000) == doctest::Approx(6.0 * 64 * 1024 * 1000));
  SweepRow r;
  r.val_nmse = 0.3;
  CHECK_FALSE(is_diverged(r));
  r.val_nmse = 2.5;
  CHECK(is_diverged(r));
  r.val_nmse = std::nan("");
  CHECK(is_diverged(r));
}

TEST_CASE("small sweep runs every cell in grid order") {
  const ActivationStore data = gen_gaussian(8, 1200, 4);
  SweepSpec spec;
  spec.ns = {16, 32};
  spec.ks = {2, 4};
  spec.seeds = {0, 1};
  spec.workers = 2;
  AeConfig ae;
  TrainConfig tc;
  tc.batch_size = 64;
  tc.token_budget = 64 * 20;
  tc.eval_every = 10;
  const SweepResult r = run_sweep(spec, ae, tc, data);
  REQUIRE(r.rows.size() == 8);
  CHECK(r.rows[0].n == 16);
  CHECK(r.rows[0].k == 2);
  CHECK(r.rows[1].seed == 1);
  CHECK(r.rows[7].n == 32);
  CHECK(r.rows[7].k == 4);
  CHECK(r.curves.size() == 8);
  for (const auto& row : r.rows) {
    CHECK(std::isfinite(row.val_nmse));
    CHECK(row.compute_proxy == doctest::Approx(compute_proxy(8, row.n, row.tokens)));
  }
  spec.workers = 1;
  const SweepResult s = run_sweep(spec, ae, tc, data);
  for (std::size_t i = 0; i < 8; ++i) CHECK(s.rows[i].val_nmse == r.rows[i].val_nmse);
}
