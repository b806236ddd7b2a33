#include "sae/scaling.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/Dense>

#include "sae/error.hpp"

namespace sae {

namespace {

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
};

LineFit fit_line(const std::vector<double>& u, const std::vector<double>& v) {
  const double m = static_cast<double>(u.size());
  double su = 0, sv = 0, suu = 0, suv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    su += u[i];
    sv += v[i];
    suu += u[i] * u[i];
    suv += u[i] * v[i];
  }
  const double den = m * suu - su * su;
  LineFit f;
  if (den <= 0.0) {
    f.intercept = sv / m;
    return f;
  }
  f.slope = (m * suv - su * sv) / den;
  f.intercept = (sv - f.slope * su) / m;
  return f;
}

double power_rms(std::span<const double> x, std::span<const double> y, double la, double beta, double e) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std::exp(la + beta * std::log(x[i])) + e;
    const double r = std::log(y[i]) - std::log(f);
    s += r * r;
  }
  return std::sqrt(s / static_cast<double>(x.size()));
}

// Levenberg-Marquardt on residuals r(theta) with Jacobian J. `accept` vetoes
// parameter vectors outside the feasible set.
template <typename Residual, typename Accept>
Eigen::VectorXd levenberg_marquardt(Eigen::VectorXd theta, Residual&& residual, Accept&& accept, int max_iter = 500) {
  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  residual(theta, r, &J);
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd A = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd Ad = A;
      for (Eigen::Index i = 0; i < A.rows(); ++i) Ad(i, i) += lambda * std::max(A(i, i), 1e-12);
      const Eigen::VectorXd step = Ad.ldlt().solve(-g);
      const Eigen::VectorXd cand = theta + step;
      if (!step.allFinite() || !accept(cand)) {
        lambda *= 10.0;
        continue;
      }
      Eigen::VectorXd rc;
      residual(cand, rc, nullptr);
      const double c = rc.squaredNorm();
      if (std::isfinite(c) && c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        theta = cand;
        cost = c;
        residual(theta, r, &J);
        lambda = std::max(lambda * 0.3, 1e-12);
        improved = true;
        if (rel < 1e-14) return theta;
        break;
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  return theta;
}

}  // namespace

double PowerLawFit::operator()(double x) const { return alpha * std::pow(x, beta) + e; }

PowerLawFit fit_power_law(std::span<const double> x, std::span<const double> y, bool with_irreducible) {
  require(x.size() == y.size(), "fit_power_law: x and y lengths differ");
  const std::size_t need = with_irreducible ? 4 : 3;
  require(x.size() >= need, "fit_power_law: need at least " + std::to_string(need) + " points, got " +
                                std::to_string(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    require(x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i]) && std::isfinite(y[i]),
            "fit_power_law: x and y must be positive and finite");
  std::vector<double> lx(x.size()), ly(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) lx[i] = std::log(x[i]);

  PowerLawFit best;
  best.points = x.size();
  best.with_irreducible = with_irreducible;
  auto try_e = [&](double e) {
    for (std::size_t i = 0; i < y.size(); ++i) ly[i] = std::log(y[i] - e);
    const LineFit lf = fit_line(lx, ly);
    const double rms = power_rms(x, y, lf.intercept, lf.slope, e);
    return std::tuple{lf, rms};
  };
  const double ymin = *std::min_element(y.begin(), y.end());
  double la = 0, beta = 0, e = 0, rms = std::numeric_limits<double>::infinity();
  {
    auto [lf, r] = try_e(0.0);
    la = lf.intercept;
    beta = lf.slope;
    rms = r;
  }
  if (!with_irreducible) {
    best.alpha = std::exp(la);
    best.beta = beta;
    best.log_rms = rms;
    return best;
  }
  const double e_hi = 0.99 * ymin;
  for (int j = 0; j < 199; ++j) {
    const double cand = e_hi * std::pow(10.0, -6.0 * (1.0 - j / 198.0));
    auto [lf, r] = try_e(cand);
    if (r < rms) {
      la = lf.intercept;
      beta = lf.slope;
      e = cand;
      rms = r;
    }
  }

  const Eigen::Index m = static_cast<Eigen::Index>(x.size());
  auto residual = [&](const Eigen::VectorXd& th, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    r.resize(m);
    if (J) J->resize(m, 3);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double p = std::exp(th[0] + th[1] * lx[i]);
      const double f = p + th[2];
      r[i] = std::log(f) - std::log(y[i]);
      if (J) {
        (*J)(i, 0) = p / f;
        (*J)(i, 1) = p * lx[i] / f;
        (*J)(i, 2) = 1.0 / f;
      }
    }
  };
  // A polish step that puts e at or above any observation is rejected.
  auto accept = [&](const Eigen::VectorXd& th) { return th[2] >= 0.0 && th[2] < ymin; };
  Eigen::VectorXd th(3);
  th << la, beta, e;
  th = levenberg_marquardt(th, residual, accept);
  best.alpha = std::exp(th[0]);
  best.beta = th[1];
  best.e = th[2];
  best.log_rms = power_rms(x, y, th[0], th[1], th[2]);
  return best;
}

double JointFit::operator()(double n, double k) const {
  const double lk = std::log(k), ln = std::log(n);
  return std::exp(alpha + beta_k * lk + beta_n * ln + gamma * lk * ln) + std::exp(zeta + eta * lk);
}

JointFit fit_joint(std::span<const JointPoint> pts) {
  std::set<double> ns, ks;
  for (const auto& p : pts) {
    require(p.n > 0 && p.k > 0 && p.loss > 0 && std::isfinite(p.loss), "fit_joint: n, k and loss must be positive");
    ns.insert(p.n);
    ks.insert(p.k);
  }
  if (pts.size() < 8 || ns.size() < 2 || ks.size() < 2)
    throw InvalidArgument("fit_joint: underdetermined (need >= 8 points spanning >= 2 values of n and of k; got " +
                          std::to_string(pts.size()) + " points, " + std::to_string(ns.size()) + " n values, " +
                          std::to_string(ks.size()) + " k values)");

  // Per-k power laws in n seed the six parameters.
  std::map<double, std::pair<std::vector<double>, std::vector<double>>> by_k;
  for (const auto& p : pts) {
    by_k[p.k].first.push_back(p.n);
    by_k[p.k].second.push_back(p.loss);
  }
  std::vector<double> lks, las, betas, les;
  double lmin = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) lmin = std::min(lmin, p.loss);
  for (const auto& [k, xy] : by_k) {
    std::set<double> distinct(xy.first.begin(), xy.first.end());
    if (distinct.size() < 2) continue;
    const bool irr = xy.first.size() >= 4 && distinct.size() >= 3;
    const PowerLawFit f = fit_power_law(xy.first, xy.second, irr);
    lks.push_back(std::log(k));
    las.push_back(std::log(f.alpha));
    betas.push_back(f.beta);
    const double e_floor = 0.05 * *std::min_element(xy.second.begin(), xy.second.end());
    les.push_back(std::log(std::max(f.e, e_floor)));
  }
  Eigen::VectorXd th = Eigen::VectorXd::Zero(6);
  if (lks.size() >= 2) {
    const LineFit a = fit_line(lks, las), b = fit_line(lks, betas), c = fit_line(lks, les);
    th << a.intercept, a.slope, b.intercept, b.slope, c.intercept, c.slope;
  } else {
    th << std::log(0.5 * lmin), 0, 0, 0, std::log(0.5 * lmin), 0;
  }

  const Eigen::Index m = static_cast<Eigen::Index>(pts.size());
  auto residual = [&](const Eigen::VectorXd& t, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    r.resize(m);
    if (J) J->resize(m, 6);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double lk = std::log(pts[i].k), ln = std::log(pts[i].n);
      const double A = t[0] + t[1] * lk + t[2] * ln + t[3] * lk * ln;
      const double B = t[4] + t[5] * lk;
      const double mx = std::max(A, B);
      const double ea = std::exp(A - mx), eb = std::exp(B - mx);
      r[i] = mx + std::log(ea + eb) - std::log(pts[i].loss);
      if (J) {
        const double wa = ea / (ea + eb), wb = eb / (ea + eb);
        (*J)(i, 0) = wa;
        (*J)(i, 1) = wa * lk;
        (*J)(i, 2) = wa * ln;
        (*J)(i, 3) = wa * lk * ln;
        (*J)(i, 4) = wb;
        (*J)(i, 5) = wb * lk;
      }
    }
  };
  th = levenberg_marquardt(th, residual, [](const Eigen::VectorXd& t) { return t.allFinite(); }, 2000);
  JointFit f;
  f.alpha = th[0];
  f.beta_k = th[1];
  f.beta_n = th[2];
  f.gamma = th[3];
  f.zeta = th[4];
  f.eta = th[5];
  f.points = pts.size();
  Eigen::VectorXd r;
  residual(th, r, nullptr);
  f.log_rms = std::sqrt(r.squaredNorm() / static_cast<double>(m));
  return f;
}

double compute_proxy(std::size_t d, std::size_t n, std::uint64_t tokens) {
  return 6.0 * static_cast<double>(d) * static_cast<double>(n) * static_cast<double>(tokens);
}

bool is_diverged(const SweepRow& r) { return !std::isfinite(r.val_nmse) || r.val_nmse > kDivergedNmse; }

SweepResult run_sweep(const SweepSpec& spec, const AeConfig& base_ae, const TrainConfig& base_train,
                      const ActivationStore& data) {
  require(!spec.ns.empty() && !spec.ks.empty() && !spec.seeds.empty(), "sweep: n, k and seed grids must be nonempty");
  struct Cell {
    std::size_t n, k;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t n : spec.ns)
    for (std::size_t k : spec.ks)
      for (std::uint64_t s : spec.seeds) cells.push_back({n, k, s});

  SweepResult out;
  out.rows.resize(cells.size());
  out.curves.resize(cells.size());
  std::vector<std::string> notes(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      const Cell& c = cells[i];
      AeConfig ae = base_ae;
      ae.n = c.n;
      ae.k = c.k;
      TrainConfig tc = base_train;
      tc.seed = c.seed;
      tc.verbose = false;
      SweepRow& row = out.rows[i];
      row.n = c.n;
      row.k = c.k;
      row.seed = c.seed;
      row.lr = tc.lr_rule ? lr_for_n(*tc.lr_rule, c.n) : tc.lr;
      SweepCurve& curve = out.curves[i];
      curve.n = c.n;
      curve.k = c.k;
      curve.seed = c.seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const TrainResult res = train(ae, tc, data);
        row.tokens = res.tokens_seen;
        row.compute_proxy = compute_proxy(data.d(), c.n, res.tokens_seen);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& rec : res.log.records) {
          best = std::min(best, rec.val_nmse);
          curve.compute.push_back(compute_proxy(data.d(), c.n, rec.tokens_seen));
          curve.best_nmse.push_back(best);
        }
        row.val_nmse = best;
        if (!res.log.records.empty()) {
          row.dead_frac = res.log.records.back().dead_frac;
          row.l0 = res.log.records.back().l0;
        }
      } catch (const NumericalError& e) {
        row.val_nmse = std::numeric_limits<double>::infinity();
        notes[i] = std::string("numerical failure: ") + e.what();
      }
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (is_diverged(row) && notes[i].empty()) notes[i] = "diverged (val_nmse > 2)";
    }
  };
  const std::size_t W = std::clamp<std::size_t>(spec.workers, 1, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < W; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!notes[i].empty())
      out.report.push_back("n=" + std::to_string(cells[i].n) + " k=" + std::to_string(cells[i].k) +
                           " seed=" + std::to_string(cells[i].seed) + ": " + notes[i]);
  return out;
}

std::vector<double> compute_frontier(std::span<const SweepCurve> curves, std::span<const double> grid) {
  std::vector<double> out(grid.size(), std::numeric_limits<double>::infinity());
  for (const auto& c : curves) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      // Last checkpoint at or below the budget.
      auto it = std::upper_bound(c.compute.begin(), c.compute.end(), grid[g]);
      if (it == c.compute.begin()) continue;
      const std::size_t j = static_cast<std::size_t>(it - c.compute.begin()) - 1;
      out[g] = std::min(out[g], c.best_nmse[j]);
    }
  }
  return out;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "n,k,lr,seed,tokens,compute_proxy,val_nmse,dead_frac,L0,wall_seconds\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%llu,%llu,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.n, r.k, r.lr,
                  static_cast<unsigned long long>(r.seed), static_cast<unsigned long long>(r.tokens), r.compute_proxy,
                  r.val_nmse, r.dead_frac, r.l0, r.wall_seconds);
    os << buf;
  }
}

std::vector<SweepRow> read_sweep_csv(std::istream& is) {
  static const char* kCols[] = {"n", "k", "lr", "seed", "tokens", "compute_proxy", "val_nmse", "dead_frac", "L0",
                                "wall_seconds"};
  std::string line;
  if (!std::getline(is, line)) throw FormatError("sweep csv: empty input");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) header.push_back(f);
  }
  std::vector<int> col(std::size(kCols), -1);
  for (std::size_t c = 0; c < std::size(kCols); ++c)
    for (std::size_t h = 0; h < header.size(); ++h)
      if (header[h] == kCols[c]) col[c] = static_cast<int>(h);
  for (std::size_t c = 0; c < std::size(kCols); ++c)
    if (col[c] < 0) throw FormatError(std::string("sweep csv: missing column '") + kCols[c] + "'");

  std::vector<SweepRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string s; std::getline(ss, s, ',');) f.push_back(s);
    if (f.size() != header.size())
      throw FormatError("sweep csv: line " + std::to_string(lineno) + " has " + std::to_string(f.size()) +
                        " fields, expected " + std::to_string(header.size()));
    auto num = [&](std::size_t c) {
      const std::string& s = f[static_cast<std::size_t>(col[c])];
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || *end != '\0')
        throw FormatError("sweep csv: line " + std::to_string(lineno) + " column '" + kCols[c] + "' is not a number");
      return v;
    };
    auto uint = [&](std::size_t c) {
      const std::string& s = f[static_cast<std::size_t>(col[c])];
      char* end = nullptr;
      const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
      if (s.empty() || *end != '\0')
        throw FormatError("sweep csv: line " + std::to_string(lineno) + " column '" + kCols[c] +
                          "' is not an unsigned integer");
      return static_cast<std::uint64_t>(v);
    };
    SweepRow r;
    r.n = static_cast<std::size_t>(uint(0));
    r.k = static_cast<std::size_t>(uint(1));
    r.lr = num(2);
    r.seed = uint(3);
    r.tokens = uint(4);
    r.compute_proxy = num(5);
    r.val_nmse = num(6);
    r.dead_frac = num(7);
    r.l0 = num(8);
    r.wall_seconds = num(9);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace sae
