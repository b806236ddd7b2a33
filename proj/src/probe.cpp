#include <algorithm>
#include <cmath>

#include "sae/error.hpp"
#include "sae/eval.hpp"
#include "sae/simd.hpp"

namespace sae {

namespace {

double softplus(double u) { return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

double mean_ce(std::span<const float> z, std::span<const std::uint8_t> y, double w, double b) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double u = w * z[i] + b;
    s += softplus(u) - (y[i] ? u : 0.0);
  }
  return s / static_cast<double>(z.size());
}

}  // namespace

LogisticFit fit_logistic_1d(std::span<const float> z, std::span<const std::uint8_t> y, const ProbeOptions& opt) {
  require(z.size() == y.size() && !z.empty(), "probe: feature and label lengths differ or are empty");
  std::size_t pos = 0;
  for (auto v : y) pos += v ? 1 : 0;
  require(pos > 0 && pos < y.size(), "probe: task needs both classes");
  const double N = static_cast<double>(z.size());
  const double p1 = static_cast<double>(pos) / N;

  LogisticFit f;
  f.w = 0.0;
  f.b = std::log(p1 / (1.0 - p1));
  f.ce = mean_ce(z, y, f.w, f.b);
  for (int it = 0; it < opt.max_iter; ++it) {
    double gw = 0.0, gb = 0.0, hww = 0.0, hwb = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double zi = z[i];
      const double s = sigmoid(f.w * zi + f.b);
      const double r = s - (y[i] ? 1.0 : 0.0);
      const double h = s * (1.0 - s);
      gw += r * zi;
      gb += r;
      hww += h * zi * zi;
      hwb += h * zi;
      hbb += h;
    }
    gw /= N;
    gb /= N;
    hww = hww / N + opt.damping;
    hwb /= N;
    hbb = hbb / N + opt.damping;
    const double det = hww * hbb - hwb * hwb;
    if (!(det > 0.0) || !std::isfinite(det)) break;
    const double dw = -(hbb * gw - hwb * gb) / det;
    const double db = -(hww * gb - hwb * gw) / det;
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      const double w = std::clamp(f.w + t * dw, -opt.w_cap, opt.w_cap);
      const double b = f.b + t * db;
      const double ce = mean_ce(z, y, w, b);
      if (ce < f.ce) {
        f.w = w;
        f.b = b;
        f.ce = ce;
        accepted = true;
        break;
      }
    }
    f.iters = it + 1;
    if (!accepted || std::abs(t * dw) + std::abs(t * db) < 1e-12) break;
  }
  return f;
}

ProbeResult probe_metric(const DenseMatrix& pre, const ProbeTask& task, bool keep_per_latent,
                         const ProbeOptions& opt) {
  require(pre.rows == task.labels.size(), "probe: " + task.name + " has " + std::to_string(task.labels.size()) +
                                              " labels for " + std::to_string(pre.rows) + " rows");
  std::size_t pos = 0;
  for (auto v : task.labels) pos += v ? 1 : 0;
  if (pos == 0 || pos == task.labels.size())
    throw InvalidArgument("probe: task '" + task.name + "' has a single class");
  const double p1 = static_cast<double>(pos) / static_cast<double>(task.labels.size());

  ProbeResult res;
  res.task = task.name;
  res.constant_ce = -(p1 * std::log(p1) + (1.0 - p1) * std::log(1.0 - p1));
  res.best_ce = std::numeric_limits<double>::infinity();
  if (keep_per_latent) res.per_latent_ce.resize(pre.cols);
  std::vector<float> col(pre.rows);
  for (std::size_t j = 0; j < pre.cols; ++j) {
    for (std::size_t r = 0; r < pre.rows; ++r) col[r] = pre(r, j);
    const LogisticFit f = fit_logistic_1d(col, task.labels, opt);
    if (keep_per_latent) res.per_latent_ce[j] = f.ce;
    if (f.ce < res.best_ce) {
      res.best_ce = f.ce;
      res.best_latent = j;
      res.w = f.w;
      res.b = f.b;
    }
  }
  return res;
}

DenseMatrix encoder_preact_matrix(const AutoencoderParams& p, const DenseMatrix& X) {
  DenseMatrix pre;
  encoder_preacts(p, X, pre);
  return pre;
}

}  // namespace sae
