#pragma once

// Power-law fits (with an optional irreducible term), the joint L(n, k) law and
// sweep orchestration.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sae/autoencoder.hpp"
#include "sae/data.hpp"
#include "sae/trainer.hpp"

namespace sae {

// y = alpha * x^beta + e
struct PowerLawFit {
  double alpha = 0.0;
  double beta = 0.0;
  double e = 0.0;
  double log_rms = 0.0;  // RMS of log(y) - log(fit)
  bool with_irreducible = false;
  std::size_t points = 0;

  double operator()(double x) const;
};

PowerLawFit fit_power_law(std::span<const double> x, std::span<const double> y, bool with_irreducible);

// L(n,k) = exp(alpha + beta_k ln k + beta_n ln n + gamma ln k ln n) + exp(zeta + eta ln k)
struct JointFit {
  double alpha = 0.0;
  double beta_k = 0.0;
  double beta_n = 0.0;
  double gamma = 0.0;
  double zeta = 0.0;
  double eta = 0.0;
  double log_rms = 0.0;
  std::size_t points = 0;

  double operator()(double n, double k) const;
};

struct JointPoint {
  double n = 0.0;
  double k = 0.0;
  double loss = 0.0;
};

JointFit fit_joint(std::span<const JointPoint> pts);

// ---- sweeps ----

struct SweepSpec {
  std::vector<std::size_t> ns;
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
};

// Fixed CSV columns: n,k,lr,seed,tokens,compute_proxy,val_nmse,dead_frac,L0,wall_seconds
struct SweepRow {
  std::size_t n = 0;
  std::size_t k = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t tokens = 0;
  double compute_proxy = 0.0;  // 6 d n tokens
  double val_nmse = 0.0;
  double dead_frac = 0.0;
  double l0 = 0.0;
  double wall_seconds = 0.0;
};

// Best-so-far validation loss of one run against compute.
struct SweepCurve {
  std::size_t n = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<double> compute;
  std::vector<double> best_nmse;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepCurve> curves;
  std::vector<std::string> report;  // diverged / failed cells
};

inline constexpr double kDivergedNmse = 2.0;

double compute_proxy(std::size_t d, std::size_t n, std::uint64_t tokens);
bool is_diverged(const SweepRow& r);

// Cells run on `workers` threads; rows come back in (n, k, seed) grid order
// regardless of scheduling.
SweepResult run_sweep(const SweepSpec& spec, const AeConfig& base_ae, const TrainConfig& base_train,
                      const ActivationStore& data);

// Lower envelope of best-so-far loss over all runs at each compute value in grid.
std::vector<double> compute_frontier(std::span<const SweepCurve> curves, std::span<const double> grid);

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);
std::vector<SweepRow> read_sweep_csv(std::istream& is);

}  // namespace sae
