#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sae/bench.hpp"
#include "sae/checkpoint.hpp"
#include "sae/config.hpp"
#include "sae/data.hpp"
#include "sae/error.hpp"
#include "sae/eval.hpp"
#include "sae/report.hpp"
#include "sae/scaling.hpp"
#include "sae/subject.hpp"
#include "sae/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace sae;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string data, tokens, labels, subject;
  std::optional<std::size_t> n, k, batch;
  std::optional<double> lr;
  std::optional<std::uint64_t> budget;
  std::size_t threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run config");
  app->add_option("--seed", c.seed, "Seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--data", c.data, "Activation dump");
  app->add_option("--tokens", c.tokens, "Token dump");
  app->add_option("--labels", c.labels, "Label dump");
  app->add_option("--subject", c.subject, "Subject model file or random:SEED:SPEC");
  app->add_option("--n", c.n, "Latent count");
  app->add_option("--k", c.k, "Active latents");
  app->add_option("--lr", c.lr, "Learning rate");
  app->add_option("--batch", c.batch, "Batch size");
  app->add_option("--budget-tokens", c.budget, "Training token budget");
  app->add_option("--threads", c.threads, "Worker threads");
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) rc = load_run_config(c.config);
  if (c.seed) rc.train.seed = *c.seed;
  if (!c.data.empty()) rc.paths.data = c.data;
  if (!c.tokens.empty()) rc.paths.tokens = c.tokens;
  if (!c.labels.empty()) rc.paths.labels = c.labels;
  if (!c.subject.empty()) rc.subject = c.subject;
  if (c.n) rc.ae.n = *c.n;
  if (c.k) rc.ae.k = *c.k;
  if (c.lr) rc.train.lr = *c.lr;
  if (c.batch) rc.train.batch_size = *c.batch;
  if (c.budget) rc.train.token_budget = *c.budget;
  return rc;
}

std::size_t thread_count(const Common& c) {
  if (const char* env = std::getenv("SAE_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (*env == '\0' || *end != '\0' || v == 0) throw InvalidArgument("SAE_THREADS must be a positive integer");
    return v;
  }
  return std::max<std::size_t>(1, c.threads);
}

fs::path prepare_out(const Common& c, const RunConfig& rc, const ordered_json& command) {
  const fs::path out(c.out);
  fs::create_directories(out);
  ordered_json j = to_json(rc);
  j["command"] = command;
  std::ofstream(out / "resolved-config.json") << j.dump(2) << "\n";
  return out;
}

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream os(p);
  if (!os) throw InvalidArgument("cannot write " + p.string());
  os << j.dump(2) << "\n";
}

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ActivationStore load_activations(const RunConfig& rc) {
  if (!rc.paths.data.empty()) return load_actdump(rc.paths.data);
  if (!rc.subject.empty() && !rc.paths.tokens.empty())
    return capture_activations(load_subject_spec(rc.subject), load_tokdump(rc.paths.tokens));
  throw InvalidArgument("no activations: pass --data, or --subject with --tokens");
}

SubjectModel need_subject(const RunConfig& rc) {
  if (rc.subject.empty()) throw InvalidArgument("this command needs --subject");
  return load_subject_spec(rc.subject);
}

SequenceStore need_tokens(const RunConfig& rc) {
  if (rc.paths.tokens.empty()) throw InvalidArgument("this command needs --tokens");
  return load_tokdump(rc.paths.tokens);
}

// Normalized validation rows (the final 5% of the store), optionally capped.
DenseMatrix eval_rows(const ActivationStore& store, std::size_t cap) {
  const std::size_t v = validation_rows(store.rows());
  std::size_t begin = store.rows() - v;
  if (store.seq_len > 0) begin = (begin + store.seq_len - 1) / store.seq_len * store.seq_len;
  if (begin >= store.rows()) begin = store.rows() - v;
  std::size_t count = store.rows() - begin;
  if (cap > 0) count = std::min(count, cap);
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  DenseMatrix X;
  gather_rows(store.acts, rows, X);
  normalize_rows(X);
  return X;
}

struct Loaded {
  Checkpoint ck;
  std::string which;
  const AutoencoderParams& params() const { return which == "ema" ? *ck.ema : ck.params; }
};

// "best" picks the lower validation NMSE of raw and EMA weights.
Loaded load_model(const std::string& path, const std::string& weights, const DenseMatrix* X) {
  if (path.empty()) throw InvalidArgument("this command needs --checkpoint");
  Loaded l{load_checkpoint(path), "raw"};
  if (weights == "raw") return l;
  if (weights == "ema") {
    if (!l.ck.ema) throw InvalidArgument("checkpoint has no EMA weights");
    l.which = "ema";
    return l;
  }
  if (weights != "best") throw InvalidArgument("--weights must be raw, ema or best");
  if (l.ck.ema && X && X->rows > 0 &&
      evaluate(*l.ck.ema, l.ck.config, *X).nmse < evaluate(l.ck.params, l.ck.config, *X).nmse)
    l.which = "ema";
  return l;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw InvalidArgument("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---- subcommands ----

int cmd_gen_data(const Common& c, const std::string& kind, const DictDataConfig& dcfg, std::size_t seqs,
                 std::size_t seq_len) {
  RunConfig rc = resolve(c);
  ordered_json cmd = {{"name", "gen-data"}, {"kind", kind}};
  const fs::path out = prepare_out(c, rc, cmd);
  const std::uint64_t seed = rc.train.seed;
  ordered_json summary;
  if (kind == "dictionary") {
    DictDataConfig d = dcfg;
    d.seed = seed;
    const DictData dd = gen_dictionary_data(d);
    save_actdump(out / "acts.bin", dd.store);
    ActivationStore dict{dd.dictionary, 0};
    save_actdump(out / "dictionary.bin", dict);
    std::vector<std::uint8_t> lab(dd.codes.size());
    for (std::size_t r = 0; r < dd.codes.size(); ++r)
      for (const auto& e : dd.codes[r].entries)
        if (e.index == 0) lab[r] = 1;
    save_labeldump(out / "labels.bin", lab);
    summary = {{"kind", kind}, {"rows", dd.store.rows()}, {"d", d.d}, {"n_true", d.n_true}, {"k_true", d.k_true}};
  } else if (kind == "gaussian") {
    const ActivationStore s = gen_gaussian(dcfg.d, dcfg.rows, seed);
    save_actdump(out / "acts.bin", s);
    summary = {{"kind", kind}, {"rows", s.rows()}, {"d", s.d()}};
  } else if (kind == "subject") {
    const SubjectModel m = need_subject(rc);
    const SequenceStore ss = random_sequences(m.cfg.vocab, seq_len, seqs, seed);
    save_tokdump(out / "tokens.bin", ss);
    const ActivationStore acts = capture_activations(m, ss);
    save_actdump(out / "acts.bin", acts);
    // Planted label: the current token is in the lower half of the vocabulary.
    std::vector<std::uint8_t> lab(ss.tokens.size());
    for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = ss.tokens[i] < m.cfg.vocab / 2 ? 1 : 0;
    save_labeldump(out / "labels.bin", lab);
    save_subject(out / "subject.bin", m);
    summary = {{"kind", kind}, {"rows", acts.rows()}, {"d", acts.d()}, {"seqs", seqs}, {"seq_len", seq_len}};
  } else {
    throw InvalidArgument("--kind must be dictionary, gaussian or subject");
  }
  write_json(out / "gen-data.json", summary);
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "train"}});
  const ActivationStore data = load_activations(rc);
  if (rc.ae.n == 0) throw InvalidArgument("ae.n must be set (--n)");
  TrainConfig tc = rc.train;
  TrainResult res = train(rc.ae, tc, data, [&](const TrainRecord& r) {
    if (tc.verbose)
      std::fprintf(stderr, "step %llu tokens %llu val_nmse %.5f dead %.4f\n", static_cast<unsigned long long>(r.step),
                   static_cast<unsigned long long>(r.tokens_seen), r.val_nmse, r.dead_frac);
  });
  {
    std::ofstream os(out / "trainlog.csv");
    write_trainlog_csv(os, res.log);
  }
  {
    std::ofstream os(out / "trainlog.jsonl");
    write_trainlog_jsonl(os, res.log);
  }
  Checkpoint ck;
  ck.config = res.config;
  ck.params = res.params;
  ck.ema = res.ema;
  ck.adam = res.adam;
  ck.step = res.adam.step;
  ck.tokens_seen = res.tokens_seen;
  ck.loss_baseline = res.loss_baseline;
  ck.extra = {{"train", to_json(tc)}};
  save_checkpoint(out / "checkpoint.bin", ck);
  ordered_json s;
  const auto& last = res.log.records.back();
  s["tokens_seen"] = res.tokens_seen;
  s["steps"] = last.step;
  s["val_nmse"] = last.val_nmse;
  double best = last.val_nmse;
  for (const auto& r : res.log.records) best = std::min(best, r.val_nmse);
  s["best_val_nmse"] = best;
  s["dead_frac"] = last.dead_frac;
  s["l0"] = last.l0;
  s["converged"] = res.converged;
  s["skipped_steps"] = res.log.skipped_steps;
  s["resampled_latents"] = res.log.resampled_latents;
  write_json(out / "summary.json", s);
  std::cout << s.dump() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpath, const std::string& weights) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "eval"}, {"checkpoint", ckpath}, {"weights", weights}});
  const ActivationStore data = load_activations(rc);
  const DenseMatrix X = eval_rows(data, rc.metrics.eval_rows);
  const Loaded m = load_model(ckpath, weights, &X);
  const auto& p = m.params();
  const auto& cfg = m.ck.config;
  if (p.d != data.d()) throw InvalidArgument("checkpoint d != data d");
  ordered_json j;
  j["weights"] = m.which;
  j["rows"] = X.rows;
  const BatchEval be = evaluate(p, cfg, X);
  j["nmse"] = be.nmse;
  j["mse"] = be.mse;
  j["l0"] = be.l0;
  const DensityStats ds = density_stats(p, cfg, X);
  j["never_fired"] = ds.never_fired;
  j["dense_solution_score"] = ds.dense_solution_score;
  j["density_histogram"] = {{"log10_bins", ds.log10_bins}, {"counts", ds.histogram}};
  {
    std::ofstream os(out / "density.csv");
    os << "latent,density,importance\n";
    char buf[128];
    for (std::size_t i = 0; i < ds.density.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, ds.density[i], ds.importance[i]);
      os << buf;
    }
  }
  if (data.seq_len > 0 && X.rows % data.seq_len == 0 && X.rows / data.seq_len >= 2) {
    const auto pos = mse_by_position(p, cfg, X, data.seq_len);
    j["nmse_by_position"] = pos;
  }
  if (!rc.subject.empty() && !rc.paths.tokens.empty()) {
    const SubjectModel sm = need_subject(rc);
    const SequenceStore seqs = need_tokens(rc);
    const Splice s{SpliceMode::reconstruct, &p, &cfg, 0, {}, {}, {}};
    const DownstreamMetrics dm = downstream_metrics(sm, s, seqs, rc.metrics.ablation_sequences);
    j["downstream"] = {{"ce_clean", dm.ce_clean}, {"ce_spliced", dm.ce_spliced}, {"ce_zero", dm.ce_zero},
                       {"kl", dm.kl},         {"delta_ce", dm.delta_ce},      {"fidelity", opt(dm.fidelity)}};
  }
  write_json(out / "eval.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const std::vector<std::size_t>& ns, const std::vector<std::size_t>& ks,
              const std::vector<std::uint64_t>& seeds, double lr_ref, double n_ref) {
  RunConfig rc = resolve(c);
  const std::size_t workers = thread_count(c);
  const fs::path out = prepare_out(c, rc, {{"name", "sweep"}, {"ns", ns}, {"ks", ks}, {"seeds", seeds},
                                          {"lr_ref", lr_ref}, {"n_ref", n_ref}, {"workers", workers}});
  const ActivationStore data = load_activations(rc);
  SweepSpec spec;
  spec.ns = ns;
  spec.ks = ks.empty() ? std::vector<std::size_t>{rc.ae.k} : ks;
  spec.seeds = seeds.empty() ? std::vector<std::uint64_t>{rc.train.seed} : seeds;
  spec.workers = workers;
  TrainConfig tc = rc.train;
  if (lr_ref > 0.0) tc.lr_rule = LrRule{lr_ref, n_ref > 0.0 ? n_ref : static_cast<double>(ns.front())};
  const SweepResult res = run_sweep(spec, rc.ae, tc, data);
  {
    std::ofstream os(out / "sweep.csv");
    write_sweep_csv(os, res.rows);
  }
  {
    std::ofstream os(out / "curves.csv");
    os << "n,k,seed,compute_proxy,best_val_nmse\n";
    char buf[256];
    for (const auto& cv : res.curves)
      for (std::size_t i = 0; i < cv.compute.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%llu,%.9g,%.9g\n", cv.n, cv.k, static_cast<unsigned long long>(cv.seed),
                      cv.compute[i], cv.best_nmse[i]);
        os << buf;
      }
  }
  for (const auto& line : res.report) std::cerr << "excluded: " << line << "\n";
  std::ofstream(out / "sweep-report.txt") << [&] {
    std::string s;
    for (const auto& l : res.report) s += l + "\n";
    return s;
  }();
  write_sweep_csv(std::cout, res.rows);
  return 0;
}

int cmd_fit(const Common& c, const std::string& input, bool irreducible, bool joint, const std::string& xcol,
            std::size_t drop_first) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "fit"}, {"input", input}, {"irreducible", irreducible},
                                          {"joint", joint}, {"x", xcol}, {"drop_first", drop_first}});
  std::ifstream is(input);
  if (!is) throw InvalidArgument("cannot read " + input);
  const auto rows = read_sweep_csv(is);
  std::vector<SweepRow> kept;
  ordered_json j;
  ordered_json excluded = ordered_json::array();
  for (const auto& r : rows) {
    if (is_diverged(r)) {
      std::cerr << "excluded diverged run n=" << r.n << " k=" << r.k << " seed=" << r.seed << "\n";
      excluded.push_back({{"n", r.n}, {"k", r.k}, {"seed", r.seed}, {"val_nmse", r.val_nmse}});
    } else {
      kept.push_back(r);
    }
  }
  j["excluded"] = excluded;
  auto xval = [&](const SweepRow& r) -> double {
    if (xcol == "n") return static_cast<double>(r.n);
    if (xcol == "compute") return r.compute_proxy;
    if (xcol == "tokens") return static_cast<double>(r.tokens);
    throw InvalidArgument("--x must be n, compute or tokens");
  };
  if (joint) {
    std::vector<JointPoint> pts;
    for (const auto& r : kept) pts.push_back({static_cast<double>(r.n), static_cast<double>(r.k), r.val_nmse});
    const JointFit f = fit_joint(pts);
    j["joint"] = {{"alpha", f.alpha}, {"beta_k", f.beta_k}, {"beta_n", f.beta_n}, {"gamma", f.gamma},
                  {"zeta", f.zeta},   {"eta", f.eta},       {"log_rms", f.log_rms}, {"points", f.points}};
  } else {
    // One fit per k, x sorted ascending; the smallest drop_first x values are dropped.
    std::map<std::size_t, std::vector<std::pair<double, double>>> by_k;
    for (const auto& r : kept) by_k[r.k].push_back({xval(r), r.val_nmse});
    ordered_json fits = ordered_json::array();
    for (auto& [k, pts] : by_k) {
      std::sort(pts.begin(), pts.end());
      std::vector<double> x, y;
      for (std::size_t i = std::min(drop_first, pts.size()); i < pts.size(); ++i) {
        x.push_back(pts[i].first);
        y.push_back(pts[i].second);
      }
      const PowerLawFit f = fit_power_law(x, y, irreducible);
      fits.push_back({{"k", k}, {"alpha", f.alpha}, {"beta", f.beta}, {"e", f.e}, {"log_rms", f.log_rms},
                      {"points", f.points}});
    }
    j["x"] = xcol;
    j["fits"] = fits;
  }
  write_json(out / "fit.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_probe(const Common& c, const std::string& ckpath, const std::string& weights) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "probe"}, {"checkpoint", ckpath}, {"weights", weights}});
  const ActivationStore data = load_activations(rc);
  if (rc.paths.labels.empty()) throw InvalidArgument("probe needs --labels");
  ProbeTask task{fs::path(rc.paths.labels).stem().string(), load_labeldump(rc.paths.labels)};
  if (task.labels.size() != data.rows())
    throw InvalidArgument("labels have " + std::to_string(task.labels.size()) + " rows, data has " +
                          std::to_string(data.rows()));
  DenseMatrix X = data.acts;
  if (rc.metrics.eval_rows > 0 && rc.metrics.eval_rows < X.rows) {
    X.rows = rc.metrics.eval_rows;
    X.data.resize(X.rows * X.cols);
    task.labels.resize(X.rows);
  }
  normalize_rows(X);
  const Loaded m = load_model(ckpath, weights, nullptr);
  const ProbeResult r = probe_metric(encoder_preact_matrix(m.params(), X), task);
  ordered_json j = {{"task", r.task}, {"weights", m.which}, {"best_latent", r.best_latent}, {"best_ce", r.best_ce},
                    {"w", r.w},       {"b", r.b},            {"constant_ce", r.constant_ce}};
  write_json(out / "probe.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_n2g(const Common& c, const std::string& ckpath, const std::string& weights, std::vector<std::size_t> latents,
            std::size_t max_latents) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "n2g"}, {"checkpoint", ckpath}, {"weights", weights},
                                          {"latents", latents}, {"max_latents", max_latents}});
  const SubjectModel sm = need_subject(rc);
  const SequenceStore all = need_tokens(rc);
  const Loaded m = load_model(ckpath, weights, nullptr);
  const auto& p = m.params();
  const auto& cfg = m.ck.config;
  // First half builds explanations, second half scores them.
  const std::size_t half = std::max<std::size_t>(1, all.n_seqs() / 2);
  if (all.n_seqs() < 2) throw InvalidArgument("n2g needs at least 2 sequences");
  SequenceStore build{all.vocab, all.seq_len, {all.tokens.begin(), all.tokens.begin() + half * all.seq_len}};
  SequenceStore held{all.vocab, all.seq_len, {all.tokens.begin() + half * all.seq_len, all.tokens.end()}};
  const LatentTable tb = encode_sequences(sm, p, cfg, build);
  const LatentTable th = encode_sequences(sm, p, cfg, held);
  if (latents.empty()) {
    const std::size_t cap = max_latents ? std::min(max_latents, p.n) : p.n;
    for (std::size_t i = 0; i < cap; ++i) latents.push_back(i);
  }
  std::vector<N2GExplanation> exps;
  ordered_json per = ordered_json::array();
  N2GBuildOptions bo{rc.metrics.n2g_contexts, rc.metrics.pad_token, rc.train.seed};
  for (std::size_t l : latents) {
    if (l >= p.n) throw InvalidArgument("latent " + std::to_string(l) + " out of range");
    const auto id = static_cast<LatentId>(l);
    N2GExplanation ex = n2g_build(id, build, tb, make_latent_oracle(sm, p, cfg, id), bo);
    const ScaleFit sf = n2g_simulate_scale(ex, build, tb);
    ex.scale = sf.degenerate ? 0.0 : sf.scale;
    const N2GScores s = n2g_scores(ex, held, th);
    per.push_back({{"latent", l},
                   {"patterns", ex.patterns.size()},
                   {"empty", ex.empty},
                   {"scale", ex.scale},
                   {"recall", opt(s.recall)},
                   {"precision", opt(s.precision)},
                   {"f1", opt(s.f1)},
                   {"positives", s.positives},
                   {"predicted", s.predicted}});
    exps.push_back(std::move(ex));
  }
  const ExplanationCe ce =
      explanation_reconstruction(sm, p, cfg, n2g_simulator(exps, p.n), held, rc.metrics.ablation_sequences);
  ordered_json j = {{"weights", m.which},
                    {"latents", per},
                    {"explanation_ce",
                     {{"ce_clean", ce.ce_clean},
                      {"ce_reconstruct", ce.ce_reconstruct},
                      {"ce_zero", ce.ce_zero},
                      {"ce_explained", ce.ce_explained}}}};
  write_json(out / "n2g.json", j);
  std::cout << j["explanation_ce"].dump() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::string& ckpath, const std::string& weights, std::size_t random_dirs) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "ablate"}, {"checkpoint", ckpath}, {"weights", weights},
                                          {"random_directions", random_dirs}});
  const SubjectModel sm = need_subject(rc);
  const SequenceStore seqs = need_tokens(rc);
  AblationOptions ao;
  ao.T = rc.metrics.ablation_T;
  ao.positions = rc.metrics.ablation_positions;
  ao.max_sequences = rc.metrics.ablation_sequences;
  ao.max_per_position = rc.metrics.ablation_max_latents;
  ao.random_directions = random_dirs;
  ao.seed = rc.train.seed;
  auto pack = [](const AblationSparsityResult& r) {
    return ordered_json{{"mean", r.mean},
                        {"samples", r.values.size()},
                        {"T", r.T},
                        {"V", r.V},
                        {"degenerate", r.degenerate},
                        {"skipped_positions", r.skipped_positions}};
  };
  ordered_json j;
  if (!ckpath.empty()) {
    const Loaded m = load_model(ckpath, weights, nullptr);
    j["weights"] = m.which;
    j["latents"] = pack(ablation_sparsity(sm, m.params(), m.ck.config, seqs, ao));
  }
  j["channels"] = pack(ablation_sparsity_channels(sm, seqs, ao));
  j["random"] = pack(ablation_sparsity_random(sm, seqs, ao));
  j["reference_2_over_pi"] = 2.0 / M_PI;
  write_json(out / "ablate.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_refine(const Common& c, const std::string& ckpath, const std::string& weights) {
  RunConfig rc = resolve(c);
  const fs::path out = prepare_out(c, rc, {{"name", "refine"}, {"checkpoint", ckpath}, {"weights", weights}});
  const ActivationStore data = load_activations(rc);
  const DenseMatrix X = eval_rows(data, rc.metrics.eval_rows);
  const Loaded m = load_model(ckpath, weights, &X);
  const auto& p = m.params();
  const auto& cfg = m.ck.config;
  ShrinkageReport r = refine_activations(p, cfg, X, rc.metrics.refine_iters);
  if (!rc.subject.empty() && !rc.paths.tokens.empty()) {
    const SubjectModel sm = need_subject(rc);
    const SequenceStore seqs = need_tokens(rc);
    const Splice before{SpliceMode::reconstruct, &p, &cfg, 0, {}, {}, {}};
    Splice after{SpliceMode::custom, &p, &cfg, 0, {}, {}, {}};
    const std::size_t iters = rc.metrics.refine_iters;
    after.edit = [&](std::size_t, std::span<float> resid) {
      auto [xn, ns] = normalize_input(resid);
      const SparseVec z = refine_code(p, xn, encode(p, cfg, xn), iters);
      std::vector<float> y = decode(p, z);
      denormalize(y, ns);
      std::copy(y.begin(), y.end(), resid.begin());
    };
    r.delta_ce_before = downstream_metrics(sm, before, seqs, rc.metrics.ablation_sequences).delta_ce;
    r.delta_ce_after = downstream_metrics(sm, after, seqs, rc.metrics.ablation_sequences).delta_ce;
  }
  ordered_json j = {{"weights", m.which},
                    {"rows", r.rows},
                    {"mean_relative_change", r.mean_relative_change},
                    {"mse_before", r.mse_before},
                    {"mse_after", r.mse_after},
                    {"delta_ce_before", opt(r.delta_ce_before)},
                    {"delta_ce_after", opt(r.delta_ce_after)}};
  write_json(out / "refine.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_sweep_test_time(const Common& c, const std::string& ckpath, const std::string& weights,
                        std::vector<std::size_t> ks, std::vector<float> thetas) {
  RunConfig rc = resolve(c);
  if (ks.empty()) ks = rc.metrics.test_time_k;
  if (thetas.empty()) thetas = rc.metrics.jumprelu_theta;
  const fs::path out = prepare_out(c, rc, {{"name", "sweep-test-time"}, {"checkpoint", ckpath}, {"weights", weights},
                                          {"ks", ks}, {"thetas", thetas}});
  const ActivationStore data = load_activations(rc);
  const DenseMatrix X = eval_rows(data, rc.metrics.eval_rows);
  const Loaded m = load_model(ckpath, weights, &X);
  if (ks.empty() && thetas.empty()) {
    const std::size_t k = m.ck.config.k;
    for (std::size_t kk : {k / 2, k, 2 * k, 4 * k})
      if (kk >= 1 && kk <= m.params().n) ks.push_back(kk);
  }
  const auto pts = test_time_sweep(m.params(), m.ck.config, X, ks, thetas);
  std::ofstream os(out / "test_time.csv");
  os << "mode,param,l0,nmse\n";
  char buf[256];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g\n", p.mode.c_str(), p.param, p.l0, p.nmse);
    os << buf;
    std::cout << buf;
  }
  return 0;
}

int cmd_bench(const Common& c, const std::string& kernel, std::size_t d, std::size_t batch, std::size_t reps) {
  RunConfig rc = resolve(c);
  FlopQuery q;
  q.op = parse_kernel_op(kernel);
  q.d = d;
  q.n = c.n.value_or(4096);
  q.k = c.k.value_or(32);
  q.batch = batch;
  const fs::path out = prepare_out(c, rc, {{"name", "bench"}, {"kernel", kernel}, {"d", d}, {"n", q.n}, {"k", q.k},
                                          {"batch", batch}, {"reps", reps}});
  const BenchResult r = bench_kernel(q, reps, rc.train.seed);
  ordered_json j = {{"kernel", kernel},
                    {"d", q.d},
                    {"n", q.n},
                    {"k", q.k},
                    {"batch", q.batch},
                    {"dense_flops", r.flops.dense_flops},
                    {"sparse_flops", r.flops.sparse_flops},
                    {"flop_ratio", r.flops.ratio},
                    {"dense_seconds", r.dense_seconds},
                    {"sparse_seconds", r.sparse_seconds},
                    {"speedup", r.speedup},
                    {"max_abs_diff", r.max_abs_diff}};
  write_json(out / "bench.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

PlotSpec plot_spec(std::string title, std::string xlabel, std::string ylabel, bool log_x, bool log_y) {
  PlotSpec s;
  s.title = std::move(title);
  s.xlabel = std::move(xlabel);
  s.ylabel = std::move(ylabel);
  s.log_x = log_x;
  s.log_y = log_y;
  return s;
}

int cmd_report(const Common& c, const std::string& input) {
  RunConfig rc = resolve(c);
  const fs::path in(input.empty() ? c.out : input);
  const fs::path out = prepare_out(c, rc, {{"name", "report"}, {"input", in.string()}});
  int written = 0;
  auto csv = [](const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::stringstream ss(read_text(p));
    for (std::string line; std::getline(ss, line);) {
      std::vector<std::string> f;
      std::stringstream ls(line);
      for (std::string s; std::getline(ls, s, ',');) f.push_back(s);
      rows.push_back(f);
    }
    return rows;
  };
  auto col = [](const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("report: missing column " + name);
  };
  auto save = [&](const std::string& name, const PlotSpec& spec) {
    std::ofstream(out / name) << render_svg(spec);
    std::cout << (out / name).string() << "\n";
    ++written;
  };
  if (fs::exists(in / "trainlog.csv")) {
    const auto t = csv(in / "trainlog.csv");
    PlotSpec s = plot_spec("validation NMSE", "tokens", "NMSE", true, true);
    PlotSeries a{"val_nmse", {}, {}};
    PlotSeries b{"dead_frac", {}, {}};
    const std::size_t ct = col(t[0], "tokens_seen"), cv = col(t[0], "val_nmse"), cd = col(t[0], "dead_frac");
    for (std::size_t i = 1; i < t.size(); ++i) {
      a.x.push_back(std::stod(t[i][ct]));
      a.y.push_back(std::stod(t[i][cv]));
      b.x.push_back(std::stod(t[i][ct]));
      b.y.push_back(std::stod(t[i][cd]));
    }
    s.series = {a};
    save("trainlog.svg", s);
    PlotSpec s2 = plot_spec("dead latents", "tokens", "fraction", true, false);
    s2.series = {b};
    save("dead.svg", s2);
  }
  if (fs::exists(in / "sweep.csv")) {
    std::ifstream is(in / "sweep.csv");
    const auto rows = read_sweep_csv(is);
    std::map<std::size_t, PlotSeries> by_k;
    for (const auto& r : rows) {
      if (is_diverged(r)) continue;
      auto& s = by_k[r.k];
      s.label = "k=" + std::to_string(r.k);
      s.markers = true;
      s.x.push_back(static_cast<double>(r.n));
      s.y.push_back(r.val_nmse);
    }
    PlotSpec s = plot_spec("L(N)", "n", "val NMSE", true, true);
    for (auto& [k, ser] : by_k) s.series.push_back(ser);
    save("sweep.svg", s);
  }
  if (fs::exists(in / "test_time.csv")) {
    const auto t = csv(in / "test_time.csv");
    std::map<std::string, PlotSeries> by_mode;
    for (std::size_t i = 1; i < t.size(); ++i) {
      auto& s = by_mode[t[i][0]];
      s.label = t[i][0];
      s.x.push_back(std::stod(t[i][2]));
      s.y.push_back(std::stod(t[i][3]));
    }
    PlotSpec s = plot_spec("test-time sparsity", "L0", "NMSE", true, true);
    for (auto& [mname, ser] : by_mode) {
      std::vector<std::size_t> ord(ser.x.size());
      for (std::size_t i = 0; i < ord.size(); ++i) ord[i] = i;
      std::sort(ord.begin(), ord.end(), [&](auto a, auto b) { return ser.x[a] < ser.x[b]; });
      PlotSeries sorted{ser.label, {}, {}};
      for (auto i : ord) {
        sorted.x.push_back(ser.x[i]);
        sorted.y.push_back(ser.y[i]);
      }
      s.series.push_back(sorted);
    }
    save("test_time.svg", s);
  }
  if (fs::exists(in / "density.csv")) {
    const auto t = csv(in / "density.csv");
    std::vector<double> dens;
    for (std::size_t i = 1; i < t.size(); ++i) dens.push_back(std::stod(t[i][1]));
    std::sort(dens.begin(), dens.end(), std::greater<>());
    PlotSeries s{"density", {}, dens};
    for (std::size_t i = 0; i < dens.size(); ++i) s.x.push_back(static_cast<double>(i + 1));
    PlotSpec spec = plot_spec("latent density by rank", "rank", "density", true, true);
    spec.series = {s};
    save("density.svg", spec);
  }
  if (written == 0) throw InvalidArgument("report: no trainlog.csv, sweep.csv, test_time.csv or density.csv in " +
                                          in.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse autoencoder training, evaluation and scaling-law fitting"};
  app.require_subcommand(1);
  Common c;
  std::string kind = "dictionary", ckpath, weights = "best", input, xcol = "n", kernel = "decoder-forward";
  DictDataConfig dcfg;
  std::size_t seqs = 64, seq_len = 64, max_latents = 0, drop_first = 0, random_dirs = 8, bench_d = 64,
              bench_batch = 256, bench_reps = 20;
  std::vector<std::size_t> ns, ks, latents;
  std::vector<std::uint64_t> seeds;
  std::vector<float> thetas;
  double lr_ref = 0.0, n_ref = 0.0;
  bool irreducible = false, joint = false;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic activations (and tokens for a subject)");
  add_common(gen, c);
  gen->add_option("--kind", kind, "dictionary | gaussian | subject");
  gen->add_option("--d", dcfg.d, "Activation width");
  gen->add_option("--rows", dcfg.rows, "Rows");
  gen->add_option("--n-true", dcfg.n_true, "Dictionary size");
  gen->add_option("--k-true", dcfg.k_true, "Active atoms per row");
  gen->add_option("--sigma", dcfg.noise_sigma, "Noise standard deviation");
  gen->add_option("--seqs", seqs, "Sequences (subject)");
  gen->add_option("--seq-len", seq_len, "Sequence length (subject)");

  auto* tr = app.add_subcommand("train", "Train an autoencoder");
  add_common(tr, c);

  auto* ev = app.add_subcommand("eval", "Reconstruction, density and downstream metrics");
  add_common(ev, c);
  for (auto* s : {ev}) {
    s->add_option("--checkpoint", ckpath, "Checkpoint")->required();
    s->add_option("--weights", weights, "raw | ema | best");
  }

  auto* sw = app.add_subcommand("sweep", "Train a grid of autoencoders");
  add_common(sw, c);
  sw->add_option("--ns", ns, "Latent counts")->delimiter(',')->required();
  sw->add_option("--ks", ks, "k values")->delimiter(',');
  sw->add_option("--seeds", seeds, "Seeds")->delimiter(',');
  sw->add_option("--lr-ref", lr_ref, "Reference lr for the 1/sqrt(n) rule");
  sw->add_option("--n-ref", n_ref, "Reference n for the 1/sqrt(n) rule");

  auto* fit = app.add_subcommand("fit", "Fit power laws to a sweep table");
  add_common(fit, c);
  fit->add_option("--input", input, "Sweep CSV")->required();
  fit->add_flag("--irreducible", irreducible, "Include the irreducible loss term");
  fit->add_flag("--joint", joint, "Fit the joint L(n,k) law");
  fit->add_option("--x", xcol, "n | compute | tokens");
  fit->add_option("--drop-first", drop_first, "Drop this many smallest-x points per fit");

  auto* n2g = app.add_subcommand("n2g", "Build and score N2G explanations");
  add_common(n2g, c);
  auto* pr = app.add_subcommand("probe", "1-D logistic probe metric");
  add_common(pr, c);
  auto* ab = app.add_subcommand("ablate", "Ablation-effect sparsity");
  add_common(ab, c);
  auto* rf = app.add_subcommand("refine", "Shrinkage via refined activations");
  add_common(rf, c);
  auto* tt = app.add_subcommand("sweep-test-time", "Test-time k / JumpReLU sweep");
  add_common(tt, c);
  for (auto* s : {n2g, pr, rf, tt}) {
    s->add_option("--checkpoint", ckpath, "Checkpoint")->required();
    s->add_option("--weights", weights, "raw | ema | best");
  }
  ab->add_option("--checkpoint", ckpath, "Checkpoint (omit for baselines only)");
  ab->add_option("--weights", weights, "raw | ema | best");
  ab->add_option("--random-directions", random_dirs, "Random directions per position");
  n2g->add_option("--latents", latents, "Latents to explain")->delimiter(',');
  n2g->add_option("--max-latents", max_latents, "Explain latents 0..max-1 when --latents is absent");
  tt->add_option("--ks", ks, "Test-time k values")->delimiter(',');
  tt->add_option("--thetas", thetas, "JumpReLU thresholds")->delimiter(',');

  auto* bn = app.add_subcommand("bench", "Dense vs sparse kernel flops and timing");
  add_common(bn, c);
  bn->add_option("--kernel", kernel,
                 "decoder-forward | decoder-grad | latent-grad | encoder-grad | pre-bias-grad | full-step");
  bn->add_option("--d", bench_d, "Width");
  bn->add_option("--rows", bench_batch, "Batch rows");
  bn->add_option("--reps", bench_reps, "Timed repetitions");

  auto* rp = app.add_subcommand("report", "SVG plots from a run directory");
  add_common(rp, c);
  rp->add_option("--input", input, "Directory with CSV outputs (default: --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(c, kind, dcfg, seqs, seq_len);
    if (*tr) return cmd_train(c);
    if (*ev) return cmd_eval(c, ckpath, weights);
    if (*sw) return cmd_sweep(c, ns, ks, seeds, lr_ref, n_ref);
    if (*fit) return cmd_fit(c, input, irreducible, joint, xcol, drop_first);
    if (*n2g) return cmd_n2g(c, ckpath, weights, latents, max_latents);
    if (*pr) return cmd_probe(c, ckpath, weights);
    if (*ab) return cmd_ablate(c, ckpath, weights, random_dirs);
    if (*rf) return cmd_refine(c, ckpath, weights);
    if (*tt) return cmd_sweep_test_time(c, ckpath, weights, ks, thetas);
    if (*bn) return cmd_bench(c, kernel, bench_d, bench_batch, bench_reps);
    if (*rp) return cmd_report(c, input);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DegenerateInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
