#include "sae/config.hpp"

#include <fstream>
#include <set>

#include "sae/error.hpp"

namespace sae {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads typed fields from one JSON object and rejects keys it never asked about.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw InvalidArgument(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw InvalidArgument(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) throw InvalidArgument(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> known_;
};

}  // namespace

ordered_json to_json(const AeConfig& c) {
  ordered_json j;
  j["activation"] = std::string(activation_name(c.activation));
  j["n"] = c.n;
  j["k"] = c.k;
  ordered_json terms = ordered_json::array();
  for (const auto& t : c.multi_topk_terms) terms.push_back({{"k", t.k}, {"weight", t.weight}});
  j["multi_topk_terms"] = terms;
  j["l1_coeff"] = c.l1_coeff;
  j["aux_coeff"] = c.aux_coeff;
  j["k_aux"] = c.k_aux;
  j["dead_threshold_tokens"] = c.dead_threshold_tokens;
  j["relu_after_topk"] = c.relu_after_topk;
  if (c.use_b_enc) j["use_b_enc"] = *c.use_b_enc;
  else j["use_b_enc"] = nullptr;
  j["encoder_magnitude_init"] = c.encoder_magnitude_init;
  j["tied_init"] = c.tied_init;
  return j;
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["batch_size"] = c.batch_size;
  j["token_budget"] = c.token_budget;
  j["lr"] = c.lr;
  if (c.lr_rule) j["lr_rule"] = {{"lr_ref", c.lr_rule->lr_ref}, {"n_ref", c.lr_rule->n_ref}};
  else j["lr_rule"] = nullptr;
  j["stop_mode"] = std::string(stop_mode_name(c.stop_mode));
  j["convergence_tol"] = c.convergence_tol;
  j["convergence_window"] = c.convergence_window;
  j["clip_norm"] = c.clip_norm;
  j["eval_every"] = c.eval_every;
  j["val_max_rows"] = c.val_max_rows;
  j["seed"] = c.seed;
  j["resample_events"] = c.resample_events;
  j["ema_coeff"] = c.ema_coeff;
  j["adam_eps"] = c.adam_eps;
  j["lr_decay_fraction"] = c.lr_decay_fraction;
  j["init_sample_rows"] = c.init_sample_rows;
  j["verbose"] = c.verbose;
  return j;
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["schema_version"] = c.schema_version;
  j["ae"] = to_json(c.ae);
  j["train"] = to_json(c.train);
  j["paths"] = {{"data", c.paths.data}, {"tokens", c.paths.tokens}, {"labels", c.paths.labels}};
  j["subject"] = c.subject;
  const auto& m = c.metrics;
  j["metrics"] = {{"ablation_T", m.ablation_T},
                  {"ablation_positions", m.ablation_positions},
                  {"ablation_max_latents", m.ablation_max_latents},
                  {"ablation_sequences", m.ablation_sequences},
                  {"refine_iters", m.refine_iters},
                  {"test_time_k", m.test_time_k},
                  {"jumprelu_theta", m.jumprelu_theta},
                  {"n2g_contexts", m.n2g_contexts},
                  {"pad_token", m.pad_token},
                  {"eval_rows", m.eval_rows}};
  return j;
}

void merge_json(const json& j, AeConfig& out) {
  Fields f(j, "ae");
  std::string act;
  f.get("activation", act);
  if (!act.empty()) out.activation = parse_activation(act);
  f.get("n", out.n);
  f.get("k", out.k);
  if (const json* terms = f.sub("multi_topk_terms")) {
    if (!terms->is_array()) throw InvalidArgument("ae.multi_topk_terms: expected an array");
    out.multi_topk_terms.clear();
    for (const auto& t : *terms) {
      Fields tf(t, "ae.multi_topk_terms[]");
      MultiTopkTerm term;
      tf.get("k", term.k);
      tf.get("weight", term.weight);
      tf.finish();
      out.multi_topk_terms.push_back(term);
    }
  }
  f.get("l1_coeff", out.l1_coeff);
  f.get("aux_coeff", out.aux_coeff);
  f.get("k_aux", out.k_aux);
  f.get("dead_threshold_tokens", out.dead_threshold_tokens);
  f.get("relu_after_topk", out.relu_after_topk);
  if (const json* b = f.sub("use_b_enc")) {
    if (b->is_null()) out.use_b_enc.reset();
    else if (b->is_boolean()) out.use_b_enc = b->get<bool>();
    else throw InvalidArgument("ae.use_b_enc: expected boolean or null");
  }
  f.get("encoder_magnitude_init", out.encoder_magnitude_init);
  f.get("tied_init", out.tied_init);
  f.finish();
}

void merge_json(const json& j, TrainConfig& out) {
  Fields f(j, "train");
  f.get("batch_size", out.batch_size);
  f.get("token_budget", out.token_budget);
  f.get("lr", out.lr);
  if (const json* r = f.sub("lr_rule")) {
    if (r->is_null()) {
      out.lr_rule.reset();
    } else {
      Fields rf(*r, "train.lr_rule");
      LrRule rule;
      rf.get("lr_ref", rule.lr_ref);
      rf.get("n_ref", rule.n_ref);
      rf.finish();
      out.lr_rule = rule;
    }
  }
  std::string mode;
  f.get("stop_mode", mode);
  if (!mode.empty()) out.stop_mode = parse_stop_mode(mode);
  f.get("convergence_tol", out.convergence_tol);
  f.get("convergence_window", out.convergence_window);
  f.get("clip_norm", out.clip_norm);
  f.get("eval_every", out.eval_every);
  f.get("val_max_rows", out.val_max_rows);
  f.get("seed", out.seed);
  f.get("resample_events", out.resample_events);
  f.get("ema_coeff", out.ema_coeff);
  f.get("adam_eps", out.adam_eps);
  f.get("lr_decay_fraction", out.lr_decay_fraction);
  f.get("init_sample_rows", out.init_sample_rows);
  f.get("verbose", out.verbose);
  f.finish();
}

void merge_json(const json& j, RunConfig& out) {
  Fields f(j, "config");
  f.get("schema_version", out.schema_version);
  if (out.schema_version != 1)
    throw InvalidArgument("config: unsupported schema_version " + std::to_string(out.schema_version));
  if (const json* a = f.sub("ae")) merge_json(*a, out.ae);
  if (const json* t = f.sub("train")) merge_json(*t, out.train);
  if (const json* p = f.sub("paths")) {
    Fields pf(*p, "paths");
    pf.get("data", out.paths.data);
    pf.get("tokens", out.paths.tokens);
    pf.get("labels", out.paths.labels);
    pf.finish();
  }
  f.get("subject", out.subject);
  if (const json* m = f.sub("metrics")) {
    Fields mf(*m, "metrics");
    auto& o = out.metrics;
    mf.get("ablation_T", o.ablation_T);
    mf.get("ablation_positions", o.ablation_positions);
    mf.get("ablation_max_latents", o.ablation_max_latents);
    mf.get("ablation_sequences", o.ablation_sequences);
    mf.get("refine_iters", o.refine_iters);
    mf.get("test_time_k", o.test_time_k);
    mf.get("jumprelu_theta", o.jumprelu_theta);
    mf.get("n2g_contexts", o.n2g_contexts);
    mf.get("pad_token", o.pad_token);
    mf.get("eval_rows", o.eval_rows);
    mf.finish();
  }
  f.finish();
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + path + ": " + e.what());
  }
  RunConfig c;
  merge_json(j, c);
  return c;
}

}  // namespace sae
