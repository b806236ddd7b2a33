#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/error.hpp"
#include "sae/eval.hpp"

namespace sae {

float LatentTable::value(std::size_t row, LatentId latent) const {
  const auto& e = codes.at(row).entries;
  auto it = std::lower_bound(e.begin(), e.end(), latent,
                             [](const SparseEntry& a, LatentId l) { return a.index < l; });
  return it != e.end() && it->index == latent ? it->value : 0.0f;
}

LatentTable encode_sequences(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                             const SequenceStore& seqs) {
  require(ae.d == m.cfg.d_model, "encode_sequences: autoencoder d != subject d_model");
  LatentTable t;
  t.seq_len = seqs.seq_len;
  t.codes.reserve(seqs.tokens.size());
  std::vector<float> xn(ae.d);
  for (std::size_t s = 0; s < seqs.n_seqs(); ++s) {
    const DenseMatrix r = forward_to_splice(m, seqs.seq(s));
    for (std::size_t p = 0; p < r.rows; ++p) {
      normalize_input(r.row(p), xn);
      t.codes.push_back(encode(ae, cfg, xn));
    }
  }
  return t;
}

void N2GExplanation::add(const N2GPattern& p) {
  require(!p.tokens.empty(), "n2g: empty pattern");
  if (nodes.empty()) nodes.emplace_back();
  std::size_t cur = 0;
  for (std::size_t j = p.tokens.size(); j-- > 0;) {
    const std::uint32_t key = p.tokens[j];
    auto it = nodes[cur].children.find(key);
    if (it == nodes[cur].children.end()) {
      nodes.emplace_back();
      const std::size_t id = nodes.size() - 1;
      nodes[cur].children.emplace(key, id);
      cur = id;
    } else {
      cur = it->second;
    }
  }
  N2GNode& n = nodes[cur];
  if (p.anchored) {
    n.terminal_anchored = true;
    n.value_anchored = (n.value_anchored * static_cast<double>(n.count_anchored) + p.value) /
                       static_cast<double>(n.count_anchored + 1);
    ++n.count_anchored;
  } else {
    n.terminal = true;
    n.value = (n.value * static_cast<double>(n.count) + p.value) / static_cast<double>(n.count + 1);
    ++n.count;
  }
  patterns.push_back(p);
  empty = false;
}

double N2GExplanation::predict(std::span<const std::uint32_t> seq, std::size_t pos) const {
  if (nodes.empty()) return 0.0;
  double best = 0.0;
  // Walk backward from pos; `consumed` tokens matched so far.
  auto walk = [&](auto&& self, std::size_t node, std::size_t consumed) -> void {
    const N2GNode& n = nodes[node];
    if (n.terminal) best = std::max(best, n.value);
    if (n.terminal_anchored && consumed == pos + 1) best = std::max(best, n.value_anchored);
    if (consumed > pos) return;
    const std::uint32_t tok = seq[pos - consumed];
    if (auto it = n.children.find(tok); it != n.children.end()) self(self, it->second, consumed + 1);
    if (tok != kWildcard)
      if (auto it = n.children.find(kWildcard); it != n.children.end()) self(self, it->second, consumed + 1);
  };
  walk(walk, 0, 0);
  return best;
}

LatentOracle make_latent_oracle(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                LatentId latent) {
  require(latent < ae.n, "n2g: latent index out of range");
  return [&m, &ae, &cfg, latent](std::span<const std::uint32_t> tokens) -> float {
    const DenseMatrix r = forward_to_splice(m, tokens);
    std::vector<float> xn(ae.d);
    normalize_input(r.row(r.rows - 1), xn);
    const SparseVec z = encode(ae, cfg, xn);
    for (const auto& e : z.entries)
      if (e.index == latent) return e.value;
    return 0.0f;
  };
}

N2GExplanation n2g_build(LatentId latent, const SequenceStore& store, const LatentTable& table,
                         const LatentOracle& oracle, const N2GBuildOptions& opt) {
  require(table.codes.size() == store.tokens.size(), "n2g: latent table does not match the store");
  N2GExplanation ex;
  ex.latent = latent;
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < table.codes.size(); ++r)
    if (table.value(r, latent) > 0.0f) active.push_back(r);
  if (active.empty()) return ex;
  std::mt19937_64 rng(opt.seed ^ (0xa0761d6478bd642fULL * (latent + 1)));
  seeded_shuffle(active, rng);
  active.resize(std::min(active.size(), opt.max_contexts));
  std::sort(active.begin(), active.end());

  const std::size_t L = store.seq_len;
  for (std::size_t row : active) {
    const auto seq = store.seq(row / L);
    const std::size_t t = row % L;
    const double a = table.value(row, latent);
    const double half = 0.5 * a;

    std::size_t len = t + 1;
    for (std::size_t l = 1; l <= t + 1; ++l) {
      if (oracle(seq.subspan(t + 1 - l, l)) >= half) {
        len = l;
        break;
      }
    }
    std::vector<std::uint32_t> work(seq.begin() + static_cast<std::ptrdiff_t>(t + 1 - len),
                                    seq.begin() + static_cast<std::ptrdiff_t>(t + 1));
    std::vector<bool> wild(len, false);
    for (std::size_t j = 0; j + 1 < len; ++j) {
      if (work[j] == opt.pad_token) continue;
      const std::uint32_t keep = work[j];
      work[j] = opt.pad_token;
      if (oracle(work) >= half) wild[j] = true;
      else work[j] = keep;
    }
    bool anchored = false;
    if (t + 1 == len) {
      std::vector<std::uint32_t> shifted;
      shifted.reserve(len + 1);
      shifted.push_back(opt.pad_token);
      shifted.insert(shifted.end(), work.begin(), work.end());
      anchored = oracle(shifted) < half;
    }
    N2GPattern p;
    p.tokens = work;
    for (std::size_t j = 0; j < len; ++j)
      if (wild[j]) p.tokens[j] = kWildcard;
    p.anchored = anchored;
    p.value = a;
    ex.add(p);
  }
  return ex;
}

N2GScores n2g_scores(const N2GExplanation& ex, const SequenceStore& heldout, const LatentTable& table) {
  require(table.codes.size() == heldout.tokens.size(), "n2g: latent table does not match the store");
  N2GScores s;
  std::size_t tp = 0;
  const std::size_t L = heldout.seq_len;
  for (std::size_t r = 0; r < table.codes.size(); ++r) {
    const bool act = table.value(r, ex.latent) > 0.0f;
    const bool pred = ex.predict(heldout.seq(r / L), r % L) > 0.0;
    s.positives += act ? 1 : 0;
    s.predicted += pred ? 1 : 0;
    tp += (act && pred) ? 1 : 0;
  }
  if (s.positives > 0) s.recall = static_cast<double>(tp) / static_cast<double>(s.positives);
  if (s.predicted > 0) s.precision = static_cast<double>(tp) / static_cast<double>(s.predicted);
  if (s.recall && s.precision && *s.recall + *s.precision > 0.0)
    s.f1 = 2.0 * *s.recall * *s.precision / (*s.recall + *s.precision);
  return s;
}

ScaleFit least_squares_scale(std::span<const double> s, std::span<const double> a) {
  require(s.size() == a.size(), "scale fit: length mismatch");
  double sa = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    sa += s[i] * a[i];
    ss += s[i] * s[i];
  }
  ScaleFit f;
  if (ss == 0.0) {
    f.degenerate = true;
    return f;
  }
  f.scale = sa / ss;
  return f;
}

ScaleFit n2g_simulate_scale(const N2GExplanation& ex, const SequenceStore& store, const LatentTable& table) {
  require(table.codes.size() == store.tokens.size(), "n2g: latent table does not match the store");
  std::vector<double> s(table.codes.size()), a(table.codes.size());
  const std::size_t L = store.seq_len;
  for (std::size_t r = 0; r < table.codes.size(); ++r) {
    s[r] = ex.predict(store.seq(r / L), r % L);
    a[r] = table.value(r, ex.latent);
  }
  return least_squares_scale(s, a);
}

LatentSimulator n2g_simulator(const std::vector<N2GExplanation>& explanations, std::size_t n) {
  std::vector<const N2GExplanation*> order;
  for (const auto& e : explanations) {
    require(e.latent < n, "n2g simulator: latent out of range");
    order.push_back(&e);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->latent < b->latent; });
  return [order, n](std::span<const std::uint32_t> seq, std::size_t pos, const SparseVec&) {
    SparseVec z;
    z.dim = n;
    for (const auto* e : order) {
      const double v = e->scale * e->predict(seq, pos);
      if (v != 0.0) {
        if (!z.entries.empty() && z.entries.back().index == e->latent) z.entries.back().value = static_cast<float>(v);
        else z.entries.push_back({e->latent, static_cast<float>(v)});
      }
    }
    return z;
  };
}

ExplanationCe explanation_reconstruction(const SubjectModel& m, const AutoencoderParams& ae, const AeConfig& cfg,
                                         const LatentSimulator& sim, const SequenceStore& seqs,
                                         std::size_t max_seqs) {
  require(seqs.n_seqs() >= 1 && seqs.seq_len >= 2, "explanation_reconstruction: need sequences of length >= 2");
  const std::size_t S = max_seqs == 0 ? seqs.n_seqs() : std::min(max_seqs, seqs.n_seqs());
  ExplanationCe out;
  Splice rec{SpliceMode::reconstruct, &ae, &cfg, 0, {}, {}, {}};
  Splice zero{SpliceMode::zero, nullptr, nullptr, 0, {}, {}, {}};
  for (std::size_t i = 0; i < S; ++i) {
    const auto tok = seqs.seq(i);
    const DenseMatrix resid = forward_to_splice(m, tok);
    out.ce_clean += next_token_ce(forward_from_splice(m, resid), tok);
    DenseMatrix r = resid;
    apply_splice(rec, r);
    out.ce_reconstruct += next_token_ce(forward_from_splice(m, r), tok);
    r = resid;
    apply_splice(zero, r);
    out.ce_zero += next_token_ce(forward_from_splice(m, r), tok);
    Splice ex{SpliceMode::explanations, &ae, &cfg, 0, {}, {}, {}};
    ex.simulate = [&](std::size_t pos, const SparseVec& z) { return sim(tok, pos, z); };
    r = resid;
    apply_splice(ex, r);
    out.ce_explained += next_token_ce(forward_from_splice(m, r), tok);
  }
  const double d = static_cast<double>(S);
  out.ce_clean /= d;
  out.ce_reconstruct /= d;
  out.ce_zero /= d;
  out.ce_explained /= d;
  return out;
}

}  // namespace sae
