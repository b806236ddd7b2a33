#include "sae/subject.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bytes.hpp"
#include "sae/error.hpp"
#include "sae/simd.hpp"

namespace sae {

namespace {

constexpr float kLnEps = 1e-5f;

void layer_norm(std::span<const float> x, std::span<const float> g, std::span<const float> b, std::span<float> out) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const float inv = static_cast<float>(1.0 / std::sqrt(var + kLnEps));
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(x[i] - mean) * inv * g[i] + b[i];
}

float gelu(float x) {
  // tanh approximation, as in GPT-2
  const float c = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

// Y (T x out) = X (T x in) W^T (+ bias)
void linear(const DenseMatrix& X, const DenseMatrix& W, std::span<const float> bias, DenseMatrix& Y) {
  matmul_nt(X, W, Y);
  if (!bias.empty())
    for (std::size_t t = 0; t < Y.rows; ++t) simd::kernels().axpy(1.0f, bias.data(), Y.row(t).data(), Y.cols);
}

void check_shape(const DenseMatrix& m, std::size_t r, std::size_t c, const std::string& name) {
  if (m.rows != r || m.cols != c)
    throw InvalidArgument("subject: " + name + " has shape " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                          ", expected " + std::to_string(r) + "x" + std::to_string(c));
}

void check_len(std::span<const float> v, std::size_t n, const std::string& name) {
  if (v.size() != n)
    throw InvalidArgument("subject: " + name + " has length " + std::to_string(v.size()) + ", expected " +
                          std::to_string(n));
}

void block(const SubjectModel& m, const SubjectLayer& L, DenseMatrix& resid) {
  const std::size_t T = resid.rows;
  const std::size_t d = m.cfg.d_model;
  const std::size_t H = m.cfg.heads;
  const std::size_t dh = d / H;
  const auto& kt = simd::kernels();

  DenseMatrix h(T, d);
  for (std::size_t t = 0; t < T; ++t) layer_norm(resid.row(t), L.ln1_g, L.ln1_b, h.row(t));
  DenseMatrix q, k, v;
  linear(h, L.wq, {}, q);
  linear(h, L.wk, {}, k);
  linear(h, L.wv, {}, v);
  DenseMatrix att(T, d);
  std::vector<float> w(T);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (std::size_t hh = 0; hh < H; ++hh) {
    const std::size_t off = hh * dh;
    for (std::size_t t = 0; t < T; ++t) {
      float mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        w[s] = kt.dot(q.row(t).data() + off, k.row(s).data() + off, dh) * scale;
        mx = std::max(mx, w[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        w[s] = std::exp(w[s] - mx);
        z += w[s];
      }
      float* out = att.row(t).data() + off;
      for (std::size_t s = 0; s <= t; ++s) kt.axpy(static_cast<float>(w[s] / z), v.row(s).data() + off, out, dh);
    }
  }
  DenseMatrix o;
  linear(att, L.wo, {}, o);
  for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += o.data[i];

  for (std::size_t t = 0; t < T; ++t) layer_norm(resid.row(t), L.ln2_g, L.ln2_b, h.row(t));
  DenseMatrix u;
  linear(h, L.w1, L.b1, u);
  for (float& x : u.data) x = gelu(x);
  linear(u, L.w2, L.b2, o);
  for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += o.data[i];
}

}  // namespace

void SubjectModel::validate() const {
  const std::size_t d = cfg.d_model;
  require(d >= 1 && cfg.vocab >= 1 && cfg.ctx >= 1, "subject: d_model, vocab, ctx must be >= 1");
  check_shape(wte, cfg.vocab, d, "wte");
  check_shape(unembed, cfg.vocab, d, "unembed");
  check_len(lnf_g, d, "lnf.g");
  check_len(lnf_b, d, "lnf.b");
  if (cfg.variant == SubjectVariant::linear_head) {
    require(cfg.layers == 0 && cfg.splice_layer == 0, "subject: linear_head variant has no layers and splices at 0");
    return;
  }
  require(cfg.heads >= 1 && d % cfg.heads == 0, "subject: heads must divide d_model");
  require(cfg.splice_layer < cfg.layers, "subject: splice_layer must be < layers");
  require(layers.size() == cfg.layers, "subject: layer count mismatch");
  check_shape(wpe, cfg.ctx, d, "wpe");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& L = layers[i];
    const std::string p = "h" + std::to_string(i) + ".";
    check_len(L.ln1_g, d, p + "ln1.g");
    check_len(L.ln1_b, d, p + "ln1.b");
    check_len(L.ln2_g, d, p + "ln2.g");
    check_len(L.ln2_b, d, p + "ln2.b");
    check_shape(L.wq, d, d, p + "attn.wq");
    check_shape(L.wk, d, d, p + "attn.wk");
    check_shape(L.wv, d, d, p + "attn.wv");
    check_shape(L.wo, d, d, p + "attn.wo");
    check_shape(L.w1, 4 * d, d, p + "mlp.w1");
    check_len(L.b1, 4 * d, p + "mlp.b1");
    check_shape(L.w2, d, 4 * d, p + "mlp.w2");
    check_len(L.b2, d, p + "mlp.b2");
  }
}

SubjectModel random_subject(const SubjectConfig& cfg, std::uint64_t seed, float init_std) {
  SubjectModel m;
  m.cfg = cfg;
  const std::size_t d = cfg.d_model;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  auto randm = [&](std::size_t r, std::size_t c, float sd) {
    DenseMatrix M(r, c);
    for (float& v : M.data) v = sd * g(rng);
    return M;
  };
  m.wte = randm(cfg.vocab, d, init_std);
  if (cfg.variant == SubjectVariant::transformer) {
    m.wpe = randm(cfg.ctx, d, init_std / 2);
    const float proj_std = init_std / std::sqrt(2.0f * static_cast<float>(cfg.layers));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      SubjectLayer L;
      L.ln1_g.assign(d, 1.0f);
      L.ln1_b.assign(d, 0.0f);
      L.wq = randm(d, d, init_std);
      L.wk = randm(d, d, init_std);
      L.wv = randm(d, d, init_std);
      L.wo = randm(d, d, proj_std);
      L.ln2_g.assign(d, 1.0f);
      L.ln2_b.assign(d, 0.0f);
      L.w1 = randm(4 * d, d, init_std);
      L.b1.assign(4 * d, 0.0f);
      L.w2 = randm(d, 4 * d, proj_std);
      L.b2.assign(d, 0.0f);
      m.layers.push_back(std::move(L));
    }
  } else {
    m.cfg.layers = 0;
    m.cfg.splice_layer = 0;
  }
  m.lnf_g.assign(d, 1.0f);
  m.lnf_b.assign(d, 0.0f);
  m.unembed = m.wte;
  m.validate();
  return m;
}

SubjectModel parse_random_subject(const std::string& spec) {
  const auto colon = spec.find(':');
  require(colon != std::string::npos, "subject spec: expected SEED:DIMS, got '" + spec + "'");
  std::uint64_t seed = 0;
  try {
    seed = std::stoull(spec.substr(0, colon));
  } catch (const std::exception&) {
    throw InvalidArgument("subject spec: bad seed in '" + spec + "'");
  }
  std::string rest = spec.substr(colon + 1);
  SubjectConfig cfg;
  bool linear = false;
  if (rest.rfind("linear:", 0) == 0) {
    linear = true;
    rest = rest.substr(7);
  }
  std::vector<std::size_t> v;
  std::stringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw InvalidArgument("subject spec: bad number '" + item + "' in '" + spec + "'");
    }
  }
  if (linear) {
    require(v.size() == 2, "subject spec: linear form is SEED:linear:D,V");
    cfg.variant = SubjectVariant::linear_head;
    cfg.d_model = v[0];
    cfg.vocab = v[1];
    cfg.layers = 0;
    cfg.splice_layer = 0;
  } else {
    require(v.size() == 5 || v.size() == 6, "subject spec: expected SEED:L,D,H,V,CTX[,SPLICE]");
    cfg.layers = v[0];
    cfg.d_model = v[1];
    cfg.heads = v[2];
    cfg.vocab = v[3];
    cfg.ctx = v[4];
    cfg.splice_layer = v.size() == 6 ? v[5] : cfg.layers / 2;
  }
  return random_subject(cfg, seed);
}

SubjectModel load_subject_spec(const std::string& spec) {
  if (spec.rfind("random:", 0) == 0) return parse_random_subject(spec.substr(7));
  return load_subject(spec);
}

namespace {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

NamedTensor mat(const std::string& name, const DenseMatrix& m) {
  return {name, {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)}, m.data};
}
NamedTensor vec(const std::string& name, const std::vector<float>& v) {
  return {name, {static_cast<std::uint32_t>(v.size())}, v};
}

}  // namespace

std::vector<std::uint8_t> encode_subject(const SubjectModel& m) {
  m.validate();
  std::vector<NamedTensor> ts;
  const auto& c = m.cfg;
  ts.push_back(vec("config", {static_cast<float>(c.layers), static_cast<float>(c.d_model),
                              static_cast<float>(c.heads), static_cast<float>(c.vocab), static_cast<float>(c.ctx),
                              static_cast<float>(c.splice_layer), static_cast<float>(c.variant)}));
  ts.push_back(mat("wte", m.wte));
  if (c.variant == SubjectVariant::transformer) ts.push_back(mat("wpe", m.wpe));
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& L = m.layers[i];
    const std::string p = "h" + std::to_string(i) + ".";
    ts.push_back(vec(p + "ln1.g", L.ln1_g));
    ts.push_back(vec(p + "ln1.b", L.ln1_b));
    ts.push_back(mat(p + "attn.wq", L.wq));
    ts.push_back(mat(p + "attn.wk", L.wk));
    ts.push_back(mat(p + "attn.wv", L.wv));
    ts.push_back(mat(p + "attn.wo", L.wo));
    ts.push_back(vec(p + "ln2.g", L.ln2_g));
    ts.push_back(vec(p + "ln2.b", L.ln2_b));
    ts.push_back(mat(p + "mlp.w1", L.w1));
    ts.push_back(vec(p + "mlp.b1", L.b1));
    ts.push_back(mat(p + "mlp.w2", L.w2));
    ts.push_back(vec(p + "mlp.b2", L.b2));
  }
  ts.push_back(vec("lnf.g", m.lnf_g));
  ts.push_back(vec("lnf.b", m.lnf_b));
  if (m.unembed.data != m.wte.data) ts.push_back(mat("unembed", m.unembed));

  detail::ByteWriter w;
  w.magic("SAESUB01");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto dim : t.dims) w.put<std::uint32_t>(dim);
    w.put_array<float>(t.data);
  }
  return std::move(w.bytes());
}

SubjectModel decode_subject(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "subject");
  r.expect_magic("SAESUB01");
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> ts;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>("name length");
    t.name = r.get_string(len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.get<std::uint32_t>("dim"));
      n *= t.dims.back();
    }
    t.data = r.get_array<float>(n, t.name.c_str());
    ts.push_back(std::move(t));
  }
  r.expect_end();

  auto find = [&](const std::string& name) -> const NamedTensor* {
    for (const auto& t : ts)
      if (t.name == name) return &t;
    return nullptr;
  };
  auto need = [&](const std::string& name) -> const NamedTensor& {
    const NamedTensor* t = find(name);
    if (!t) throw FormatError("subject: missing tensor '" + name + "'");
    return *t;
  };
  auto as_mat = [&](const std::string& name) {
    const auto& t = need(name);
    if (t.dims.size() != 2) throw FormatError("subject: tensor '" + name + "' must be rank 2");
    DenseMatrix M(t.dims[0], t.dims[1]);
    M.data = t.data;
    return M;
  };
  auto as_vec = [&](const std::string& name) {
    const auto& t = need(name);
    if (t.dims.size() != 1) throw FormatError("subject: tensor '" + name + "' must be rank 1");
    return t.data;
  };

  const auto cfgv = as_vec("config");
  if (cfgv.size() != 7) throw FormatError("subject: config tensor must have 7 entries");
  SubjectModel m;
  m.cfg.layers = static_cast<std::size_t>(cfgv[0]);
  m.cfg.d_model = static_cast<std::size_t>(cfgv[1]);
  m.cfg.heads = static_cast<std::size_t>(cfgv[2]);
  m.cfg.vocab = static_cast<std::size_t>(cfgv[3]);
  m.cfg.ctx = static_cast<std::size_t>(cfgv[4]);
  m.cfg.splice_layer = static_cast<std::size_t>(cfgv[5]);
  m.cfg.variant = cfgv[6] == 0.0f ? SubjectVariant::transformer : SubjectVariant::linear_head;
  m.wte = as_mat("wte");
  if (m.cfg.variant == SubjectVariant::transformer) m.wpe = as_mat("wpe");
  for (std::size_t i = 0; i < m.cfg.layers; ++i) {
    const std::string p = "h" + std::to_string(i) + ".";
    SubjectLayer L;
    L.ln1_g = as_vec(p + "ln1.g");
    L.ln1_b = as_vec(p + "ln1.b");
    L.wq = as_mat(p + "attn.wq");
    L.wk = as_mat(p + "attn.wk");
    L.wv = as_mat(p + "attn.wv");
    L.wo = as_mat(p + "attn.wo");
    L.ln2_g = as_vec(p + "ln2.g");
    L.ln2_b = as_vec(p + "ln2.b");
    L.w1 = as_mat(p + "mlp.w1");
    L.b1 = as_vec(p + "mlp.b1");
    L.w2 = as_mat(p + "mlp.w2");
    L.b2 = as_vec(p + "mlp.b2");
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = as_vec("lnf.g");
  m.lnf_b = as_vec("lnf.b");
  m.unembed = find("unembed") ? as_mat("unembed") : m.wte;
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what());
  }
  return m;
}

void save_subject(const std::filesystem::path& path, const SubjectModel& m) {
  detail::write_file(path, encode_subject(m));
}

SubjectModel load_subject(const std::filesystem::path& path) { return decode_subject(detail::read_file(path)); }

DenseMatrix forward_to_splice(const SubjectModel& m, std::span<const std::uint32_t> tokens) {
  const std::size_t T = tokens.size();
  const std::size_t d = m.cfg.d_model;
  require(T >= 1, "subject: empty token sequence");
  if (m.cfg.variant == SubjectVariant::transformer)
    require(T <= m.cfg.ctx, "subject: sequence length " + std::to_string(T) + " exceeds ctx " + std::to_string(m.cfg.ctx));
  DenseMatrix resid(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t] >= m.cfg.vocab)
      throw InvalidArgument("subject: token " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                            " >= vocab " + std::to_string(m.cfg.vocab));
    auto r = resid.row(t);
    const auto e = m.wte.row(tokens[t]);
    std::copy(e.begin(), e.end(), r.begin());
    if (m.cfg.variant == SubjectVariant::transformer)
      for (std::size_t c = 0; c < d; ++c) r[c] += m.wpe(t, c);
  }
  for (std::size_t l = 0; l < m.cfg.splice_layer; ++l) block(m, m.layers[l], resid);
  return resid;
}

DenseMatrix forward_from_splice(const SubjectModel& m, const DenseMatrix& resid_in) {
  DenseMatrix resid = resid_in;
  for (std::size_t l = m.cfg.splice_layer; l < m.cfg.layers; ++l) block(m, m.layers[l], resid);
  DenseMatrix h(resid.rows, m.cfg.d_model);
  for (std::size_t t = 0; t < resid.rows; ++t) layer_norm(resid.row(t), m.lnf_g, m.lnf_b, h.row(t));
  DenseMatrix logits;
  matmul_nt(h, m.unembed, logits);
  return logits;
}

void apply_splice(const Splice& s, DenseMatrix& resid) {
  if (s.mode == SpliceMode::identity) return;
  const bool needs_ae = s.mode == SpliceMode::reconstruct || s.mode == SpliceMode::reconstruct_ablate_latent ||
                        s.mode == SpliceMode::explanations;
  if (needs_ae) {
    require(s.ae && s.ae_cfg, "splice: this mode needs an autoencoder");
    require(s.ae->d == resid.cols, "splice: autoencoder d != subject d_model");
  }
  if (s.mode == SpliceMode::explanations) require(static_cast<bool>(s.simulate), "splice: explanations need a simulator");
  if (s.mode == SpliceMode::custom) require(static_cast<bool>(s.edit), "splice: custom mode needs an edit function");
  std::vector<float> xn(resid.cols);
  for (std::size_t t = 0; t < resid.rows; ++t) {
    if (s.only_position && *s.only_position != t) continue;
    auto r = resid.row(t);
    switch (s.mode) {
      case SpliceMode::zero:
        std::fill(r.begin(), r.end(), 0.0f);
        break;
      case SpliceMode::custom:
        s.edit(t, r);
        break;
      default: {
        const NormStats ns = normalize_input(r, xn);
        SparseVec z = encode(*s.ae, *s.ae_cfg, xn);
        if (s.mode == SpliceMode::reconstruct_ablate_latent) {
          for (auto& e : z.entries)
            if (e.index == s.latent) e.value = 0.0f;
        } else if (s.mode == SpliceMode::explanations) {
          z = s.simulate(t, z);
        }
        decode_into(*s.ae, z, r);
        denormalize(r, ns);
        break;
      }
    }
  }
}

ForwardOutput forward_with_splice(const SubjectModel& m, std::span<const std::uint32_t> tokens, const Splice& s) {
  ForwardOutput out;
  out.residual = forward_to_splice(m, tokens);
  if (s.mode == SpliceMode::identity) {
    out.logits = forward_from_splice(m, out.residual);
  } else {
    DenseMatrix r = out.residual;
    apply_splice(s, r);
    out.logits = forward_from_splice(m, r);
  }
  return out;
}

namespace {

void log_softmax(std::span<const float> logits, std::vector<double>& out) {
  out.resize(logits.size());
  const float mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double lz = std::log(z) + mx;
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
}

}  // namespace

double next_token_ce(const DenseMatrix& logits, std::span<const std::uint32_t> tokens) {
  require(logits.rows == tokens.size() && tokens.size() >= 2, "next_token_ce: need >= 2 positions");
  std::vector<double> lp;
  double ce = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    log_softmax(logits.row(t), lp);
    ce -= lp[tokens[t + 1]];
  }
  return ce / static_cast<double>(tokens.size() - 1);
}

DownstreamMetrics downstream_metrics(const SubjectModel& m, const Splice& s, const SequenceStore& seqs,
                                     std::size_t max_seqs) {
  require(seqs.n_seqs() >= 1 && seqs.seq_len >= 2, "downstream_metrics: need sequences of length >= 2");
  const std::size_t S = max_seqs == 0 ? seqs.n_seqs() : std::min(max_seqs, seqs.n_seqs());
  DownstreamMetrics out;
  Splice zero;
  zero.mode = SpliceMode::zero;
  zero.only_position = s.only_position;
  std::vector<double> lp_c, lp_s;
  double kl = 0.0;
  std::size_t kl_n = 0;
  for (std::size_t i = 0; i < S; ++i) {
    const auto tok = seqs.seq(i);
    const DenseMatrix resid = forward_to_splice(m, tok);
    const DenseMatrix clean = forward_from_splice(m, resid);
    DenseMatrix r = resid;
    apply_splice(s, r);
    const DenseMatrix spliced = forward_from_splice(m, r);
    r = resid;
    apply_splice(zero, r);
    const DenseMatrix zeroed = forward_from_splice(m, r);
    out.ce_clean += next_token_ce(clean, tok);
    out.ce_spliced += next_token_ce(spliced, tok);
    out.ce_zero += next_token_ce(zeroed, tok);
    for (std::size_t t = 0; t + 1 < tok.size(); ++t) {
      log_softmax(clean.row(t), lp_c);
      log_softmax(spliced.row(t), lp_s);
      double k = 0.0;
      for (std::size_t v = 0; v < lp_c.size(); ++v) k += std::exp(lp_c[v]) * (lp_c[v] - lp_s[v]);
      kl += std::max(0.0, k);
      ++kl_n;
    }
  }
  out.ce_clean /= static_cast<double>(S);
  out.ce_spliced /= static_cast<double>(S);
  out.ce_zero /= static_cast<double>(S);
  out.kl = kl / static_cast<double>(kl_n);
  out.delta_ce = out.ce_spliced - out.ce_clean;
  const double denom = out.ce_zero - out.ce_clean;
  if (denom != 0.0) out.fidelity = (out.ce_zero - out.ce_spliced) / denom;
  return out;
}

ActivationStore capture_activations(const SubjectModel& m, const SequenceStore& seqs) {
  ActivationStore out;
  out.seq_len = seqs.seq_len;
  out.acts = DenseMatrix(seqs.n_seqs() * seqs.seq_len, m.cfg.d_model);
  for (std::size_t s = 0; s < seqs.n_seqs(); ++s) {
    const DenseMatrix r = forward_to_splice(m, seqs.seq(s));
    std::copy(r.data.begin(), r.data.end(), out.acts.data.begin() + static_cast<std::ptrdiff_t>(s * r.data.size()));
  }
  return out;
}

SequenceStore random_sequences(std::size_t vocab, std::size_t seq_len, std::size_t n_seqs, std::uint64_t seed) {
  require(vocab >= 1 && seq_len >= 1, "random_sequences: vocab and seq_len must be >= 1");
  SequenceStore s;
  s.vocab = static_cast<std::uint32_t>(vocab);
  s.seq_len = static_cast<std::uint32_t>(seq_len);
  s.tokens.resize(seq_len * n_seqs);
  std::mt19937_64 rng(seed);
  for (auto& t : s.tokens) t = static_cast<std::uint32_t>(rng() % vocab);
  return s;
}

}  // namespace sae
