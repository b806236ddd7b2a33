#pragma once

// Small pre-LN transformer (inference only) with a residual splice point, and a
// linear-head variant. Weights live in a "SAESUB01" named-tensor container:
// magic | u32 tensor count | per tensor: u16 name length, name, u8 rank,
// rank x u32 dims, f32 LE data.
//
// Tensor names: config (rank 1: layers, d_model, heads, vocab, ctx,
// splice_layer, variant), wte (V x d), wpe (ctx x d), h{i}.ln1.g/b,
// h{i}.attn.wq/wk/wv/wo (d x d, out x in), h{i}.ln2.g/b, h{i}.mlp.w1 (4d x d),
// h{i}.mlp.b1, h{i}.mlp.w2 (d x 4d), h{i}.mlp.b2, lnf.g/b, and an optional
// unembed (V x d; wte is used when absent).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sae/autoencoder.hpp"
#include "sae/data.hpp"

namespace sae {

enum class SubjectVariant { transformer = 0, linear_head = 1 };

struct SubjectConfig {
  std::size_t layers = 2;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t vocab = 64;
  std::size_t ctx = 64;
  std::size_t splice_layer = 1;  // residual entering this block is spliced
  SubjectVariant variant = SubjectVariant::transformer;
};

struct SubjectLayer {
  std::vector<float> ln1_g, ln1_b;
  DenseMatrix wq, wk, wv, wo;
  std::vector<float> ln2_g, ln2_b;
  DenseMatrix w1;
  std::vector<float> b1;
  DenseMatrix w2;
  std::vector<float> b2;
};

struct SubjectModel {
  SubjectConfig cfg;
  DenseMatrix wte;
  DenseMatrix wpe;
  std::vector<SubjectLayer> layers;
  std::vector<float> lnf_g, lnf_b;
  DenseMatrix unembed;  // V x d

  void validate() const;
};

// GPT-2 style random init (weights N(0, 0.02), residual projections scaled by
// 1/sqrt(2L), LN gains 1) with the unembedding tied to wte.
SubjectModel random_subject(const SubjectConfig& cfg, std::uint64_t seed, float init_std = 0.02f);

// "SEED:L,D,H,V,CTX[,SPLICE]" or "SEED:linear:D,V" (the part after "random:").
SubjectModel parse_random_subject(const std::string& spec);
// A path to a SAESUB01 file or "random:..." as above.
SubjectModel load_subject_spec(const std::string& spec);

std::vector<std::uint8_t> encode_subject(const SubjectModel& m);
SubjectModel decode_subject(std::span<const std::uint8_t> bytes);
void save_subject(const std::filesystem::path& path, const SubjectModel& m);
SubjectModel load_subject(const std::filesystem::path& path);

enum class SpliceMode { identity, reconstruct, zero, reconstruct_ablate_latent, explanations, custom };

// How the residual at the splice point is replaced. Reconstruct-type modes
// normalize, encode, decode (optionally editing the code) and de-normalize.
struct Splice {
  SpliceMode mode = SpliceMode::identity;
  const AutoencoderParams* ae = nullptr;
  const AeConfig* ae_cfg = nullptr;
  LatentId latent = 0;  // for reconstruct_ablate_latent
  // Replaces the encoded latents at a position (explanations mode).
  std::function<SparseVec(std::size_t pos, const SparseVec& z)> simulate;
  // Arbitrary in-place edit of the residual (custom mode).
  std::function<void(std::size_t pos, std::span<float> resid)> edit;
  // When set, only this position is spliced; others pass through.
  std::optional<std::size_t> only_position;
};

struct ForwardOutput {
  DenseMatrix logits;    // T x V
  DenseMatrix residual;  // T x d, captured before the splice
};

// Residual stream entering block splice_layer (T x d).
DenseMatrix forward_to_splice(const SubjectModel& m, std::span<const std::uint32_t> tokens);
// Continues from a residual at the splice point to logits (T x V).
DenseMatrix forward_from_splice(const SubjectModel& m, const DenseMatrix& resid);
// Applies the splice in place.
void apply_splice(const Splice& s, DenseMatrix& resid);

ForwardOutput forward_with_splice(const SubjectModel& m, std::span<const std::uint32_t> tokens,
                                  const Splice& s = {});

// Mean next-token cross entropy of the logits over positions 0..T-2.
double next_token_ce(const DenseMatrix& logits, std::span<const std::uint32_t> tokens);

struct DownstreamMetrics {
  double ce_clean = 0.0;
  double ce_spliced = 0.0;
  double ce_zero = 0.0;
  double kl = 0.0;         // mean KL(clean || spliced) per predicted position
  double delta_ce = 0.0;   // ce_spliced - ce_clean
  std::optional<double> fidelity;  // missing when ce_zero == ce_clean
};

DownstreamMetrics downstream_metrics(const SubjectModel& m, const Splice& s, const SequenceStore& seqs,
                                     std::size_t max_seqs = 0);

// Residuals at the splice point for every position of every sequence, in
// sequence-major order, with seq_len recorded.
ActivationStore capture_activations(const SubjectModel& m, const SequenceStore& seqs);

// Uniformly random token sequences.
SequenceStore random_sequences(std::size_t vocab, std::size_t seq_len, std::size_t n_seqs, std::uint64_t seed);

}  // namespace sae
