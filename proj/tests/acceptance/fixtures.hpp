#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sae/autoencoder.hpp"
#include "sae/data.hpp"
#include "sae/subject.hpp"
#include "sae/trainer.hpp"

namespace fixtures {

using namespace sae;

// Last `count` rows of a store, normalized.
DenseMatrix heldout_rows(const ActivationStore& s, std::size_t count);

// Whichever of the raw and EMA weights reconstructs X better, with its eval.
struct Chosen {
  const AutoencoderParams* params = nullptr;
  BatchEval eval;
};
Chosen best_weights(const TrainResult& r, const DenseMatrix& X);

// Mean over ground-truth atoms of the best cosine against any decoder row.
double mean_max_cosine(const DenseMatrix& dictionary, const DenseMatrix& W_dec);

// y at x by piecewise power-law interpolation of (xs, ys), xs ascending.
double loglog_interp(const std::vector<double>& xs, const std::vector<double>& ys, double x);

// Runs the CLI with a shell-quoted argument string; returns the exit status.
int run_cli(const std::string& args);
std::string slurp(const std::string& path);

// One-layer-deep "bigram" transformer: the residual entering layer 1 holds a
// one-hot of the current token, a one-hot of the position and a one-hot of the
// previous token (position 0 sees itself). Layer 1 is zero. Token 0 is unused
// so it can serve as the pad token.
struct BigramSubject {
  SubjectModel model;
  std::size_t vocab = 0;
  // Coordinates of the normalized residual: on/off values in the token and
  // previous-token blocks (identical at every position by construction).
  float tok_on = 0, tok_off = 0, prev_on = 0, prev_off = 0;
};
BigramSubject make_bigram_subject(std::size_t vocab, std::size_t ctx, std::uint64_t seed);

// Hand-built ReLU autoencoder over a bigram subject. Each latent outputs 0.5
// when it fires and is negative otherwise.
struct HandLatent {
  std::vector<std::uint32_t> current;  // fires if the current token is any of these...
  std::int64_t previous = -1;          // ...and (when >= 0) the previous token is this one
};
AutoencoderParams make_hand_autoencoder(const BigramSubject& s, const std::vector<HandLatent>& latents,
                                        std::uint64_t seed);

// Uniform tokens in [1, vocab).
SequenceStore nonpad_sequences(std::size_t vocab, std::size_t seq_len, std::size_t n, std::uint64_t seed);

}  // namespace fixtures
