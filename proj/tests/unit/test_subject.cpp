#include <doctest.h>

#include <cmath>

#include "sae/error.hpp"
#include "sae/subject.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

TEST_CASE("identity splice reproduces the clean forward pass") {
  const SubjectModel m = parse_random_subject("1:2,16,4,24,16");
  const SequenceStore s = random_sequences(24, 16, 2, 3);
  const auto tok = s.seq(0);
  const ForwardOutput clean = forward_with_splice(m, tok);
  const DenseMatrix resid = forward_to_splice(m, tok);
  CHECK(resid.data == clean.residual.data);
  const DenseMatrix logits = forward_from_splice(m, resid);
  CHECK(logits.data == clean.logits.data);
  CHECK(logits.rows == 16);
  CHECK(logits.cols == 24);
}

TEST_CASE("the subject is causal") {
  const SubjectModel m = parse_random_subject("2:2,16,2,20,12");
  std::vector<std::uint32_t> a{1, 2, 3, 4, 5, 6, 7, 8}, b = a;
  b[6] = 19;
  const auto la = forward_with_splice(m, a).logits, lb = forward_with_splice(m, b).logits;
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t v = 0; v < 20; ++v) CHECK(la(t, v) == lb(t, v));
  bool differs = false;
  for (std::size_t v = 0; v < 20; ++v) differs |= la(7, v) != lb(7, v);
  CHECK(differs);
}

TEST_CASE("next-token cross entropy") {
  DenseMatrix L(3, 2);
  L.data = {0.0f, 0.0f, 2.0f, 0.0f, 5.0f, 5.0f};
  const std::vector<std::uint32_t> tok{0, 1, 0};
  // Positions 0 and 1 predict tokens 1 and 0.
  const double want = (std::log(2.0) + std::log1p(std::exp(-2.0))) / 2.0;
  CHECK(next_token_ce(L, tok) == doctest::Approx(want));
}

TEST_CASE("linear head subject computes LN(wte) times the unembedding") {
  const SubjectModel m = parse_random_subject("4:linear:6,9");
  const std::vector<std::uint32_t> tok{3, 7};
  const auto out = forward_with_splice(m, tok);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto e = m.wte.row(tok[t]);
    double mean = 0.0, var = 0.0;
    for (float v : e) mean += v;
    mean /= 6.0;
    for (float v : e) var += (v - mean) * (v - mean);
    var /= 6.0;
    for (std::size_t v = 0; v < 9; ++v) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        const double ln = (e[c] - mean) / std::sqrt(var + 1e-5) * m.lnf_g[c] + m.lnf_b[c];
        s += ln * m.unembed(v, c);
      }
      CHECK(out.logits(t, v) == doctest::Approx(s).epsilon(1e-4));
    }
  }
}

TEST_CASE("downstream metrics of the identity and zero splices") {
  const SubjectModel m = parse_random_subject("5:2,16,4,24,16");
  const SequenceStore s = random_sequences(24, 16, 3, 1);
  const DownstreamMetrics id = downstream_metrics(m, Splice{}, s);
  CHECK(id.kl == doctest::Approx(0.0).scale(1.0));
  CHECK(id.delta_ce == doctest::Approx(0.0).scale(1.0));
  Splice z;
  z.mode = SpliceMode::zero;
  const DownstreamMetrics zm = downstream_metrics(m, z, s);
  CHECK(zm.ce_spliced == doctest::Approx(zm.ce_zero));
  REQUIRE(zm.fidelity);
  CHECK(*zm.fidelity == doctest::Approx(0.0).scale(1.0));
  CHECK(zm.kl > 0.0);
}

TEST_CASE("splice edits can be limited to one position") {
  const SubjectModel m = parse_random_subject("6:2,16,2,20,12");
  const std::vector<std::uint32_t> tok{1, 2, 3, 4, 5, 6};
  DenseMatrix r = forward_to_splice(m, tok);
  const DenseMatrix before = r;
  Splice s;
  s.mode = SpliceMode::zero;
  s.only_position = 3;
  apply_splice(s, r);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 16; ++c) CHECK(r(t, c) == (t == 3 ? 0.0f : before(t, c)));
}

TEST_CASE("subject inputs are validated") {
  const SubjectModel m = parse_random_subject("7:1,8,2,10,4");
  const std::vector<std::uint32_t> too_long{1, 2, 3, 4, 5};
  CHECK_THROWS_AS(forward_with_splice(m, too_long), InvalidArgument);
  const std::vector<std::uint32_t> bad_tok{1, 12};
  CHECK_THROWS_AS(forward_with_splice(m, bad_tok), InvalidArgument);
}

TEST_CASE("captured activations are the residual at the splice") {
  const SubjectModel m = parse_random_subject("8:2,16,2,20,12");
  const SequenceStore s = random_sequences(20, 8, 2, 4);
  const ActivationStore a = capture_activations(m, s);
  CHECK(a.rows() == 16);
  CHECK(a.seq_len == 8);
  const DenseMatrix r = forward_to_splice(m, s.seq(1));
  for (std::size_t c = 0; c < 16; ++c) CHECK(a.acts(8 + 2, c) == r(2, c));
}
