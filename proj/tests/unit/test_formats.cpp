#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sae/checkpoint.hpp"
#include "sae/config.hpp"
#include "sae/data.hpp"
#include "sae/error.hpp"
#include "sae/scaling.hpp"
#include "sae/subject.hpp"
#include "support.hpp"

using namespace sae;
using namespace sae::testing;

namespace {

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[off + i];
  return v;
}

}  // namespace

TEST_CASE("actdump byte layout and round trip") {
  ActivationStore s{DenseMatrix(2, 3), 0};
  s.acts.data = {1, 2, 3, 4, 5, 6};
  const auto b = encode_actdump(s);
  CHECK(b.size() == 8 + 4 + 4 + 8 + 6 * 4);
  CHECK(std::memcmp(b.data(), "SAEACT01", 8) == 0);
  CHECK(b[8] == 3);
  CHECK(read_u64(b, 16) == 2);
  float f;
  std::memcpy(&f, b.data() + 24 + 4 * 5, 4);
  CHECK(f == 6.0f);
  const ActivationStore r = decode_actdump(b);
  CHECK(r.acts.data == s.acts.data);
  CHECK(r.d() == 3);

  auto cut = b;
  cut.resize(cut.size() - 3);
  const std::string msg = error_of([&] { decode_actdump(cut); });
  CHECK(msg.find("byte") != std::string::npos);
  CHECK_THROWS_AS(decode_actdump(cut), FormatError);
  auto bad = b;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_actdump(bad), FormatError);
  auto huge = b;
  huge[23] = 0x7f;  // absurd row count must not allocate
  CHECK_THROWS_AS(decode_actdump(huge), FormatError);
}

TEST_CASE("tokdump and labeldump round trip and validate") {
  SequenceStore s{10, 4, {1, 2, 3, 4, 9, 8, 7, 6}};
  const auto b = encode_tokdump(s);
  const SequenceStore r = decode_tokdump(b);
  CHECK(r.tokens == s.tokens);
  CHECK(r.n_seqs() == 2);
  SequenceStore bad{5, 4, {1, 2, 3, 4, 9, 8, 7, 6}};
  const std::string msg = error_of([&] { decode_tokdump(encode_tokdump(bad)); });
  CHECK(msg.find("byte") != std::string::npos);

  const std::vector<std::uint8_t> lab{0, 1, 1, 0, 1};
  CHECK(decode_labeldump(encode_labeldump(lab)) == lab);
  auto lb = encode_labeldump(lab);
  lb.pop_back();
  CHECK_THROWS_AS(decode_labeldump(lb), FormatError);
}

TEST_CASE("file round trip through disk") {
  const auto dir = std::filesystem::temp_directory_path() / "sae_format_test";
  std::filesystem::create_directories(dir);
  const ActivationStore s = gen_gaussian(5, 17, 3);
  save_actdump(dir / "a.bin", s);
  CHECK(load_actdump(dir / "a.bin").acts.data == s.acts.data);
  CHECK_THROWS_AS(load_actdump(dir / "missing.bin"), FormatError);
}

TEST_CASE("checkpoint stores the decoder d x n and round trips every tensor") {
  std::mt19937_64 rng(4);
  Checkpoint ck;
  ck.config.n = 5;
  ck.config.k = 2;
  ck.config = resolve_config(ck.config, 3);
  auto& p = ck.params;
  p.n = 5;
  p.d = 3;
  p.W_enc = random_matrix(5, 3, rng);
  p.W_dec = random_matrix(5, 3, rng);
  p.b_pre = random_vector(3, rng);
  ck.ema = p;
  ck.ema->b_pre[0] += 1.0f;
  ck.adam = make_adam(0.01f, slot_sizes(p));
  ck.adam->step = 12;
  ck.adam->m[2][4] = 0.25f;
  ck.step = 12;
  ck.tokens_seen = 3072;
  ck.loss_baseline = 0.015;
  ck.extra = {{"note", "x"}};
  const auto b = encode_checkpoint(ck);
  CHECK(std::memcmp(b.data(), "SAECKPT1", 8) == 0);
  const std::uint64_t hlen = read_u64(b, 8);
  const auto header = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  CHECK(header["n"] == 5);
  CHECK(header["activation"] == "topk");
  bool saw_dec = false;
  for (const auto& t : header["tensors"])
    if (t["name"] == "W_dec") {
      saw_dec = true;
      CHECK(t["shape"] == nlohmann::json::array({3, 5}));
    }
  CHECK(saw_dec);

  const Checkpoint r = decode_checkpoint(b);
  CHECK(r.params.W_enc.data == p.W_enc.data);
  CHECK(r.params.W_dec.data == p.W_dec.data);
  CHECK(r.params.b_pre == p.b_pre);
  REQUIRE(r.ema);
  CHECK(r.ema->b_pre == ck.ema->b_pre);
  REQUIRE(r.adam);
  CHECK(r.adam->step == 12);
  CHECK(r.adam->m[2][4] == 0.25f);
  CHECK(r.tokens_seen == 3072);
  CHECK(r.loss_baseline == 0.015);
  CHECK(r.extra["note"] == "x");
  CHECK(r.config.k == 2);

  auto cut = b;
  cut.resize(20);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
}

TEST_CASE("subject files round trip") {
  const SubjectModel m = parse_random_subject("5:2,16,2,20,12");
  CHECK(m.cfg.splice_layer == 1);
  const SubjectModel r = decode_subject(encode_subject(m));
  CHECK(r.wte.data == m.wte.data);
  CHECK(r.layers[1].w2.data == m.layers[1].w2.data);
  CHECK(r.cfg.ctx == 12);
  const SubjectModel lin = parse_random_subject("3:linear:8,11");
  CHECK(lin.cfg.variant == SubjectVariant::linear_head);
  CHECK(decode_subject(encode_subject(lin)).wte.data == lin.wte.data);
  CHECK_THROWS_AS(parse_random_subject("nonsense"), InvalidArgument);
}

TEST_CASE("run config is strict and round trips") {
  RunConfig c;
  c.ae.n = 128;
  c.ae.k = 8;
  c.train.lr = 2e-3;
  c.metrics.test_time_k = {4, 8};
  const auto j = to_json(c);
  RunConfig r;
  merge_json(nlohmann::json::parse(j.dump()), r);
  CHECK(to_json(r).dump() == j.dump());
  auto bad = nlohmann::json::parse(j.dump());
  bad["train"]["learning_rate"] = 1.0;
  const std::string msg = error_of([&] { merge_json(bad, r); });
  CHECK(msg.find("learning_rate") != std::string::npos);
  auto top = nlohmann::json::parse(j.dump());
  top["extra"] = 1;
  CHECK_THROWS_AS(merge_json(top, r), InvalidArgument);
}

TEST_CASE("sweep csv round trip") {
  std::vector<SweepRow> rows(2);
  rows[0] = {256, 8, 1e-3, 1, 100000, compute_proxy(64, 256, 100000), 0.25, 0.01, 8.0, 1.5};
  rows[1] = {512, 8, 7e-4, 18446744073709551615ull, 200000, compute_proxy(64, 512, 200000), 0.2, 0.0, 8.0, 2.0};
  std::stringstream ss;
  write_sweep_csv(ss, rows);
  CHECK(ss.str().rfind("n,k,lr,seed,tokens,compute_proxy,val_nmse,dead_frac,L0,wall_seconds\n", 0) == 0);
  const auto back = read_sweep_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].seed == rows[1].seed);
  CHECK(back[0].compute_proxy == doctest::Approx(6.0 * 64 * 256 * 100000));
  std::stringstream missing("n,k\n1,2\n");
  CHECK_THROWS_AS(read_sweep_csv(missing), FormatError);
}

TEST_CASE("dictionary data generator") {
  DictDataConfig c;
  c.d = 12;
  c.n_true = 20;
  c.k_true = 3;
  c.rows = 50;
  c.noise_sigma = 0.0f;
  const DictData dd = gen_dictionary_data(c);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0.0, ss = 0.0;
    for (float v : dd.dictionary.row(i)) {
      s += v;
      ss += static_cast<double>(v) * v;
    }
    CHECK(std::abs(s) < 1e-5);
    CHECK(ss == doctest::Approx(1.0).epsilon(1e-5));
  }
  for (std::size_t r = 0; r < 50; ++r) {
    CHECK(dd.codes[r].entries.size() == 3);
    std::vector<double> x(12, 0.0);
    for (const auto& e : dd.codes[r].entries) {
      CHECK(e.value >= 0.5f);
      CHECK(e.value <= 1.5f);
      for (std::size_t q = 0; q < 12; ++q) x[q] += e.value * dd.dictionary(e.index, q);
    }
    for (std::size_t q = 0; q < 12; ++q) CHECK(dd.store.acts(r, q) == doctest::Approx(x[q]).epsilon(1e-5));
  }
  CHECK(validation_rows(100) == 5);
  CHECK(validation_rows(2) == 1);
}

TEST_CASE("batch iterator covers the training split once per epoch") {
  BatchIterator it(100, 10, 4, Split::train);
  CHECK(it.split_rows() == 95);
  std::vector<int> seen(100, 0);
  std::size_t got = 0;
  while (it.epoch() == 0 && got < 95) {
    for (auto r : it.next()) {
      ++seen[r];
      ++got;
    }
  }
  for (std::size_t r = 0; r < 95; ++r) CHECK(seen[r] >= 1);
  for (std::size_t r = 95; r < 100; ++r) CHECK(seen[r] == 0);
}
