#include "sae/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bytes.hpp"
#include "sae/error.hpp"

namespace sae {

using detail::ByteReader;
using detail::ByteWriter;

std::vector<std::uint8_t> encode_actdump(const ActivationStore& store) {
  ByteWriter w;
  w.magic("SAEACT01");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.d()));
  w.put<std::uint32_t>(store.seq_len);
  w.put<std::uint64_t>(store.rows());
  w.put_array<float>(store.acts.data);
  return std::move(w.bytes());
}

ActivationStore decode_actdump(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "actdump");
  r.expect_magic("SAEACT01");
  const auto d = r.get<std::uint32_t>("d");
  const auto seq_len = r.get<std::uint32_t>("seq_len");
  const auto rows = r.get<std::uint64_t>("rows");
  if (d == 0) throw FormatError("actdump: d = 0 at byte 8");
  if (rows > r.remaining() / (4ull * d))
    throw FormatError("actdump: declared " + std::to_string(rows) + " rows x d=" + std::to_string(d) +
                      " needs " + std::to_string(rows * 4ull * d) + " payload bytes at offset 24, file has " +
                      std::to_string(r.remaining()));
  ActivationStore s;
  s.seq_len = seq_len;
  s.acts.rows = rows;
  s.acts.cols = d;
  s.acts.data = r.get_array<float>(rows * d, "activations");
  r.expect_end();
  return s;
}

std::vector<std::uint8_t> encode_tokdump(const SequenceStore& seqs) {
  require(seqs.seq_len > 0 && seqs.tokens.size() % seqs.seq_len == 0, "tokdump: tokens not a multiple of seq_len");
  ByteWriter w;
  w.magic("SAETOK01");
  w.put<std::uint32_t>(seqs.vocab);
  w.put<std::uint32_t>(seqs.seq_len);
  w.put<std::uint64_t>(seqs.n_seqs());
  w.put_array<std::uint32_t>(seqs.tokens);
  return std::move(w.bytes());
}

SequenceStore decode_tokdump(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "tokdump");
  r.expect_magic("SAETOK01");
  SequenceStore s;
  s.vocab = r.get<std::uint32_t>("vocab");
  s.seq_len = r.get<std::uint32_t>("seq_len");
  const auto n = r.get<std::uint64_t>("n_seqs");
  if (s.seq_len == 0) throw FormatError("tokdump: seq_len = 0 at byte 12");
  if (n > r.remaining() / (4ull * s.seq_len))
    throw FormatError("tokdump: declared " + std::to_string(n) + " sequences x " + std::to_string(s.seq_len) +
                      " needs " + std::to_string(n * 4ull * s.seq_len) + " payload bytes at offset 24, file has " +
                      std::to_string(r.remaining()));
  s.tokens = r.get_array<std::uint32_t>(n * s.seq_len, "tokens");
  r.expect_end();
  for (std::size_t i = 0; i < s.tokens.size(); ++i)
    if (s.tokens[i] >= s.vocab)
      throw FormatError("tokdump: token " + std::to_string(s.tokens[i]) + " >= vocab at byte " +
                        std::to_string(24 + 4 * i));
  return s;
}

std::vector<std::uint8_t> encode_labeldump(std::span<const std::uint8_t> labels) {
  ByteWriter w;
  w.magic("SAELBL01");
  w.put<std::uint64_t>(labels.size());
  w.put_array<std::uint8_t>(labels);
  return std::move(w.bytes());
}

std::vector<std::uint8_t> decode_labeldump(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "labeldump");
  r.expect_magic("SAELBL01");
  const auto n = r.get<std::uint64_t>("rows");
  auto labels = r.get_array<std::uint8_t>(n, "labels");
  r.expect_end();
  return labels;
}

void save_actdump(const std::filesystem::path& path, const ActivationStore& store) {
  detail::write_file(path, encode_actdump(store));
}
ActivationStore load_actdump(const std::filesystem::path& path) { return decode_actdump(detail::read_file(path)); }
void save_tokdump(const std::filesystem::path& path, const SequenceStore& seqs) {
  detail::write_file(path, encode_tokdump(seqs));
}
SequenceStore load_tokdump(const std::filesystem::path& path) { return decode_tokdump(detail::read_file(path)); }
void save_labeldump(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  detail::write_file(path, encode_labeldump(labels));
}
std::vector<std::uint8_t> load_labeldump(const std::filesystem::path& path) {
  return decode_labeldump(detail::read_file(path));
}

ActivationStore gen_gaussian(std::size_t d, std::size_t rows, std::uint64_t seed) {
  require(d >= 1 && rows >= 1, "gen_gaussian: need d, rows >= 1");
  ActivationStore s;
  s.acts = DenseMatrix(rows, d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (float& v : s.acts.data) v = g(rng);
  return s;
}

DictData gen_dictionary_data(const DictDataConfig& cfg) {
  require(cfg.d >= 2 && cfg.n_true >= 1 && cfg.rows >= 1, "gen_dictionary_data: bad sizes");
  require(cfg.k_true >= 1 && cfg.k_true <= cfg.n_true, "gen_dictionary_data: need 1 <= k_true <= n_true");
  require(cfg.value_lo <= cfg.value_hi && cfg.noise_sigma >= 0.0f, "gen_dictionary_data: bad value range");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> g(0.0f, 1.0f);

  DictData out;
  out.dictionary = DenseMatrix(cfg.n_true, cfg.d);
  for (std::size_t i = 0; i < cfg.n_true; ++i) {
    auto row = out.dictionary.row(i);
    double norm2 = 0.0;
    do {
      for (float& v : row) v = g(rng);
      const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(cfg.d);
      norm2 = 0.0;
      for (float& v : row) {
        v = static_cast<float>(v - mean);
        norm2 += static_cast<double>(v) * v;
      }
    } while (norm2 == 0.0);
    const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (float& v : row) v *= inv;
  }

  out.store.acts = DenseMatrix(cfg.rows, cfg.d);
  out.codes.resize(cfg.rows);
  std::uniform_real_distribution<float> val(cfg.value_lo, cfg.value_hi);
  std::vector<std::size_t> pool(cfg.n_true);
  for (std::size_t r = 0; r < cfg.rows; ++r) {
    // Partial Fisher-Yates picks k_true distinct atoms.
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t j = 0; j < cfg.k_true; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng() % (cfg.n_true - j));
      std::swap(pool[j], pool[pick]);
    }
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.k_true));
    std::sort(chosen.begin(), chosen.end());
    SparseVec& code = out.codes[r];
    code.dim = cfg.n_true;
    auto x = out.store.acts.row(r);
    for (std::size_t i : chosen) {
      const float a = val(rng);
      code.entries.push_back({static_cast<LatentId>(i), a});
      const auto atom = out.dictionary.row(i);
      for (std::size_t j = 0; j < cfg.d; ++j) x[j] += a * atom[j];
    }
    if (cfg.noise_sigma > 0.0f)
      for (float& v : x) v += cfg.noise_sigma * g(rng);
  }
  return out;
}

std::size_t validation_rows(std::size_t rows) {
  if (rows < 2) return 0;
  return std::max<std::size_t>(1, rows / 20);
}

void seeded_shuffle(std::span<std::size_t> v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

BatchIterator::BatchIterator(std::size_t total_rows, std::size_t batch_size, std::uint64_t seed, Split split)
    : batch_size_(batch_size), seed_(seed), split_(split) {
  require(batch_size >= 1, "batch_iter: batch_size must be >= 1");
  const std::size_t val = validation_rows(total_rows);
  if (split == Split::train) {
    begin_ = 0;
    end_ = total_rows - val;
  } else {
    begin_ = total_rows - val;
    end_ = total_rows;
  }
  require(end_ > begin_, "batch_iter: split is empty");
  order_.resize(end_ - begin_);
  std::iota(order_.begin(), order_.end(), begin_);
  if (split_ == Split::train) reshuffle();
}

void BatchIterator::reshuffle() {
  std::iota(order_.begin(), order_.end(), begin_);
  std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ULL + epoch_ + 1);
  seeded_shuffle(order_, rng);
}

std::vector<std::size_t> BatchIterator::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  while (out.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      cursor_ = 0;
      ++epoch_;
      if (split_ == Split::train) reshuffle();
      if (split_ == Split::validation) break;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

void gather_rows(const DenseMatrix& src, std::span<const std::size_t> rows, DenseMatrix& dst) {
  if (dst.rows != rows.size() || dst.cols != src.cols) dst = DenseMatrix(rows.size(), src.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto s = src.row(rows[i]);
    std::copy(s.begin(), s.end(), dst.row(i).begin());
  }
}

}  // namespace sae
