#pragma once

// Activation/token/label stores, their binary file formats, synthetic
// generators and batching.
//
// actdump   "SAEACT01" | u32 d | u32 seq_len (0 = unsequenced) | u64 rows | rows*d f32
// tokdump   "SAETOK01" | u32 V | u32 seq_len | u64 n_seqs | n_seqs*seq_len u32
// labeldump "SAELBL01" | u64 rows | rows u8
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <span>
#include <vector>

#include "sae/tensor.hpp"

namespace sae {

struct ActivationStore {
  DenseMatrix acts;            // rows x d, raw (unnormalized)
  std::uint32_t seq_len = 0;   // 0 when rows are not grouped into sequences

  std::size_t rows() const { return acts.rows; }
  std::size_t d() const { return acts.cols; }
};

struct SequenceStore {
  std::uint32_t vocab = 0;
  std::uint32_t seq_len = 64;
  std::vector<std::uint32_t> tokens;  // n_seqs * seq_len

  std::size_t n_seqs() const { return seq_len == 0 ? 0 : tokens.size() / seq_len; }
  std::span<const std::uint32_t> seq(std::size_t s) const { return {tokens.data() + s * seq_len, seq_len}; }
};

struct ProbeTask {
  std::string name;
  std::vector<std::uint8_t> labels;  // one per activation row
};

void save_actdump(const std::filesystem::path& path, const ActivationStore& store);
ActivationStore load_actdump(const std::filesystem::path& path);
void save_tokdump(const std::filesystem::path& path, const SequenceStore& seqs);
SequenceStore load_tokdump(const std::filesystem::path& path);
void save_labeldump(const std::filesystem::path& path, std::span<const std::uint8_t> labels);
std::vector<std::uint8_t> load_labeldump(const std::filesystem::path& path);

// Byte-level encoders shared by the file functions (exposed for fixtures).
std::vector<std::uint8_t> encode_actdump(const ActivationStore& store);
ActivationStore decode_actdump(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_tokdump(const SequenceStore& seqs);
SequenceStore decode_tokdump(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_labeldump(std::span<const std::uint8_t> labels);
std::vector<std::uint8_t> decode_labeldump(std::span<const std::uint8_t> bytes);

// i.i.d. standard normal entries.
ActivationStore gen_gaussian(std::size_t d, std::size_t rows, std::uint64_t seed);

struct DictDataConfig {
  std::size_t d = 64;
  std::size_t n_true = 256;
  std::size_t k_true = 8;
  float value_lo = 0.5f;
  float value_hi = 1.5f;
  float noise_sigma = 0.01f;
  std::size_t rows = 100000;
  std::uint64_t seed = 0;
};

struct DictData {
  ActivationStore store;
  DenseMatrix dictionary;        // n_true x d, rows unit norm with zero mean over d
  std::vector<SparseVec> codes;  // per row, k_true positive entries
};

// x = D a + sigma * noise, a with k_true uniform[lo,hi] entries at uniformly random indices.
DictData gen_dictionary_data(const DictDataConfig& cfg);

enum class Split { train, validation };

// Validation is the final 5% of rows (at least one row when rows >= 2).
std::size_t validation_rows(std::size_t rows);

// Yields row-index batches. Training batches walk a fresh seeded permutation
// of the training rows each epoch; validation batches walk the fixed split in order.
class BatchIterator {
 public:
  BatchIterator(std::size_t total_rows, std::size_t batch_size, std::uint64_t seed, Split split);

  std::vector<std::size_t> next();
  std::size_t epoch() const { return epoch_; }
  std::size_t split_rows() const { return end_ - begin_; }

 private:
  void reshuffle();

  std::size_t begin_ = 0;
  std::size_t end_ = 0;
  std::size_t batch_size_ = 0;
  std::uint64_t seed_ = 0;
  Split split_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Copies the given rows of src into dst (resizing as needed).
void gather_rows(const DenseMatrix& src, std::span<const std::size_t> rows, DenseMatrix& dst);

// Seeded Fisher-Yates so permutations are identical across standard libraries.
void seeded_shuffle(std::span<std::size_t> v, std::mt19937_64& rng);

}  // namespace sae
