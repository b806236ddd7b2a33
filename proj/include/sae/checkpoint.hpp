#pragma once

// "SAECKPT1" | u64 header length | UTF-8 JSON header | f32 LE tensors in the
// order listed in header["tensors"]. The base tensors are W_enc (n x d),
// b_enc (n, or 0 when absent), W_dec (d x n), b_pre (d); EMA copies and Adam
// moments follow with "ema." / "adam.m." / "adam.v." prefixes when present.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "sae/autoencoder.hpp"
#include "sae/optimizer.hpp"

namespace sae {

struct Checkpoint {
  AeConfig config;
  AutoencoderParams params;
  std::optional<AutoencoderParams> ema;
  std::optional<AdamState> adam;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double loss_baseline = 0.0;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();  // free-form echo (train config etc.)
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sae
