#pragma once

// Strict JSON run configuration. Unknown keys anywhere are rejected.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sae/autoencoder.hpp"
#include "sae/trainer.hpp"

namespace sae {

struct DataPaths {
  std::string data;    // actdump
  std::string tokens;  // tokdump
  std::string labels;  // labeldump
};

struct MetricOptions {
  std::size_t ablation_T = 16;
  std::size_t ablation_positions = 4;  // probe positions per sequence
  std::size_t ablation_max_latents = 0;  // 0 = every active latent
  std::size_t ablation_sequences = 8;
  std::size_t refine_iters = 200;
  std::vector<std::size_t> test_time_k;
  std::vector<float> jumprelu_theta;
  std::size_t n2g_contexts = 16;
  std::uint32_t pad_token = 0;
  std::size_t eval_rows = 0;  // 0 = all validation rows
};

struct RunConfig {
  int schema_version = 1;
  AeConfig ae;
  TrainConfig train;
  DataPaths paths;
  std::string subject;
  MetricOptions metrics;
};

nlohmann::ordered_json to_json(const AeConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);

// Fields absent from j keep the values already in out. Throws InvalidArgument
// naming the offending key for unknown keys or mistyped values.
void merge_json(const nlohmann::json& j, AeConfig& out);
void merge_json(const nlohmann::json& j, TrainConfig& out);
void merge_json(const nlohmann::json& j, RunConfig& out);

RunConfig load_run_config(const std::string& path);

}  // namespace sae
