#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "transx/model_config.hpp"

namespace transx {

inline constexpr const char* kSeedEnvVar = "TRANSX_SEED";

struct BenchConfig {
  std::vector<std::string> modes{"attention-full", "ssd-recurrent", "ssd-chunked", "hybrid"};
  std::vector<std::size_t> lengths{1024, 2048, 4096};
  std::size_t batch = 1;
  bool fp32 = false;
  bool backward = false;
  std::size_t warmups = 2;
  std::size_t iterations = 5;
  std::size_t workers = 1;
  double memory_limit_mb = 3072.0;
  double min_sample_seconds = 0.05;
};

struct GenerateConfig {
  std::string prompt;
  std::size_t n_new = 32;
  double temperature = 0.0;
  bool trace = false;
};

/// Everything a command needs. Precedence: CLI flags > config file > env seed > defaults.
struct RunConfig {
  ModelConfig model = ModelConfig::micro();
  TrainConfig train;
  BenchConfig bench;
  GenerateConfig generate;
  std::string task = "copy";
  std::size_t seq_len = 32;
  bool ablate_ssd_rope = false;
  std::string out_dir = "run";

  /// Model config with the ablation switch applied.
  ModelConfig effective_model() const;
};

void to_json(nlohmann::json& j, const BenchConfig& c);
void from_json(const nlohmann::json& j, BenchConfig& c);
void to_json(nlohmann::json& j, const GenerateConfig& c);
void from_json(const nlohmann::json& j, GenerateConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Defaults with the env seed applied, then the config file (if any) merged on top.
/// Throws ConfigError on unreadable or malformed files and unknown top-level keys.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file);

/// Applies an environment seed override to the defaults, if set.
void apply_env_seed(RunConfig& cfg);

std::string build_id();

/// Self-describing header written first by every command.
nlohmann::json run_metadata(const std::string& command, const RunConfig& cfg);

}  // namespace transx
