#include "transx/run_config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "transx/errors.hpp"
#include "transx/tensor.hpp"

#ifndef TRANSX_BUILD_ID
#define TRANSX_BUILD_ID "unknown"
#endif

namespace transx {

#define TRANSX_TO(field) j[#field] = c.field
#define TRANSX_FROM(field) \
  if (j.contains(#field)) j.at(#field).get_to(c.field)

void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = nlohmann::json::object();
  TRANSX_TO(modes); TRANSX_TO(lengths); TRANSX_TO(batch); TRANSX_TO(fp32); TRANSX_TO(backward);
  TRANSX_TO(warmups); TRANSX_TO(iterations); TRANSX_TO(workers); TRANSX_TO(memory_limit_mb);
  TRANSX_TO(min_sample_seconds);
}

void from_json(const nlohmann::json& j, BenchConfig& c) {
  TRANSX_FROM(modes); TRANSX_FROM(lengths); TRANSX_FROM(batch); TRANSX_FROM(fp32); TRANSX_FROM(backward);
  TRANSX_FROM(warmups); TRANSX_FROM(iterations); TRANSX_FROM(workers); TRANSX_FROM(memory_limit_mb);
  TRANSX_FROM(min_sample_seconds);
}

void to_json(nlohmann::json& j, const GenerateConfig& c) {
  j = nlohmann::json::object();
  TRANSX_TO(prompt); TRANSX_TO(n_new); TRANSX_TO(temperature); TRANSX_TO(trace);
}

void from_json(const nlohmann::json& j, GenerateConfig& c) {
  TRANSX_FROM(prompt); TRANSX_FROM(n_new); TRANSX_FROM(temperature); TRANSX_FROM(trace);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  TRANSX_TO(model); TRANSX_TO(train); TRANSX_TO(bench); TRANSX_TO(generate);
  TRANSX_TO(task); TRANSX_TO(seq_len); TRANSX_TO(ablate_ssd_rope); TRANSX_TO(out_dir);
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const char* known[] = {"model", "train", "bench", "generate", "task", "seq_len", "ablate_ssd_rope", "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("config: unknown field '" + key + "'");
    }
  }
  TRANSX_FROM(model); TRANSX_FROM(train); TRANSX_FROM(bench); TRANSX_FROM(generate);
  TRANSX_FROM(task); TRANSX_FROM(seq_len); TRANSX_FROM(ablate_ssd_rope); TRANSX_FROM(out_dir);
}

#undef TRANSX_TO
#undef TRANSX_FROM

ModelConfig RunConfig::effective_model() const {
  ModelConfig m = model;
  if (ablate_ssd_rope) m.use_rope_on_ssd = false;
  return m;
}

void apply_env_seed(RunConfig& cfg) {
  const char* env = std::getenv(kSeedEnvVar);
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw ConfigError(std::string(kSeedEnvVar) + " is not an unsigned integer: " + env);
  cfg.train.seed = v;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file) {
  RunConfig cfg;
  apply_env_seed(cfg);
  if (!file) return cfg;
  std::ifstream is(*file);
  if (!is) throw ConfigError("config: cannot read " + file->string());
  try {
    const nlohmann::json j = nlohmann::json::parse(is);
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    from_json(j, cfg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + file->string() + ": " + e.what());
  }
  return cfg;
}

std::string build_id() { return TRANSX_BUILD_ID; }

nlohmann::json run_metadata(const std::string& command, const RunConfig& cfg) {
  return {{"type", "metadata"},
          {"command", command},
          {"config", cfg},
          {"seed", cfg.train.seed},
          {"fp_mode", precision_name(precision())},
          {"build_id", build_id()},
          {"workers", cfg.bench.workers}};
}

}  // namespace transx
