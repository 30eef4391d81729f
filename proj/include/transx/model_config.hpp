#pragma once

#include <cstddef>
#include <cstdint>

#include "json.hpp"

namespace transx {

/// Architecture of the hybrid language model. Field defaults follow the
/// d_state=128 / chunk_len=256 convention; micro() is the desk-scale preset.
struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_modules = 2;
  std::size_t n_heads = 4;
  std::size_t d_state = 128;
  std::size_t chunk_len = 256;
  std::size_t vocab_size = 259;
  std::size_t max_position = 4096;
  double rope_base = 10000.0;
  bool long_position_scaling = false;
  std::size_t long_position_base = 512;
  bool use_rope_on_ssd = true;
  bool use_rope_on_attention = true;
  std::size_t ss_per_module = 7;
  std::size_t sa_per_module = 1;
  std::size_t ffn_mult = 4;
  double norm_eps = 1e-6;
  double init_std = 0.02;
  double decay_bias_init = 3.0;

  /// d_model=64, 2 modules, 4 heads, d_state=16, chunk_len=16.
  static ModelConfig micro();

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t sublayers_per_module() const { return ss_per_module + sa_per_module; }
  std::size_t total_sublayers() const { return n_modules * sublayers_per_module(); }
  void validate() const;
};

struct TrainConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_fraction = 0.10;
  double final_lr_fraction = 0.10;
  double grad_clip = 1.0;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  std::size_t eval_batches = 4;
  std::size_t checkpoint_every = 0;
  std::size_t queue_capacity = 4;
  bool timing_in_metrics = false;  // wall-clock numbers make logs non-reproducible
  double target_accuracy = 0.0;  // > 0: stop after an evaluation reaching it

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace transx
