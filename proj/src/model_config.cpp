#include "transx/model_config.hpp"

#include <string>

#include "transx/errors.hpp"

namespace transx {

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.d_model = 64;
  c.n_modules = 2;
  c.n_heads = 4;
  c.d_state = 16;
  c.chunk_len = 16;
  return c;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw DomainError("ModelConfig: d_model must be a positive multiple of n_heads");
  }
  if (head_dim() % 2 != 0) throw DomainError("ModelConfig: per-head dim must be even");
  if (d_state == 0 || d_state % 2 != 0) throw DomainError("ModelConfig: d_state must be even");
  if (chunk_len == 0) throw DomainError("ModelConfig: chunk_len must be >= 1");
  if (vocab_size == 0 || max_position == 0) throw DomainError("ModelConfig: vocab_size and max_position must be positive");
  if (sublayers_per_module() == 0) throw DomainError("ModelConfig: a module needs at least one sub-layer");
  if (!(rope_base > 1.0)) throw DomainError("ModelConfig: rope_base must be > 1");
  if (long_position_base < 2) throw DomainError("ModelConfig: long_position_base must be >= 2");
  if (!(norm_eps > 0.0)) throw DomainError("ModelConfig: norm_eps must be positive");
}

void TrainConfig::validate() const {
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw DomainError("TrainConfig: warmup_fraction must be in [0, 1)");
  if (lr < 0.0 || weight_decay < 0.0) throw DomainError("TrainConfig: lr and weight_decay must be non-negative");
  if (batch_size == 0) throw DomainError("TrainConfig: batch_size must be positive");
  if (queue_capacity == 0) throw DomainError("TrainConfig: queue_capacity must be positive");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) throw DomainError("TrainConfig: final_lr_fraction in [0, 1]");
}

#define TRANSX_TO(field) j[#field] = c.field
#define TRANSX_FROM(field) \
  if (j.contains(#field)) j.at(#field).get_to(c.field)

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json::object();
  TRANSX_TO(d_model); TRANSX_TO(n_modules); TRANSX_TO(n_heads); TRANSX_TO(d_state);
  TRANSX_TO(chunk_len); TRANSX_TO(vocab_size); TRANSX_TO(max_position); TRANSX_TO(rope_base);
  TRANSX_TO(long_position_scaling); TRANSX_TO(long_position_base); TRANSX_TO(use_rope_on_ssd);
  TRANSX_TO(use_rope_on_attention); TRANSX_TO(ss_per_module); TRANSX_TO(sa_per_module);
  TRANSX_TO(ffn_mult); TRANSX_TO(norm_eps); TRANSX_TO(init_std); TRANSX_TO(decay_bias_init);
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  TRANSX_FROM(d_model); TRANSX_FROM(n_modules); TRANSX_FROM(n_heads); TRANSX_FROM(d_state);
  TRANSX_FROM(chunk_len); TRANSX_FROM(vocab_size); TRANSX_FROM(max_position); TRANSX_FROM(rope_base);
  TRANSX_FROM(long_position_scaling); TRANSX_FROM(long_position_base); TRANSX_FROM(use_rope_on_ssd);
  TRANSX_FROM(use_rope_on_attention); TRANSX_FROM(ss_per_module); TRANSX_FROM(sa_per_module);
  TRANSX_FROM(ffn_mult); TRANSX_FROM(norm_eps); TRANSX_FROM(init_std); TRANSX_FROM(decay_bias_init);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  TRANSX_TO(lr); TRANSX_TO(beta1); TRANSX_TO(beta2); TRANSX_TO(adam_eps); TRANSX_TO(weight_decay);
  TRANSX_TO(warmup_fraction); TRANSX_TO(final_lr_fraction); TRANSX_TO(grad_clip); TRANSX_TO(steps);
  TRANSX_TO(batch_size); TRANSX_TO(seed); TRANSX_TO(eval_every); TRANSX_TO(eval_batches);
  TRANSX_TO(checkpoint_every); TRANSX_TO(queue_capacity); TRANSX_TO(timing_in_metrics);
  TRANSX_TO(target_accuracy);
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TRANSX_FROM(lr); TRANSX_FROM(beta1); TRANSX_FROM(beta2); TRANSX_FROM(adam_eps); TRANSX_FROM(weight_decay);
  TRANSX_FROM(warmup_fraction); TRANSX_FROM(final_lr_fraction); TRANSX_FROM(grad_clip); TRANSX_FROM(steps);
  TRANSX_FROM(batch_size); TRANSX_FROM(seed); TRANSX_FROM(eval_every); TRANSX_FROM(eval_batches);
  TRANSX_FROM(checkpoint_every); TRANSX_FROM(queue_capacity); TRANSX_FROM(timing_in_metrics);
  TRANSX_FROM(target_accuracy);
}

#undef TRANSX_TO
#undef TRANSX_FROM

}  // namespace transx
