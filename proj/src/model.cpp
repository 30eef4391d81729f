#include <algorithm>
#include <string>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

namespace transx {

std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (id == kBosToken) {
      out += "<bos>";
    } else if (id == kSepToken) {
      out += "<sep>";
    } else if (id == kQueryToken) {
      out += "<query>";
    } else {
      throw DomainError("detokenize: id " + std::to_string(id) + " out of range");
    }
  }
  return out;
}

std::size_t ModelCache::ss_bytes() const {
  std::size_t b = 0;
  for (const auto& m : modules) {
    for (const auto& c : m.ss) b += c.bytes();
  }
  return b;
}

std::size_t ModelCache::sa_bytes() const {
  std::size_t b = 0;
  for (const auto& m : modules) {
    for (const auto& c : m.sa) b += c.bytes();
  }
  return b;
}

Model::Model(ModelConfig config, ModelWeights<Tensor> weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.modules.size() != config_.n_modules) throw ShapeError("Model: module count differs from config");
  for (const auto& m : weights_.modules) validate_module(m, config_);
  if (weights_.embedding.shape() != Shape{config_.vocab_size, config_.d_model} ||
      weights_.final_norm.shape() != Shape{config_.d_model} ||
      weights_.head.shape() != Shape{config_.d_model, config_.vocab_size}) {
    throw ShapeError("Model: embedding/final_norm/head shapes differ from config");
  }
  attn_table_ = build_frequencies(config_.head_dim(), config_.rope_base, config_.max_position);
  ssd_table_ = build_frequencies(config_.d_state, config_.rope_base, config_.max_position);
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng(seed).fork(0);
  ModelWeights<Tensor> w;
  w.embedding = rng.normal_tensor({config.vocab_size, config.d_model}, config.init_std);
  for (std::size_t i = 0; i < config.n_modules; ++i) w.modules.push_back(init_hybrid_module(config, rng));
  w.final_norm = Tensor({config.d_model}, 1.0);
  w.head = rng.normal_tensor({config.d_model, config.vocab_size}, config.init_std);
  return Model(config, std::move(w));
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  ModelWeights<Tensor>::visit(weights_, [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  ModelWeights<Tensor>::visit(weights_, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t->numel();
  return n;
}

ModelCache Model::make_cache() const {
  ModelCache c;
  for (std::size_t i = 0; i < config_.n_modules; ++i) c.modules.push_back(make_module_cache(config_));
  return c;
}

ModelWeights<Var> bind_constants(const ModelWeights<Tensor>& w) {
  return w.map([](const Tensor& t) { return constant_view(t); });
}

ModelWeights<Var> bind_leaves(const ModelWeights<Tensor>& w, Tape& tape) {
  // Leaves alias the stored tensors; the tape must not outlive the model.
  return w.map([&tape](const Tensor& t) { return tape.leaf(std::shared_ptr<const Tensor>(std::shared_ptr<void>(), &t)); });
}

std::vector<Var> flatten(const ModelWeights<Var>& w) {
  std::vector<Var> out;
  ModelWeights<Var>::visit(w, [&](const std::string&, const Var& v) { out.push_back(v); });
  return out;
}

Var model_forward(const Model& model, const ModelWeights<Var>& w, std::span<const int> ids,
                  const SequenceShape& shape, ModelCache* cache) {
  const ModelConfig& cfg = model.config();
  if (ids.size() != shape.batch * shape.seq_len) throw ShapeError("model_forward: ids size != batch*seq_len");
  if (shape.offset + shape.seq_len > cfg.max_position) {
    throw DomainError("model_forward: input of " + std::to_string(shape.offset + shape.seq_len) +
                      " positions exceeds max_position " + std::to_string(cfg.max_position));
  }
  if (cache) {
    if (cache->modules.size() != w.modules.size()) throw CacheError("model_forward: cache has wrong module count");
    if (cache->position != shape.offset) throw CacheError("model_forward: cache position mismatch");
  }
  const BlockContext ctx = model.context();
  Var h = ad::embedding(w.embedding, ids);
  for (std::size_t i = 0; i < w.modules.size(); ++i) {
    h = hybrid_module_forward(h, w.modules[i], ctx, shape, cache ? &cache->modules[i] : nullptr);
  }
  h = rmsnorm(h, w.final_norm, cfg.norm_eps);
  if (cache) cache->position += shape.seq_len;
  return ad::matmul(h, w.head);
}

Tensor model_logits(const Model& model, std::span<const int> ids, std::size_t batch) {
  if (batch == 0 || ids.size() % batch != 0) throw ShapeError("model_logits: ids not divisible into batch rows");
  const ModelWeights<Var> w = bind_constants(model.weights());
  return model_forward(model, w, ids, SequenceShape{batch, ids.size() / batch, 0}).value();
}

double cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  return ad::cross_entropy(constant_view(logits), targets, mask).value().item();
}

double masked_accuracy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  std::size_t hit = 0, total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!mask[r]) continue;
    auto row = logits.row(r);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += best == targets[r] ? 1 : 0;
    ++total;
  }
  if (total == 0) throw DomainError("masked_accuracy: empty mask");
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace transx
