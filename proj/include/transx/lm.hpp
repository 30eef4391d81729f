#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "transx/autodiff.hpp"
#include "transx/blocks.hpp"
#include "transx/model_config.hpp"
#include "transx/rng.hpp"

namespace transx {

// ---------------------------------------------------------------------------
// Byte tokenizer: ids 0..255 are raw bytes, then three specials.

inline constexpr int kBosToken = 256;
inline constexpr int kSepToken = 257;
inline constexpr int kQueryToken = 258;
inline constexpr std::size_t kByteVocabSize = 259;

std::vector<int> tokenize_bytes(std::string_view text);
/// Bytes map back to themselves; specials render as <bos>, <sep>, <query>.
std::string detokenize(std::span<const int> ids);

// ---------------------------------------------------------------------------
// Model

template <class T>
struct ModelWeights {
  T embedding;  // [vocab x d_model]
  std::vector<HybridModuleWeights<T>> modules;
  T final_norm;  // [d_model]
  T head;        // [d_model x vocab]

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f(std::string("embedding"), s.embedding);
    for (std::size_t i = 0; i < s.modules.size(); ++i) {
      HybridModuleWeights<T>::visit(s.modules[i], "modules." + std::to_string(i) + ".", f);
    }
    f(std::string("final_norm"), s.final_norm);
    f(std::string("head"), s.head);
  }
  template <class F>
  auto map(F&& f) const -> ModelWeights<decltype(f(std::declval<const T&>()))> {
    ModelWeights<decltype(f(std::declval<const T&>()))> out;
    out.embedding = f(embedding);
    for (const auto& m : modules) out.modules.push_back(m.map(f));
    out.final_norm = f(final_norm);
    out.head = f(head);
    return out;
  }
};

struct ModelCache {
  std::vector<ModuleCache> modules;
  std::size_t position = 0;

  std::size_t ss_bytes() const;
  std::size_t sa_bytes() const;
};

class Model {
 public:
  Model(ModelConfig config, ModelWeights<Tensor> weights);

  /// Scaled-normal init from `seed`.
  static Model initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ModelWeights<Tensor>& weights() const { return weights_; }
  ModelWeights<Tensor>& weights() { return weights_; }
  const FrequencyTable& attn_table() const { return attn_table_; }
  const FrequencyTable& ssd_table() const { return ssd_table_; }
  BlockContext context() const { return BlockContext{config_, attn_table_, ssd_table_}; }

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::size_t parameter_count() const;

  ModelCache make_cache() const;

 private:
  ModelConfig config_;
  ModelWeights<Tensor> weights_;
  FrequencyTable attn_table_;
  FrequencyTable ssd_table_;
};

ModelWeights<Var> bind_constants(const ModelWeights<Tensor>& w);
ModelWeights<Var> bind_leaves(const ModelWeights<Tensor>& w, Tape& tape);
/// Leaf Vars in visit() order, for pairing gradients with parameters.
std::vector<Var> flatten(const ModelWeights<Var>& w);

/// embed -> modules -> final RMSNorm -> head. ids holds shape.batch rows of
/// shape.seq_len tokens. Returns logits [batch*seq_len x vocab].
Var model_forward(const Model& model, const ModelWeights<Var>& w, std::span<const int> ids,
                  const SequenceShape& shape, ModelCache* cache = nullptr);

/// Forward-only logits.
Tensor model_logits(const Model& model, std::span<const int> ids, std::size_t batch = 1);

// ---------------------------------------------------------------------------
// Loss

/// Mean negative log-likelihood over masked rows, overflow-safe.
double cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
using ad::cross_entropy;
/// Fraction of masked rows whose argmax equals the target.
double masked_accuracy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

// ---------------------------------------------------------------------------
// Tasks

/// Next-token instance: targets[t] follows inputs[t] in the underlying
/// sequence; mask marks scored targets.
struct TaskInstance {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  /// Needle tasks: index of the key marker in the sequence.
  std::optional<std::size_t> key_position;

  std::size_t length() const { return inputs.size(); }
  /// inputs followed by the final target.
  std::vector<int> sequence() const;
};

/// payload, SEP, payload (a BOS is prepended when T is odd). Payload symbols
/// are drawn from `vocab` ids ('a'.. for vocab <= 26). Scored on the copy.
TaskInstance make_copy_task(Rng& rng, std::size_t T, std::size_t vocab);
TaskInstance copy_task_from_payload(std::span<const int> payload);

/// filler, SEP, needle, filler, QUERY, needle. Filler is lowercase letters,
/// the needle digits; the key position is uniform over all valid depths.
/// Scored on reproducing the needle after QUERY.
TaskInstance make_needle_task(Rng& rng, std::size_t T, std::size_t needle_len);

/// Random window of T+1 bytes; every target scored.
TaskInstance make_bytes_task(Rng& rng, std::span<const std::uint8_t> corpus, std::size_t T);

struct TaskSpec {
  enum class Kind { copy, needle, bytes };
  Kind kind = Kind::copy;
  std::size_t seq_len = 32;
  std::size_t copy_vocab = 16;
  std::size_t needle_len = 4;
  std::shared_ptr<const std::vector<std::uint8_t>> corpus;

  /// "copy", "needle" or "bytes:<path>".
  static TaskSpec parse(std::string_view text, std::size_t seq_len);
  std::string name() const;
  TaskInstance sample(Rng& rng) const;
};

struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

Batch collate(std::span<const TaskInstance> items);

/// Fixed-capacity blocking queue between a batch producer and the trainer.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  /// Blocks while full. Returns false if the queue was closed.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// Blocks while empty. Empty optional once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
};

// ---------------------------------------------------------------------------
// Training

/// Linear warmup over round(warmup_fraction * steps) steps, then cosine decay
/// to final_lr_fraction * lr at the last step.
double lr_at(std::size_t step, const TrainConfig& cfg);

/// Decoupled weight decay Adam. Decay applies to rank-2 parameters only.
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::span<Tensor* const> params);
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;
};

struct EvalMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const EvalMetrics&)> on_eval;
  /// Called every checkpoint_every steps with the number of completed steps.
  std::function<void(std::size_t, const Model&)> on_checkpoint;
};

struct TrainResult {
  std::vector<StepMetrics> steps;
  std::vector<EvalMetrics> evals;
  bool reached_target = false;
};

/// Fixed validation batches for `seed`, disjoint from the training streams.
std::vector<Batch> validation_batches(const TaskSpec& task, std::uint64_t seed, std::size_t n_batches,
                                      std::size_t batch_size);
EvalMetrics evaluate(const Model& model, std::span<const Batch> batches);

/// AdamW training on task batches produced ahead of time on a worker thread.
/// Batch s is drawn from a stream keyed by (seed, s), so runs with the same
/// seed are bit-identical. Aborts with NonFiniteError on a non-finite loss.
TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

/// Single training step on one batch; returns loss and pre-clip grad norm.
StepMetrics train_step(Model& model, AdamW& opt, const Batch& batch, const TrainConfig& cfg, std::size_t step);

// ---------------------------------------------------------------------------
// Generation

struct GenerateTrace {
  std::size_t step = 0;       // index of the generated token
  std::size_t position = 0;   // position of the token that produced the logits
  int token = 0;
  std::size_t ss_cache_bytes = 0;
  std::size_t sa_cache_bytes = 0;
  const Tensor* logits = nullptr;  // [1 x vocab]
};

struct GenerateOptions {
  std::size_t n_new = 0;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::function<void(const GenerateTrace&)> on_token;
};

/// Prefills the prompt through the incremental caches, then samples n_new
/// tokens (argmax at temperature 0). Returns prompt + generated ids.
std::vector<int> generate(const Model& model, std::span<const int> prompt, const GenerateOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic "TXSSMCK1", u64 little-endian header length, JSON
// header {"format", "version", "config", "tensors": [{name, shape, offset}],
// "extra"}, then every tensor's values as little-endian IEEE-754 doubles in
// manifest order (offset counts doubles).

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& extra = nlohmann::json::object());
Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace transx
