#include <chrono>
#include <cmath>
#include <numbers>
#include <thread>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

namespace transx {

namespace {

constexpr std::uint64_t kTrainStream = 1'000'000;
constexpr std::uint64_t kValidationStream = 1ULL << 40;

Batch sample_batch(const TaskSpec& task, Rng rng, std::size_t batch_size) {
  std::vector<TaskInstance> items;
  items.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) items.push_back(task.sample(rng));
  return collate(items);
}

}  // namespace

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const auto warmup = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(cfg.steps)));
  if (step < warmup) return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (cfg.steps <= warmup + 1) return cfg.lr;
  const double span = static_cast<double>(cfg.steps - 1 - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double f = cfg.final_lr_fraction;
  return cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

AdamW::AdamW(const TrainConfig& cfg, std::span<Tensor* const> params) : cfg_(cfg) {
  for (const Tensor* p : params) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamW::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeError("AdamW::step: parameter count changed");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    const double wd = p.rank() == 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps) + wd * p[i];
      p[i] -= lr * update;
    }
  }
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) sq += dot(g.data(), g.data());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return norm;
}

StepMetrics train_step(Model& model, AdamW& opt, const Batch& batch, const TrainConfig& cfg, std::size_t step) {
  Tape tape;
  const ModelWeights<Var> w = bind_leaves(model.weights(), tape);
  const Var logits = model_forward(model, w, batch.inputs, SequenceShape{batch.batch, batch.seq_len, 0});
  const Var loss = ad::cross_entropy(logits, batch.targets, batch.mask);
  const double loss_value = loss.value().item();
  if (!std::isfinite(loss_value)) throw NonFiniteError("train: non-finite loss at step " + std::to_string(step));

  const Gradients grads = tape.backward(loss);
  std::vector<Tensor> g;
  for (const Var& leaf : flatten(w)) g.push_back(grads.of(leaf));
  const double norm = clip_global_norm(g, cfg.grad_clip);
  if (!std::isfinite(norm)) throw NonFiniteError("train: non-finite gradient norm at step " + std::to_string(step));

  std::vector<Tensor*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  const double lr = lr_at(step, cfg);
  opt.step(params, g, lr);

  StepMetrics m;
  m.step = step;
  m.loss = loss_value;
  m.lr = lr;
  m.grad_norm = norm;
  return m;
}

std::vector<Batch> validation_batches(const TaskSpec& task, std::uint64_t seed, std::size_t n_batches,
                                      std::size_t batch_size) {
  std::vector<Batch> out;
  const Rng base(seed);
  for (std::size_t i = 0; i < n_batches; ++i) out.push_back(sample_batch(task, base.fork(kValidationStream + i), batch_size));
  return out;
}

EvalMetrics evaluate(const Model& model, std::span<const Batch> batches) {
  EvalMetrics e;
  if (batches.empty()) return e;
  double loss = 0.0, acc = 0.0;
  for (const Batch& b : batches) {
    const Tensor logits = model_logits(model, b.inputs, b.batch);
    loss += cross_entropy(logits, b.targets, b.mask);
    acc += masked_accuracy(logits, b.targets, b.mask);
  }
  e.loss = loss / static_cast<double>(batches.size());
  e.accuracy = acc / static_cast<double>(batches.size());
  return e;
}

TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
  cfg.validate();
  TrainResult result;
  if (cfg.steps == 0) return result;

  std::vector<Tensor*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  AdamW opt(cfg, params);
  const std::vector<Batch> val = validation_batches(task, cfg.seed, cfg.eval_batches, cfg.batch_size);

  BoundedQueue<Batch> queue(cfg.queue_capacity);
  std::jthread producer([&queue, &task, &cfg] {
    const Rng base(cfg.seed);
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      if (!queue.push(sample_batch(task, base.fork(kTrainStream + s), cfg.batch_size))) return;
    }
    queue.close();
  });
  struct CloseOnExit {
    BoundedQueue<Batch>& q;
    ~CloseOnExit() { q.close(); }
  } closer{queue};

  auto run_eval = [&](std::size_t completed) {
    EvalMetrics e = evaluate(model, val);
    e.step = completed;
    result.evals.push_back(e);
    if (callbacks.on_eval) callbacks.on_eval(e);
  };

  std::size_t done = 0;
  while (done < cfg.steps) {
    std::optional<Batch> batch = queue.pop();
    if (!batch) throw std::logic_error("train: batch producer stopped early");
    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics m = train_step(model, opt, *batch, cfg, done);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.tokens_per_sec = secs > 0 ? static_cast<double>(batch->batch * batch->seq_len) / secs : 0.0;
    result.steps.push_back(m);
    if (callbacks.on_step) callbacks.on_step(m);
    ++done;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps && callbacks.on_checkpoint) {
      callbacks.on_checkpoint(done, model);
    }
    if (cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps) {
      run_eval(done);
      if (cfg.target_accuracy > 0.0 && result.evals.back().accuracy >= cfg.target_accuracy) break;
    }
  }
  if (result.evals.empty() || result.evals.back().step != done) run_eval(done);
  result.reached_target = cfg.target_accuracy > 0.0 && result.evals.back().accuracy >= cfg.target_accuracy;
  return result;
}

}  // namespace transx
