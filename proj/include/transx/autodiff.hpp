#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "transx/tensor.hpp"

namespace transx {

using NodeId = std::int64_t;

class Tape;

/// A tensor value, optionally tracked on a tape. Untracked values are
/// constants: ops over only untracked inputs record nothing, which is the
/// forward-only mode used for inference and benchmarking.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);
  explicit Var(std::shared_ptr<const Tensor> value);

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  bool tracked() const { return tape_ != nullptr; }
  NodeId id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  NodeId id_ = -1;
};

/// Passes gradient contributions from a node to its inputs (by slot).
class GradSink {
 public:
  bool wants(std::size_t slot) const;
  void add(std::size_t slot, Tensor grad);

 private:
  friend class Tape;
  GradSink(std::span<const NodeId> inputs, std::vector<Tensor>& grads) : inputs_(inputs), grads_(grads) {}
  std::span<const NodeId> inputs_;
  std::vector<Tensor>& grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Gradients of a scalar with respect to every leaf of the tape.
class Gradients {
 public:
  /// Zero tensor of the leaf's shape when the loss does not reach it.
  const Tensor& of(const Var& leaf) const;
  const std::unordered_map<NodeId, Tensor>& by_id() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<NodeId, Tensor> grads_;
};

/// Dynamic reverse-mode tape. Nodes are appended in creation order, which is
/// a valid topological order; backward walks it in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var leaf(std::shared_ptr<const Tensor> value);

  std::size_t size() const { return nodes_.size(); }

  Gradients backward(const Var& loss) const;

  /// Wraps an op result. Tracked if any input is tracked, else a constant.
  static Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

 private:
  struct Node {
    std::vector<NodeId> inputs;  // -1 for untracked inputs
    BackwardFn backward;
    Shape shape;
    bool leaf = false;
  };
  Var push(std::shared_ptr<const Tensor> value, Node node);
  std::vector<Node> nodes_;
};

/// Differentiable ops over Var. Matrices are row-major [rows x cols].
namespace ad {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// x[r, c] + bias[c]
Var add_row(const Var& x, const Var& bias);
Var sum(const Var& a);
Var mean(const Var& a);
/// sum(a o w) for a constant weight tensor w.
Var weighted_sum(const Var& a, const Tensor& w);
Var silu(const Var& a);
Var sigmoid(const Var& a);
/// Per-row x / sqrt(mean(x^2) + eps) * gain.
Var rmsnorm(const Var& x, const Var& gain, double eps);
/// Gathers rows of weight [vocab x d] for each id.
Var embedding(const Var& weight, std::span<const int> ids);
/// Mean negative log-likelihood over rows whose mask entry is non-zero.
Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

}  // namespace ad

/// Central-difference comparison of tape gradients against perturbations.
struct GradientReport {
  struct Entry {
    std::size_t param = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t coords_checked = 0;
    double ad_at_worst = 0.0;
    double fd_at_worst = 0.0;
  };
  std::vector<Entry> entries;
  double tolerance = 0.0;
  bool passed = false;

  double max_rel_error() const;
};

/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)
double gradient_rel_error(double ad, double fd);

using ScalarFunction = std::function<Var(std::span<const Var> params)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 256;
  std::uint64_t seed = 0;
};

GradientReport grad_check(const ScalarFunction& f, const std::vector<Tensor>& params,
                          const GradCheckOptions& options = {});

}  // namespace transx
