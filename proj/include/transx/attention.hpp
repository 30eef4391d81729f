#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "transx/autodiff.hpp"
#include "transx/rope.hpp"
#include "transx/tensor.hpp"

namespace transx {

enum class Normalize { softmax, none };

/// Q, K: [T x n_heads*d]; V: [T x n_heads*p].
struct AttentionInputs {
  Tensor Q;
  Tensor K;
  Tensor V;
  std::size_t n_heads = 1;

  std::size_t length() const { return Q.rows(); }
  std::size_t head_dim() const { return Q.cols() / n_heads; }
  std::size_t value_dim() const { return V.cols() / n_heads; }
  void validate() const;
};

/// Raw scores <rotate(q_m, offset+m), rotate(k_n, offset+n)> of one head, no
/// mask and no scaling.
Tensor attention_scores(const AttentionInputs& inp, std::size_t head, const FrequencyTable& table, bool use_rope,
                        std::size_t position_offset = 0);

/// Causal self-attention. Softmax mode scales scores by 1/sqrt(d) before the
/// row softmax; `none` weights V with the masked raw scores.
Tensor causal_attention(const AttentionInputs& inp, const FrequencyTable& table, Normalize normalize,
                        bool use_rope = true, std::size_t position_offset = 0);

enum class FeatureMap { identity, elu_plus_one };

Tensor apply_feature_map(FeatureMap map, const Tensor& x);

struct LinearAttentionOptions {
  FeatureMap query_map = FeatureMap::elu_plus_one;
  FeatureMap key_map = FeatureMap::elu_plus_one;
  double eps = 1e-6;
};

/// Running sums of the linear-attention recurrence:
///   S = sum_j phi_k(R_j k_j)^T v_j   [d x P]
///   z = sum_j phi_k(R_j k_j)         [d]
struct RecurrentAttnState {
  Tensor S;
  Tensor z;
  std::size_t position = 0;
  std::size_t guard_hits = 0;

  static RecurrentAttnState zeros(std::size_t d, std::size_t value_dim);
};

struct LinearStepResult {
  Tensor y;
  RecurrentAttnState state;
};

/// One token of linear attention with rotary features. If the normaliser
/// falls below eps the unnormalised numerator is returned and guard_hits
/// is incremented.
LinearStepResult linear_attention_step(RecurrentAttnState state, const Tensor& q, const Tensor& k, const Tensor& v,
                                       PositionIndex m, const FrequencyTable& table,
                                       const LinearAttentionOptions& options = {});

/// Layout of multi-head activations for causal_softmax_attention:
/// Q, K: [batch*seq_len x heads*head_dim], V: [batch*seq_len x heads*value_dim].
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t value_dim = 0;
};

/// Differentiable causal softmax attention over pre-rotated Q and K.
Var causal_softmax_attention(const Var& Q, const Var& K, const Var& V, const AttentionLayout& layout);

/// Rotated keys and values of past tokens for incremental decoding.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t heads, std::size_t head_dim, std::size_t value_dim);

  std::size_t length() const { return length_; }
  std::size_t bytes() const { return (keys_.size() + values_.size()) * sizeof(double); }

  void append(std::span<const double> rotated_key, std::span<const double> value);
  /// Softmax attention of one rotated query row over the first `visible`
  /// cached entries; writes heads*value_dim outputs.
  void attend(std::span<const double> rotated_query, std::size_t visible, std::span<double> out) const;

 private:
  std::size_t heads_ = 0;
  std::size_t head_dim_ = 0;
  std::size_t value_dim_ = 0;
  std::size_t length_ = 0;
  std::vector<double> keys_;
  std::vector<double> values_;
};

}  // namespace transx
