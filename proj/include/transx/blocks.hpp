#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "transx/attention.hpp"
#include "transx/autodiff.hpp"
#include "transx/model_config.hpp"
#include "transx/rng.hpp"
#include "transx/rope.hpp"
#include "transx/ssd.hpp"

namespace transx {

// Weight bundles are templates over the leaf type: Tensor for storage and
// checkpoints, Var for a forward pass. visit() walks fields in a fixed order
// with dotted names; map() rebuilds the same structure over another type.

template <class T>
struct SSBlockWeights {
  T norm_gain;  // [d_model]
  T w_x;        // [d_model x heads*head_dim]
  T w_b;        // [d_model x heads*d_state]
  T w_c;        // [d_model x heads*d_state]
  T w_a;        // [d_model x heads]
  T a_bias;     // [heads]
  T w_o;        // [heads*head_dim x d_model]

  template <class Self, class F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "norm_gain", s.norm_gain);
    f(prefix + "w_x", s.w_x);
    f(prefix + "w_b", s.w_b);
    f(prefix + "w_c", s.w_c);
    f(prefix + "w_a", s.w_a);
    f(prefix + "a_bias", s.a_bias);
    f(prefix + "w_o", s.w_o);
  }
  template <class F>
  auto map(F&& f) const -> SSBlockWeights<decltype(f(norm_gain))> {
    return {f(norm_gain), f(w_x), f(w_b), f(w_c), f(w_a), f(a_bias), f(w_o)};
  }
};

template <class T>
struct SABlockWeights {
  T norm_gain;
  T w_q;
  T w_k;
  T w_v;
  T w_o;

  template <class Self, class F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "norm_gain", s.norm_gain);
    f(prefix + "w_q", s.w_q);
    f(prefix + "w_k", s.w_k);
    f(prefix + "w_v", s.w_v);
    f(prefix + "w_o", s.w_o);
  }
  template <class F>
  auto map(F&& f) const -> SABlockWeights<decltype(f(norm_gain))> {
    return {f(norm_gain), f(w_q), f(w_k), f(w_v), f(w_o)};
  }
};

template <class T>
struct FFNWeights {
  T norm_gain;  // pre-norm applied by the sub-layer wrapper
  T w1;         // [d_model x hidden]
  T w2;         // [hidden x d_model]

  template <class Self, class F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "norm_gain", s.norm_gain);
    f(prefix + "w1", s.w1);
    f(prefix + "w2", s.w2);
  }
  template <class F>
  auto map(F&& f) const -> FFNWeights<decltype(f(norm_gain))> {
    return {f(norm_gain), f(w1), f(w2)};
  }
};

template <class T>
struct SSSubLayer {
  SSBlockWeights<T> mixer;
  FFNWeights<T> ffn;
};

template <class T>
struct SASubLayer {
  SABlockWeights<T> mixer;
  FFNWeights<T> ffn;
};

enum class LayerKind { ss, sa };

/// One hybrid module: the SS sub-layers in order, then the SA sub-layers.
template <class T>
struct HybridModuleWeights {
  std::vector<SSSubLayer<T>> ss;
  std::vector<SASubLayer<T>> sa;

  std::vector<LayerKind> layer_kinds() const {
    std::vector<LayerKind> k(ss.size(), LayerKind::ss);
    k.insert(k.end(), sa.size(), LayerKind::sa);
    return k;
  }

  template <class Self, class F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < s.ss.size(); ++i) {
      const std::string p = prefix + "ss." + std::to_string(i) + ".";
      SSBlockWeights<T>::visit(s.ss[i].mixer, p, f);
      FFNWeights<T>::visit(s.ss[i].ffn, p + "ffn.", f);
    }
    for (std::size_t i = 0; i < s.sa.size(); ++i) {
      const std::string p = prefix + "sa." + std::to_string(i) + ".";
      SABlockWeights<T>::visit(s.sa[i].mixer, p, f);
      FFNWeights<T>::visit(s.sa[i].ffn, p + "ffn.", f);
    }
  }
  template <class F>
  auto map(F&& f) const -> HybridModuleWeights<decltype(f(std::declval<const T&>()))> {
    using U = decltype(f(std::declval<const T&>()));
    HybridModuleWeights<U> out;
    for (const auto& l : ss) out.ss.push_back({l.mixer.map(f), l.ffn.map(f)});
    for (const auto& l : sa) out.sa.push_back({l.mixer.map(f), l.ffn.map(f)});
    return out;
  }
};

using SSBlockParams = SSBlockWeights<Tensor>;
using SABlockParams = SABlockWeights<Tensor>;
using FFNParams = FFNWeights<Tensor>;
using HybridModuleParams = HybridModuleWeights<Tensor>;

/// Everything a sub-layer needs besides its weights.
struct BlockContext {
  const ModelConfig& config;
  const FrequencyTable& attn_table;  // d = head_dim
  const FrequencyTable& ssd_table;   // d = d_state
};

/// Rows of an activation are `batch` sequences of `seq_len` tokens whose
/// first token sits at absolute position `offset`.
struct SequenceShape {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t offset = 0;
};

struct SSCache {
  std::vector<SsdState> heads;
  std::size_t position = 0;
  std::size_t bytes() const;
};

struct SACache {
  KVCache kv;
  std::size_t position = 0;
  std::size_t bytes() const { return kv.bytes(); }
};

struct ModuleCache {
  std::vector<SSCache> ss;
  std::vector<SACache> sa;
};

SSCache make_ss_cache(const ModelConfig& cfg);
SACache make_sa_cache(const ModelConfig& cfg);
ModuleCache make_module_cache(const ModelConfig& cfg);

/// x / sqrt(mean(x^2) + eps) * gain, row-wise.
Var rmsnorm(const Var& x, const Var& gain, double eps);

/// w2 * silu(w1 * x). No norm, no residual.
Var ffn_forward(const Var& x, const FFNWeights<Var>& p);

/// x + ffn(rmsnorm(x)).
Var ffn_sublayer(const Var& x, const FFNWeights<Var>& p, double eps);

/// x + W_o * SSD(rmsnorm(x)). With a cache (batch 1), runs the recurrence
/// from the cached state instead of the chunked scan.
Var ss_block_forward(const Var& x, const SSBlockWeights<Var>& p, const BlockContext& ctx, const SequenceShape& shape,
                     SSCache* cache = nullptr);

/// x + W_o * causal softmax attention(rmsnorm(x)) with rotary Q/K. With a
/// cache (batch 1), appends rotated keys and values and attends over them.
Var sa_block_forward(const Var& x, const SABlockWeights<Var>& p, const BlockContext& ctx, const SequenceShape& shape,
                     SACache* cache = nullptr);

/// (SS + FFN) for each SS sub-layer, then (SA + FFN) for each SA sub-layer.
Var hybrid_module_forward(const Var& x, const HybridModuleWeights<Var>& p, const BlockContext& ctx,
                          const SequenceShape& shape, ModuleCache* cache = nullptr);

SSBlockParams init_ss_block(const ModelConfig& cfg, Rng& rng);
SABlockParams init_sa_block(const ModelConfig& cfg, Rng& rng);
FFNParams init_ffn(const ModelConfig& cfg, Rng& rng);
/// Structure follows cfg.ss_per_module / cfg.sa_per_module.
HybridModuleParams init_hybrid_module(const ModelConfig& cfg, Rng& rng);
/// Throws if the module's shapes or SS:SA counts disagree with cfg.
void validate_module(const HybridModuleParams& p, const ModelConfig& cfg);

/// Non-owning Var view of a stored tensor (the tensor must outlive it).
Var constant_view(const Tensor& t);

}  // namespace transx
