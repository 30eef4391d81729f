#include "transx/blocks.hpp"

#include <cmath>
#include <string>

#include "transx/errors.hpp"

namespace transx {

namespace {

std::optional<std::size_t> log_base(const ModelConfig& cfg) {
  if (!cfg.long_position_scaling) return std::nullopt;
  return cfg.long_position_base;
}

void check_cache(std::size_t cache_pos, const SequenceShape& shape, const char* who) {
  if (shape.batch != 1) throw CacheError(std::string(who) + ": cached forward needs batch 1");
  if (cache_pos != shape.offset) {
    throw CacheError(std::string(who) + ": cache at position " + std::to_string(cache_pos) + ", input starts at " +
                     std::to_string(shape.offset));
  }
}

double output_std(const ModelConfig& cfg) {
  return cfg.init_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, cfg.total_sublayers())));
}

void expect_shape(const Tensor& t, const Shape& s, const std::string& what) {
  if (t.shape() != s) {
    throw ShapeError(what + ": expected " + shape_string(s) + ", got " + shape_string(t.shape()));
  }
}

}  // namespace

std::size_t SSCache::bytes() const {
  std::size_t b = 0;
  for (const auto& h : heads) b += h.bytes();
  return b;
}

SSCache make_ss_cache(const ModelConfig& cfg) {
  SSCache c;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) c.heads.push_back(SsdState::zeros(cfg.d_state, cfg.head_dim()));
  return c;
}

SACache make_sa_cache(const ModelConfig& cfg) {
  return SACache{KVCache(cfg.n_heads, cfg.head_dim(), cfg.head_dim()), 0};
}

ModuleCache make_module_cache(const ModelConfig& cfg) {
  ModuleCache m;
  for (std::size_t i = 0; i < cfg.ss_per_module; ++i) m.ss.push_back(make_ss_cache(cfg));
  for (std::size_t i = 0; i < cfg.sa_per_module; ++i) m.sa.push_back(make_sa_cache(cfg));
  return m;
}

Var constant_view(const Tensor& t) { return Var(std::shared_ptr<const Tensor>(std::shared_ptr<void>(), &t)); }

Var rmsnorm(const Var& x, const Var& gain, double eps) { return ad::rmsnorm(x, gain, eps); }

Var ffn_forward(const Var& x, const FFNWeights<Var>& p) {
  return ad::matmul(ad::silu(ad::matmul(x, p.w1)), p.w2);
}

Var ffn_sublayer(const Var& x, const FFNWeights<Var>& p, double eps) {
  return ad::add(x, ffn_forward(rmsnorm(x, p.norm_gain, eps), p));
}

Var ss_block_forward(const Var& x, const SSBlockWeights<Var>& p, const BlockContext& ctx, const SequenceShape& shape,
                     SSCache* cache) {
  const ModelConfig& cfg = ctx.config;
  const std::size_t H = cfg.n_heads, N = cfg.d_state, P = cfg.head_dim();
  if (x.value().rows() != shape.batch * shape.seq_len) throw ShapeError("ss_block_forward: rows != batch*seq_len");

  const Var h = rmsnorm(x, p.norm_gain, cfg.norm_eps);
  const Var xs = ad::matmul(h, p.w_x);
  Var bb = ad::matmul(h, p.w_b);
  Var cc = ad::matmul(h, p.w_c);
  const Var a = ad::sigmoid(ad::add_row(ad::matmul(h, p.w_a), p.a_bias));

  Var y;
  if (cache) {
    check_cache(cache->position, shape, "ss_block_forward");
    const FrequencyTable* table = cfg.use_rope_on_ssd ? &ctx.ssd_table : nullptr;
    Tensor out({shape.seq_len, H * P});
    for (std::size_t t = 0; t < shape.seq_len; ++t) {
      const std::size_t pos = shape.offset + t;
      const double c_scale =
          (table && cfg.long_position_scaling) ? log_position_scale(pos, cfg.long_position_base) : 1.0;
      for (std::size_t hd = 0; hd < H; ++hd) {
        SsdState& st = cache->heads[hd];
        if (st.position != pos) throw CacheError("ss_block_forward: head state out of step");
        ssd_step(st, a.value()(t, hd), bb.value().row(t).subspan(hd * N, N), cc.value().row(t).subspan(hd * N, N),
                 xs.value().row(t).subspan(hd * P, P), out.row(t).subspan(hd * P, P), table, c_scale);
      }
    }
    cache->position += shape.seq_len;
    finalize(out, "ss_block_forward");
    y = Var(std::move(out));
  } else {
    if (cfg.use_rope_on_ssd) {
      bb = rotate_rows(bb, ctx.ssd_table, RowPositions{shape.seq_len, shape.offset, std::nullopt});
      cc = rotate_rows(cc, ctx.ssd_table, RowPositions{shape.seq_len, shape.offset, log_base(cfg)});
    }
    y = ssd_heads(a, bb, cc, xs, SsdHeadLayout{shape.batch, shape.seq_len, H, N, P, cfg.chunk_len});
  }
  return ad::add(x, ad::matmul(y, p.w_o));
}

Var sa_block_forward(const Var& x, const SABlockWeights<Var>& p, const BlockContext& ctx, const SequenceShape& shape,
                     SACache* cache) {
  const ModelConfig& cfg = ctx.config;
  const std::size_t H = cfg.n_heads, D = cfg.head_dim();
  if (x.value().rows() != shape.batch * shape.seq_len) throw ShapeError("sa_block_forward: rows != batch*seq_len");

  const Var h = rmsnorm(x, p.norm_gain, cfg.norm_eps);
  Var q = ad::matmul(h, p.w_q);
  Var k = ad::matmul(h, p.w_k);
  const Var v = ad::matmul(h, p.w_v);
  if (cfg.use_rope_on_attention) {
    q = rotate_rows(q, ctx.attn_table, RowPositions{shape.seq_len, shape.offset, log_base(cfg)});
    k = rotate_rows(k, ctx.attn_table, RowPositions{shape.seq_len, shape.offset, std::nullopt});
  }

  Var o;
  if (cache) {
    check_cache(cache->position, shape, "sa_block_forward");
    Tensor out({shape.seq_len, H * D});
    for (std::size_t t = 0; t < shape.seq_len; ++t) {
      cache->kv.append(k.value().row(t), v.value().row(t));
      cache->kv.attend(q.value().row(t), cache->kv.length(), out.row(t));
    }
    cache->position += shape.seq_len;
    finalize(out, "sa_block_forward");
    o = Var(std::move(out));
  } else {
    o = causal_softmax_attention(q, k, v, AttentionLayout{shape.batch, shape.seq_len, H, D, D});
  }
  return ad::add(x, ad::matmul(o, p.w_o));
}

Var hybrid_module_forward(const Var& x, const HybridModuleWeights<Var>& p, const BlockContext& ctx,
                          const SequenceShape& shape, ModuleCache* cache) {
  if (cache && (cache->ss.size() != p.ss.size() || cache->sa.size() != p.sa.size())) {
    throw CacheError("hybrid_module_forward: cache layout differs from module");
  }
  const double eps = ctx.config.norm_eps;
  Var h = x;
  for (std::size_t i = 0; i < p.ss.size(); ++i) {
    h = ss_block_forward(h, p.ss[i].mixer, ctx, shape, cache ? &cache->ss[i] : nullptr);
    h = ffn_sublayer(h, p.ss[i].ffn, eps);
  }
  for (std::size_t i = 0; i < p.sa.size(); ++i) {
    h = sa_block_forward(h, p.sa[i].mixer, ctx, shape, cache ? &cache->sa[i] : nullptr);
    h = ffn_sublayer(h, p.sa[i].ffn, eps);
  }
  return h;
}

SSBlockParams init_ss_block(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model, H = cfg.n_heads, N = cfg.d_state, P = cfg.head_dim();
  SSBlockParams p;
  p.norm_gain = Tensor({d}, 1.0);
  p.w_x = rng.normal_tensor({d, H * P}, cfg.init_std);
  p.w_b = rng.normal_tensor({d, H * N}, cfg.init_std);
  p.w_c = rng.normal_tensor({d, H * N}, cfg.init_std);
  p.w_a = rng.normal_tensor({d, H}, cfg.init_std);
  p.a_bias = Tensor({H}, cfg.decay_bias_init);
  p.w_o = rng.normal_tensor({H * P, d}, output_std(cfg));
  return p;
}

SABlockParams init_sa_block(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model;
  SABlockParams p;
  p.norm_gain = Tensor({d}, 1.0);
  p.w_q = rng.normal_tensor({d, d}, cfg.init_std);
  p.w_k = rng.normal_tensor({d, d}, cfg.init_std);
  p.w_v = rng.normal_tensor({d, d}, cfg.init_std);
  p.w_o = rng.normal_tensor({d, d}, output_std(cfg));
  return p;
}

FFNParams init_ffn(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model, hidden = cfg.ffn_mult * cfg.d_model;
  FFNParams p;
  p.norm_gain = Tensor({d}, 1.0);
  p.w1 = rng.normal_tensor({d, hidden}, cfg.init_std);
  p.w2 = rng.normal_tensor({hidden, d}, output_std(cfg));
  return p;
}

HybridModuleParams init_hybrid_module(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  HybridModuleParams m;
  for (std::size_t i = 0; i < cfg.ss_per_module; ++i) {
    SSBlockParams mixer = init_ss_block(cfg, rng);
    m.ss.push_back({std::move(mixer), init_ffn(cfg, rng)});
  }
  for (std::size_t i = 0; i < cfg.sa_per_module; ++i) {
    SABlockParams mixer = init_sa_block(cfg, rng);
    m.sa.push_back({std::move(mixer), init_ffn(cfg, rng)});
  }
  return m;
}

void validate_module(const HybridModuleParams& p, const ModelConfig& cfg) {
  if (p.ss.size() != cfg.ss_per_module || p.sa.size() != cfg.sa_per_module) {
    throw ShapeError("hybrid module has " + std::to_string(p.ss.size()) + ":" + std::to_string(p.sa.size()) +
                     " SS:SA sub-layers, config wants " + std::to_string(cfg.ss_per_module) + ":" +
                     std::to_string(cfg.sa_per_module));
  }
  const std::size_t d = cfg.d_model, H = cfg.n_heads, N = cfg.d_state, P = cfg.head_dim();
  const std::size_t hidden = cfg.ffn_mult * d;
  auto check_ffn = [&](const FFNParams& f, const std::string& at) {
    expect_shape(f.norm_gain, {d}, at + "ffn.norm_gain");
    expect_shape(f.w1, {d, hidden}, at + "ffn.w1");
    expect_shape(f.w2, {hidden, d}, at + "ffn.w2");
  };
  for (std::size_t i = 0; i < p.ss.size(); ++i) {
    const auto& s = p.ss[i].mixer;
    const std::string at = "ss." + std::to_string(i) + ".";
    expect_shape(s.norm_gain, {d}, at + "norm_gain");
    expect_shape(s.w_x, {d, H * P}, at + "w_x");
    expect_shape(s.w_b, {d, H * N}, at + "w_b");
    expect_shape(s.w_c, {d, H * N}, at + "w_c");
    expect_shape(s.w_a, {d, H}, at + "w_a");
    expect_shape(s.a_bias, {H}, at + "a_bias");
    expect_shape(s.w_o, {H * P, d}, at + "w_o");
    check_ffn(p.ss[i].ffn, at);
  }
  for (std::size_t i = 0; i < p.sa.size(); ++i) {
    const auto& s = p.sa[i].mixer;
    const std::string at = "sa." + std::to_string(i) + ".";
    expect_shape(s.norm_gain, {d}, at + "norm_gain");
    expect_shape(s.w_q, {d, d}, at + "w_q");
    expect_shape(s.w_k, {d, d}, at + "w_k");
    expect_shape(s.w_v, {d, d}, at + "w_v");
    expect_shape(s.w_o, {d, d}, at + "w_o");
    check_ffn(p.sa[i].ffn, at);
  }
}

}  // namespace transx
