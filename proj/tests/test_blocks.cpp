#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "transx/blocks.hpp"
#include "transx/errors.hpp"

using namespace transx;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.n_modules = 1;
  c.n_heads = 2;
  c.d_state = 4;
  c.chunk_len = 3;
  c.max_position = 64;
  return c;
}

struct Fixture {
  ModelConfig cfg = tiny();
  FrequencyTable at = build_frequencies(cfg.head_dim(), cfg.rope_base, 64);
  FrequencyTable st = build_frequencies(cfg.d_state, cfg.rope_base, 64);
  BlockContext ctx() const { return {cfg, at, st}; }
};

template <class W>
auto vars(const W& w) {
  return w.map([](const Tensor& t) { return constant_view(t); });
}

}  // namespace

TEST_SUITE("blocks") {
  TEST_CASE("rmsnorm") {
    const Tensor y = rmsnorm(Var(Tensor::matrix({{1, 1, 1, 1}})), Var(Tensor({4}, 1.0)), 1e-12).value();
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    const Tensor y2 = rmsnorm(Var(Tensor::matrix({{2, 2}})), Var(Tensor({2}, 1.0)), 1e-12).value();
    for (double v : y2.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    Rng rng(1);
    const Tensor x = rng.normal_tensor({4, 16});
    const Tensor y3 = rmsnorm(Var(x), Var(Tensor({16}, 1.0)), 1e-6).value();
    for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(norm2(y3.row(r)) / 4.0 - 1.0) < 1e-6);
  }

  TEST_CASE("ffn with zero weights outputs zero") {
    const FFNParams p{Tensor({4}, 1.0), Tensor({4, 16}), Tensor({16, 4})};
    const Tensor y = ffn_forward(Var(Rng(2).normal_tensor({3, 4})), vars(p)).value();
    CHECK(max_abs(y) == 0.0);
  }

  TEST_CASE("ffn built as silu(x) - silu(-x) is the identity") {
    const std::size_t d = 4;
    FFNParams p{Tensor({d}, 1.0), Tensor({d, 2 * d}), Tensor({2 * d, d})};
    for (std::size_t i = 0; i < d; ++i) {
      p.w1(i, i) = 1.0;
      p.w1(i, d + i) = -1.0;
      p.w2(i, i) = 1.0;
      p.w2(d + i, i) = -1.0;
    }
    const Tensor x = Rng(3).normal_tensor({5, d}, 3.0);
    CHECK(max_abs_diff(ffn_forward(Var(x), vars(p)).value(), x) < 1e-12);
  }

  TEST_CASE("zero output projections give the identity") {
    Fixture f;
    Rng rng(4);
    const Tensor x = rng.normal_tensor({6, 8});
    SSBlockParams ss = init_ss_block(f.cfg, rng);
    ss.w_o = Tensor(ss.w_o.shape());
    CHECK(ss_block_forward(Var(x), vars(ss), f.ctx(), {2, 3, 0}).value() == x);
    SABlockParams sa = init_sa_block(f.cfg, rng);
    sa.w_o = Tensor(sa.w_o.shape());
    CHECK(sa_block_forward(Var(x), vars(sa), f.ctx(), {2, 3, 0}).value() == x);
  }

  TEST_CASE("single-token attention is the value projection") {
    Fixture f;
    Rng rng(5);
    const SABlockParams sa = init_sa_block(f.cfg, rng);
    const Tensor x = rng.normal_tensor({1, 8});
    const Tensor h = rmsnorm(Var(x), Var(sa.norm_gain), f.cfg.norm_eps).value();
    const Tensor ref = add(x, matmul(matmul(h, sa.w_v), sa.w_o));
    CHECK(max_abs_diff(sa_block_forward(Var(x), vars(sa), f.ctx(), {1, 1, 0}).value(), ref) < 1e-14);
  }

  TEST_CASE("cached sub-layers match the full forward") {
    Fixture f;
    Rng rng(6);
    const SSBlockParams ss = init_ss_block(f.cfg, rng);
    const SABlockParams sa = init_sa_block(f.cfg, rng);
    const std::size_t T = 9;
    const Tensor x = rng.normal_tensor({T, 8});
    const Tensor full_ss = ss_block_forward(Var(x), vars(ss), f.ctx(), {1, T, 0}).value();
    const Tensor full_sa = sa_block_forward(Var(x), vars(sa), f.ctx(), {1, T, 0}).value();
    SSCache cs = make_ss_cache(f.cfg);
    SACache ca = make_sa_cache(f.cfg);
    const std::size_t ss_bytes = cs.bytes();
    std::size_t kv_per_token = 0;
    for (std::size_t i = 0; i < T; ++i) {
      const Tensor xi({1, 8}, std::vector<double>(x.row(i).begin(), x.row(i).end()));
      const Tensor ys = ss_block_forward(Var(xi), vars(ss), f.ctx(), {1, 1, i}, &cs).value();
      const Tensor ya = sa_block_forward(Var(xi), vars(sa), f.ctx(), {1, 1, i}, &ca).value();
      for (std::size_t c = 0; c < 8; ++c) {
        CHECK(std::abs(ys(0, c) - full_ss(i, c)) < 1e-9);
        CHECK(std::abs(ya(0, c) - full_sa(i, c)) < 1e-9);
      }
      CHECK(cs.bytes() == ss_bytes);
      if (i == 0) kv_per_token = ca.bytes();
      CHECK(ca.bytes() == (i + 1) * kv_per_token);
    }
    CHECK(ca.kv.length() == T);
  }

  TEST_CASE("attention without rotation is order-blind for the last token") {
    Fixture f;
    f.cfg.init_std = 0.5;
    Rng rng(7);
    const SABlockParams sa = init_sa_block(f.cfg, rng);
    const Tensor x = rng.normal_tensor({3, 8});
    Tensor swapped = x;
    for (std::size_t c = 0; c < 8; ++c) std::swap(swapped(0, c), swapped(1, c));
    auto last = [&](const Tensor& in, bool rope) {
      ModelConfig cfg = f.cfg;
      cfg.use_rope_on_attention = rope;
      const BlockContext ctx{cfg, f.at, f.st};
      const Tensor y = sa_block_forward(Var(in), vars(sa), ctx, {1, 3, 0}).value();
      return Tensor({8}, std::vector<double>(y.row(2).begin(), y.row(2).end()));
    };
    CHECK(max_abs_diff(last(x, false), last(swapped, false)) < 1e-12);
    CHECK(max_abs_diff(last(x, true), last(swapped, true)) > 1e-6);
  }

  TEST_CASE("module equals the composition of its sub-layers") {
    Fixture f;
    Rng rng(8);
    const HybridModuleParams m = init_hybrid_module(f.cfg, rng);
    const Tensor x = rng.normal_tensor({10, 8});
    const SequenceShape shape{2, 5, 0};
    Var h(x);
    for (const auto& l : m.ss) {
      h = ss_block_forward(h, vars(l.mixer), f.ctx(), shape);
      h = ffn_sublayer(h, vars(l.ffn), f.cfg.norm_eps);
    }
    for (const auto& l : m.sa) {
      h = sa_block_forward(h, vars(l.mixer), f.ctx(), shape);
      h = ffn_sublayer(h, vars(l.ffn), f.cfg.norm_eps);
    }
    CHECK(hybrid_module_forward(Var(x), vars(m), f.ctx(), shape).value() == h.value());
  }

  TEST_CASE("module layout follows the configured ratio") {
    Fixture f;
    Rng rng(9);
    HybridModuleParams m = init_hybrid_module(f.cfg, rng);
    REQUIRE(m.ss.size() == 7);
    REQUIRE(m.sa.size() == 1);
    validate_module(m, f.cfg);
    m.sa.push_back(m.sa[0]);
    CHECK_THROWS_AS(validate_module(m, f.cfg), ShapeError);
  }

  TEST_CASE("ss block gradient on a tiny config") {
    Fixture f;
    f.cfg.init_std = 0.3;
    f.cfg.decay_bias_init = 0.5;
    Rng rng(10);
    const SSBlockParams ss = init_ss_block(f.cfg, rng);
    std::vector<Tensor> params;
    SSBlockParams::visit(ss, "", [&](const std::string&, const Tensor& t) { params.push_back(t); });
    const Tensor x = rng.normal_tensor({4, 8});
    const Tensor w = rng.normal_tensor({4, 8});
    auto fn = [&](std::span<const Var> p) {
      SSBlockWeights<Var> v = ss.map([](const Tensor& t) { return Var(t); });
      std::size_t i = 0;
      SSBlockWeights<Var>::visit(v, "", [&](const std::string&, Var& leaf) { leaf = p[i++]; });
      return ad::weighted_sum(ss_block_forward(Var(x), v, f.ctx(), {1, 4, 0}), w);
    };
    CHECK(grad_check(fn, params).max_rel_error() < 1e-4);
  }

  TEST_CASE("out-of-order cache use is rejected") {
    Fixture f;
    Rng rng(11);
    const SSBlockParams ss = init_ss_block(f.cfg, rng);
    SSCache cs = make_ss_cache(f.cfg);
    CHECK_THROWS_AS(ss_block_forward(Var(Tensor({1, 8})), vars(ss), f.ctx(), {1, 1, 2}, &cs), CacheError);
  }
}
