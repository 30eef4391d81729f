#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "transx/attention.hpp"
#include "transx/autodiff.hpp"
#include "transx/blocks.hpp"
#include "transx/errors.hpp"
#include "transx/rng.hpp"
#include "transx/rope.hpp"
#include "transx/ssd.hpp"

using namespace transx;

namespace {

// Independent central-difference gradient of a scalar function of one tensor.
Tensor central_difference(const std::function<double(const Tensor&)>& f, Tensor x, double eps) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    x[i] = v + eps;
    const double up = f(x);
    x[i] = v - eps;
    const double down = f(x);
    x[i] = v;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

double worst_rel(const Tensor& ad, const Tensor& fd) {
  double w = 0.0;
  for (std::size_t i = 0; i < ad.numel(); ++i) w = std::max(w, gradient_rel_error(ad[i], fd[i]));
  return w;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("gradient of sum is all ones") {
    Tape tape;
    const Var x = tape.leaf(Rng(1).normal_tensor({3, 4}));
    const Gradients g = tape.backward(ad::sum(x));
    CHECK(g.of(x) == Tensor({3, 4}, 1.0));
  }

  TEST_CASE("gradient of half the squared norm is x") {
    Tape tape;
    const Tensor xv = Rng(2).normal_tensor({5});
    const Var x = tape.leaf(xv);
    const Gradients g = tape.backward(ad::scale(ad::sum(ad::mul(x, x)), 0.5));
    CHECK(max_abs_diff(g.of(x), xv) < 1e-15);
  }

  TEST_CASE("shared subexpressions accumulate") {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({2.0}));
    const Var y = ad::mul(x, x);
    const Gradients g = tape.backward(ad::sum(ad::add(y, ad::mul(y, x))));  // x^2 + x^3
    CHECK(g.of(x)[0] == doctest::Approx(2 * 2.0 + 3 * 4.0).epsilon(1e-15));
  }

  TEST_CASE("grad_check on x squared at 3") {
    auto f = [](std::span<const Var> p) { return ad::sum(ad::mul(p[0], p[0])); };
    const GradientReport rep = grad_check(f, {Tensor::vector({3.0})});
    REQUIRE(rep.entries.size() == 1);
    CHECK(rep.entries[0].ad_at_worst == doctest::Approx(6.0).epsilon(1e-15));
    CHECK(rep.entries[0].fd_at_worst == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(rep.max_rel_error() < 1e-9);
    CHECK(rep.passed);
  }

  TEST_CASE("relative error formula") {
    CHECK(gradient_rel_error(6.0, 6.0) == 0.0);
    CHECK(gradient_rel_error(1.0, 0.5) == doctest::Approx(0.5));
    CHECK(gradient_rel_error(0.0, 1e-10) == doctest::Approx(1e-2));
  }

  TEST_CASE("rmsnorm network matches central differences") {
    Rng rng(4);
    const Tensor x0 = rng.normal_tensor({3, 6});
    const Tensor gain = rng.normal_tensor({6});
    const Tensor w = rng.normal_tensor({3, 6});
    auto value = [&](const Tensor& x) {
      const Tensor y = ad::rmsnorm(Var(x), Var(gain), 1e-6).value();
      double s = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
      return s;
    };
    Tape tape;
    const Var x = tape.leaf(x0);
    const Gradients g = tape.backward(ad::weighted_sum(ad::rmsnorm(x, Var(gain), 1e-6), w));
    CHECK(worst_rel(g.of(x), central_difference(value, x0, 1e-5)) < 1e-5);
  }

  TEST_CASE("rotation, scan and loss on a 4-token toy") {
    Rng rng(5);
    const FrequencyTable table = build_frequencies(4, 10000.0, 8);
    const Tensor b0 = rng.normal_tensor({4, 4}, 0.5);
    const Tensor c0 = rng.normal_tensor({4, 4}, 0.5);
    const Tensor x0 = rng.normal_tensor({4, 6});
    const Tensor a0 = rng.uniform_tensor({4, 1}, 0.6, 0.95);
    const std::vector<int> targets{1, 4, 0, 5};
    const std::vector<std::uint8_t> mask{1, 1, 1, 1};
    auto loss = [&](const Var& B, const Var& C, const Var& X) {
      const RowPositions pos{4, 0, std::nullopt};
      const Var Y = ssd_heads(Var(a0), rotate_rows(B, table, pos), rotate_rows(C, table, pos), X,
                              SsdHeadLayout{1, 4, 1, 4, 6, 2});
      return ad::cross_entropy(Y, targets, mask);
    };
    Tape tape;
    const Var B = tape.leaf(b0), C = tape.leaf(c0), X = tape.leaf(x0);
    const Gradients g = tape.backward(loss(B, C, X));
    auto at_b = [&](const Tensor& t) { return loss(Var(t), Var(c0), Var(x0)).value().item(); };
    auto at_c = [&](const Tensor& t) { return loss(Var(b0), Var(t), Var(x0)).value().item(); };
    auto at_x = [&](const Tensor& t) { return loss(Var(b0), Var(c0), Var(t)).value().item(); };
    CHECK(worst_rel(g.of(B), central_difference(at_b, b0, 1e-5)) < 1e-5);
    CHECK(worst_rel(g.of(C), central_difference(at_c, c0, 1e-5)) < 1e-5);
    CHECK(worst_rel(g.of(X), central_difference(at_x, x0, 1e-5)) < 1e-5);
  }

  TEST_CASE("softmax attention gradient") {
    Rng rng(6);
    std::vector<Tensor> params{rng.normal_tensor({6, 4}), rng.normal_tensor({6, 4}), rng.normal_tensor({6, 2})};
    const Tensor w = rng.normal_tensor({6, 2});
    auto f = [&](std::span<const Var> p) {
      return ad::weighted_sum(causal_softmax_attention(p[0], p[1], p[2], AttentionLayout{2, 3, 1, 4, 2}), w);
    };
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      GradCheckOptions o;
      o.seed = seed;
      CHECK(grad_check(f, params, o).max_rel_error() < 1e-4);
    }
  }

  TEST_CASE("one hybrid module end to end") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_modules = 1;
    cfg.n_heads = 2;
    cfg.d_state = 4;
    cfg.chunk_len = 2;
    cfg.init_std = 0.3;
    cfg.decay_bias_init = 0.5;
    const FrequencyTable at = build_frequencies(cfg.head_dim(), cfg.rope_base, 8);
    const FrequencyTable st = build_frequencies(cfg.d_state, cfg.rope_base, 8);
    const BlockContext ctx{cfg, at, st};
    Rng rng(7);
    const HybridModuleParams m = init_hybrid_module(cfg, rng);
    std::vector<Tensor> params;
    HybridModuleParams::visit(m, "", [&](const std::string&, const Tensor& t) { params.push_back(t); });
    const Tensor x = rng.normal_tensor({4, cfg.d_model});
    const Tensor w = rng.normal_tensor({4, cfg.d_model});
    auto f = [&](std::span<const Var> leaves) {
      HybridModuleWeights<Var> p = m.map([](const Tensor& t) { return Var(t); });
      std::size_t i = 0;
      HybridModuleWeights<Var>::visit(p, "", [&](const std::string&, Var& v) { v = leaves[i++]; });
      return ad::weighted_sum(hybrid_module_forward(Var(x), p, ctx, {1, 4, 0}), w);
    };
    GradCheckOptions o;
    o.max_coords = 16;
    const GradientReport rep = grad_check(f, params, o);
    CHECK(rep.max_rel_error() < 1e-4);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    const Var x = tape.leaf(Tensor({2}));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
  }
}
