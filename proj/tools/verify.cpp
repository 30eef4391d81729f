#include "transx/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <regex>
#include <set>
#include <thread>

#include "transx/attention.hpp"
#include "transx/bench.hpp"
#include "transx/blocks.hpp"
#include "transx/errors.hpp"
#include "transx/lm.hpp"
#include "transx/rope.hpp"
#include "transx/run_config.hpp"
#include "transx/ssd.hpp"

namespace transx {

namespace {

class Tally {
 public:
  explicit Tally(double tolerance) { r_.tolerance = tolerance; }

  void error(double e, const std::string& where = {}) {
    ++r_.instances;
    if (std::isnan(e) || e > r_.worst_error) {
      r_.worst_error = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
      if (!where.empty()) worst_at_ = where;
    }
  }

  void expect(bool ok, const std::string& what) {
    ++r_.instances;
    if (!ok) {
      failed_ = true;
      if (r_.detail.empty()) r_.detail = what;
    }
  }

  template <class E, class F>
  void expect_throw(F&& f, const std::string& what) {
    bool thrown = false;
    try {
      f();
    } catch (const E&) {
      thrown = true;
    }
    expect(thrown, what + " did not throw");
  }

  PropertyResult done() {
    r_.passed = !failed_ && r_.worst_error <= r_.tolerance;
    if (!r_.passed && r_.detail.empty() && !worst_at_.empty()) r_.detail = "worst at " + worst_at_;
    return r_;
  }

 private:
  PropertyResult r_;
  bool failed_ = false;
  std::string worst_at_;
};

double rel_diff(const Tensor& a, const Tensor& ref) {
  return max_abs_diff(a, ref) / std::max(1.0, max_abs(ref));
}

Tensor explicit_rotation_matrix(const FrequencyTable& table, std::size_t m) {
  const std::size_t d = table.d();
  Tensor R({d, d});
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double ang = static_cast<double>(m) * table.theta()[i];
    R(2 * i, 2 * i) = std::cos(ang);
    R(2 * i, 2 * i + 1) = -std::sin(ang);
    R(2 * i + 1, 2 * i) = std::sin(ang);
    R(2 * i + 1, 2 * i + 1) = std::cos(ang);
  }
  return R;
}

// Column-vector convention: rotate(x, m) == R_m x.
Tensor apply_matrix(const Tensor& R, const Tensor& x) {
  return matmul_nt(x.reshaped({1, x.numel()}), R).reshaped({x.numel()});
}

SSDInputs random_ssd(Rng& rng, std::size_t T, std::size_t N, std::size_t P, bool unit_decay) {
  SSDInputs in;
  in.a = unit_decay ? Tensor({T}, 1.0) : rng.uniform_tensor({T}, 0.5, 1.0);
  in.B = rng.normal_tensor({T, N}, 0.5);
  in.C = rng.normal_tensor({T, N}, 0.5);
  in.X = rng.normal_tensor({T, P}, 1.0);
  return in;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_modules = 1;
  c.n_heads = 2;
  c.d_state = 8;
  c.chunk_len = 4;
  c.max_position = 64;
  return c;
}

template <class W>
auto constants(const W& w) {
  return w.map([](const Tensor& t) { return constant_view(t); });
}

// ---------------------------------------------------------------- tensor

PropertyResult tensor_shape_matches_data() {
  Tally t(0.0);
  Rng rng(11);
  for (int k = 0; k < 50; ++k) {
    Shape s;
    const std::size_t rank = 1 + rng.below(3);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(5));
    const Tensor x(s);
    t.expect(x.numel() == shape_numel(s), "numel != product(shape) for " + shape_string(s));
  }
  t.expect_throw<ShapeError>([] { Tensor({2, 3}, std::vector<double>(5)); }, "data/shape mismatch");
  return t.done();
}

PropertyResult tensor_nonfinite_surfaced() {
  Tally t(0.0);
  const Tensor big = Tensor::matrix({{1e200, 1e200}});
  t.expect_throw<NonFiniteError>([&] { matmul(big, transpose(big)); }, "overflowing matmul");
  t.expect_throw<NonFiniteError>([&] { add(Tensor::vector({1e308, -1e308}), Tensor::vector({1e308, -1e308})); }, "overflowing add");
  t.expect_throw<NonFiniteError>([&] { scale(big, 1e200); }, "overflowing scale");
  return t.done();
}

PropertyResult tensor_matmul_associativity() {
  Tally t(1e-10);
  Rng rng(12);
  for (int k = 0; k < 20; ++k) {
    const Tensor a = rng.normal_tensor({3 + rng.below(4), 4});
    const Tensor b = rng.normal_tensor({4, 5});
    const Tensor c = rng.normal_tensor({5, 2 + rng.below(3)});
    t.error(rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))));
  }
  return t.done();
}

PropertyResult tensor_softmax_rows_normalized() {
  Tally t(1e-12);
  Rng rng(13);
  for (int k = 0; k < 50; ++k) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(8);
    const Tensor x = rng.normal_tensor({m, n}, 5.0);
    Tensor mask({m, n});
    for (std::size_t r = 0; r < m; ++r) {
      mask(r, rng.below(n)) = 1.0;
      for (std::size_t c = 0; c < n; ++c) {
        if (rng.uniform() < 0.5) mask(r, c) = 1.0;
      }
    }
    const Tensor p = softmax_rows(x, k % 2 ? std::optional<Tensor>(mask) : std::nullopt);
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        t.expect(p(r, c) >= 0.0 && p(r, c) <= 1.0, "softmax entry outside [0,1]");
        if (k % 2) t.expect(mask(r, c) != 0.0 || p(r, c) == 0.0, "masked entry not exactly 0");
        s += p(r, c);
      }
      t.error(std::abs(s - 1.0));
    }
  }
  return t.done();
}

PropertyResult rng_stream_reproducible() {
  Tally t(0.0);
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xdeadbeefULL}) {
    Rng a(seed), b(seed);
    bool same = true;
    for (int i = 0; i < 10000; ++i) same = same && a.next_u64() == b.next_u64();
    t.expect(same, "streams diverge for seed " + std::to_string(seed));
    Rng c(seed), d(seed);
    bool same_normal = true;
    for (int i = 0; i < 1000; ++i) same_normal = same_normal && c.normal() == d.normal();
    t.expect(same_normal, "normal draws diverge");
  }
  t.expect(Rng(1).next_u64() != Rng(2).next_u64(), "distinct seeds give identical first draw");
  return t.done();
}

// ---------------------------------------------------------------- autodiff

PropertyResult autodiff_tape_topological() {
  Tally t(0.0);
  Rng rng(21);
  Tape tape;
  std::vector<Var> pool{tape.leaf(rng.normal_tensor({3, 3})), tape.leaf(rng.normal_tensor({3, 3}))};
  for (int k = 0; k < 40; ++k) {
    const Var& a = pool[rng.below(pool.size())];
    const Var& b = pool[rng.below(pool.size())];
    Var out;
    switch (rng.below(4)) {
      case 0: out = ad::add(a, b); break;
      case 1: out = ad::mul(a, b); break;
      case 2: out = ad::matmul(a, b); break;
      default: out = ad::sigmoid(a); break;
    }
    t.expect(out.id() > a.id() && out.id() > b.id(), "result id not after its inputs");
    pool.push_back(out);
  }
  t.expect(static_cast<std::size_t>(pool.back().id()) + 1 == tape.size(), "ids are not creation order");
  t.expect_throw<ShapeError>([&] { tape.backward(pool.back()); }, "non-scalar loss");
  return t.done();
}

PropertyResult autodiff_relative_error_formula() {
  Tally t(1e-15);
  t.error(std::abs(gradient_rel_error(1.0, 1.0)));
  t.error(std::abs(gradient_rel_error(0.0, 0.0)));
  t.error(std::abs(gradient_rel_error(2.0, 1.0) - 0.5));
  t.error(std::abs(gradient_rel_error(-1.0, 1.0) - 2.0));
  t.error(std::abs(gradient_rel_error(1e-9, 0.0) - 0.1));
  return t.done();
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> params;
  std::function<Var(std::span<const Var>)> f;
};

std::vector<OpCase> differentiable_ops() {
  std::vector<OpCase> ops;
  auto proj = [](const Var& v, std::uint64_t seed) {
    Rng r(seed, 99);
    return ad::weighted_sum(v, r.normal_tensor(v.shape()));
  };
  auto mat = [](Shape s) { return [s](Rng& r) { return std::vector<Tensor>{r.normal_tensor(s)}; }; };
  auto two = [](Shape s1, Shape s2) {
    return [s1, s2](Rng& r) { return std::vector<Tensor>{r.normal_tensor(s1), r.normal_tensor(s2)}; };
  };
  ops.push_back({"matmul", two({3, 4}, {4, 2}), [=](auto p) { return proj(ad::matmul(p[0], p[1]), 1); }});
  ops.push_back({"add", two({3, 4}, {3, 4}), [=](auto p) { return proj(ad::add(p[0], p[1]), 2); }});
  ops.push_back({"sub", two({3, 4}, {3, 4}), [=](auto p) { return proj(ad::sub(p[0], p[1]), 3); }});
  ops.push_back({"mul", two({3, 4}, {3, 4}), [=](auto p) { return proj(ad::mul(p[0], p[1]), 4); }});
  ops.push_back({"scale", mat({3, 4}), [=](auto p) { return proj(ad::scale(p[0], -1.7), 5); }});
  ops.push_back({"add_row", two({3, 4}, {4}), [=](auto p) { return proj(ad::add_row(p[0], p[1]), 6); }});
  ops.push_back({"sum", mat({3, 4}), [](auto p) { return ad::sum(ad::mul(p[0], p[0])); }});
  ops.push_back({"mean", mat({3, 4}), [](auto p) { return ad::mean(ad::mul(p[0], p[0])); }});
  ops.push_back({"silu", mat({3, 4}), [=](auto p) { return proj(ad::silu(p[0]), 7); }});
  ops.push_back({"sigmoid", mat({3, 4}), [=](auto p) { return proj(ad::sigmoid(p[0]), 8); }});
  ops.push_back({"rmsnorm", two({3, 6}, {6}), [=](auto p) { return proj(ad::rmsnorm(p[0], p[1], 1e-6), 9); }});
  ops.push_back({"embedding", mat({7, 3}), [=](auto p) {
                   const int ids[] = {0, 3, 3, 6};
                   return proj(ad::embedding(p[0], ids), 10);
                 }});
  ops.push_back({"cross_entropy", mat({4, 5}), [](auto p) {
                   const int tg[] = {1, 0, 4, 2};
                   const std::uint8_t mk[] = {1, 1, 0, 1};
                   return ad::cross_entropy(p[0], tg, mk);
                 }});
  ops.push_back({"rotate_rows", mat({6, 8}), [=](auto p) {
                   static const FrequencyTable table = build_frequencies(4, 10000.0, 16);
                   return proj(rotate_rows(p[0], table, RowPositions{3, 2, 4}), 11);
                 }});
  ops.push_back({"ssd_heads",
                 [](Rng& r) {
                   return std::vector<Tensor>{r.normal_tensor({10, 2}), r.normal_tensor({10, 8}, 0.5),
                                              r.normal_tensor({10, 8}, 0.5), r.normal_tensor({10, 6})};
                 },
                 [=](auto p) {
                   const Var a = ad::sigmoid(p[0]);
                   return proj(ssd_heads(a, p[1], p[2], p[3], SsdHeadLayout{2, 5, 2, 4, 3, 2}), 12);
                 }});
  ops.push_back({"causal_softmax_attention",
                 [](Rng& r) {
                   return std::vector<Tensor>{r.normal_tensor({8, 8}), r.normal_tensor({8, 8}), r.normal_tensor({8, 6})};
                 },
                 [=](auto p) {
                   return proj(causal_softmax_attention(p[0], p[1], p[2], AttentionLayout{2, 4, 2, 4, 3}), 13);
                 }});
  return ops;
}

PropertyResult autodiff_op_gradients() {
  Tally t(1e-4);
  for (const auto& op : differentiable_ops()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      Rng rng(seed, 7);
      GradCheckOptions o;
      o.seed = seed;
      const GradientReport rep = grad_check(op.f, op.params(rng), o);
      t.error(rep.max_rel_error(), op.name + " seed " + std::to_string(seed));
    }
  }
  return t.done();
}

// Gradients checked at a point where they are well above the
// finite-difference noise floor (~1e-16 * |loss| / eps).
ModelConfig gradient_check_config() {
  ModelConfig c = ModelConfig::micro();
  c.init_std = 0.3;
  c.decay_bias_init = 0.5;
  c.max_position = 64;
  return c;
}

PropertyResult autodiff_model_gradient() {
  Tally t(1e-4);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Model m = Model::initialize(gradient_check_config(), seed);
    Rng rng(seed, 5);
    std::vector<int> ids(8), targets(8);
    for (int& v : ids) v = static_cast<int>(rng.below(kByteVocabSize));
    for (int& v : targets) v = static_cast<int>(rng.below(kByteVocabSize));
    const std::vector<std::uint8_t> mask(ids.size(), 1);
    std::vector<Tensor> params;
    for (const auto& [name, p] : m.named_parameters()) params.push_back(*p);
    auto f = [&](std::span<const Var> leaves) {
      ModelWeights<Var> w = bind_constants(m.weights());
      std::size_t i = 0;
      ModelWeights<Var>::visit(w, [&](const std::string&, Var& v) { v = leaves[i++]; });
      return ad::cross_entropy(model_forward(m, w, ids, {1, ids.size(), 0}), targets, mask);
    };
    GradCheckOptions o;
    o.max_coords = 8;
    o.seed = seed;
    const GradientReport rep = grad_check(f, params, o);
    for (const auto& e : rep.entries) {
      t.error(e.max_rel_error, m.named_parameters()[e.param].first + " seed " + std::to_string(seed));
    }
  }
  return t.done();
}

PropertyResult autodiff_independent_param_zero() {
  Tally t(0.0);
  Rng rng(22);
  Tape tape;
  const Var x = tape.leaf(rng.normal_tensor({3, 3}));
  const Var unused = tape.leaf(rng.normal_tensor({2, 5}));
  const Var side = tape.leaf(rng.normal_tensor({3, 3}));
  ad::mul(side, side);  // recorded but not on the loss path
  const Gradients g = tape.backward(ad::sum(ad::silu(x)));
  t.expect(max_abs(g.of(unused)) == 0.0 && g.of(unused).shape() == unused.shape(), "unreached leaf gradient nonzero");
  t.expect(max_abs(g.of(side)) == 0.0, "off-path leaf gradient nonzero");
  return t.done();
}

// ---------------------------------------------------------------- rope

PropertyResult rope_theta_strictly_decreasing() {
  Tally t(0.0);
  for (std::size_t d : {2, 4, 8, 16, 64, 128}) {
    for (double base : {2.0, 500.0, 10000.0}) {
      const FrequencyTable tab = build_frequencies(d, base);
      t.expect(tab.theta().size() == d / 2, "theta length");
      t.expect(tab.theta()[0] == 1.0, "theta_0 != 1");
      for (std::size_t i = 1; i < tab.theta().size(); ++i) t.expect(tab.theta()[i] < tab.theta()[i - 1], "not decreasing");
    }
  }
  t.expect_throw<DomainError>([] { build_frequencies(5); }, "odd d");
  return t.done();
}

PropertyResult rope_norm_preservation() {
  Tally t(1e-12);
  Rng rng(31);
  const FrequencyTable tab = build_frequencies(16, 10000.0, 256);
  for (int k = 0; k < 100; ++k) {
    const Tensor x = rng.normal_tensor({16});
    const std::size_t m = k < 50 ? rng.below(256) : rng.below(1u << 20);
    const double n0 = norm2(x.data());
    t.error(std::abs(norm2(rotate(x, {m}, tab).data()) - n0) / std::max(1.0, n0));
  }
  return t.done();
}

PropertyResult rope_composition() {
  Tally t(1e-10);
  Rng rng(32);
  const FrequencyTable tab = build_frequencies(16, 10000.0, 512);
  for (int k = 0; k < 100; ++k) {
    const Tensor x = rng.normal_tensor({16});
    const std::size_t m1 = rng.below(400), m2 = rng.below(400);
    t.error(max_abs_diff(rotate(rotate(x, {m1}, tab), {m2}, tab), rotate(x, {m1 + m2}, tab)));
  }
  return t.done();
}

PropertyResult rope_shift_invariance() {
  Tally t(1e-10);
  Rng rng(33);
  const FrequencyTable tab = build_frequencies(16, 10000.0, 1024);
  for (int k = 0; k < 200; ++k) {
    const Tensor q = rng.normal_tensor({16}), kk = rng.normal_tensor({16});
    const std::size_t m = rng.below(300), n = rng.below(300), s = 1 + rng.below(300);
    t.error(std::abs(relative_score(q, {m}, kk, {n}, tab) - relative_score(q, {m + s}, kk, {n + s}, tab)));
  }
  return t.done();
}

PropertyResult rope_identity_at_zero() {
  Tally t(0.0);
  Rng rng(34);
  const FrequencyTable tab = build_frequencies(32);
  for (int k = 0; k < 20; ++k) {
    const Tensor x = rng.normal_tensor({3, 32});
    t.expect(rotate(x, {0}, tab) == x, "rotate(x, 0) != x bitwise");
  }
  return t.done();
}

PropertyResult rope_roles_identical() {
  Tally t(0.0);
  Rng rng(35);
  const FrequencyTable tab = build_frequencies(8, 10000.0, 64);
  for (int k = 0; k < 20; ++k) {
    const Tensor x = rng.normal_tensor({8});
    const PositionIndex m{rng.below(100)};
    const Tensor ref = rotate(x, m, tab, Role::query);
    for (Role r : {Role::key, Role::c, Role::b}) t.expect(rotate(x, m, tab, r) == ref, "role changes rotation bits");
  }
  return t.done();
}

PropertyResult rope_matches_block_diagonal_matrix() {
  Tally t(1e-12);
  Rng rng(36);
  for (std::size_t d : {2, 4, 8}) {
    const FrequencyTable tab = build_frequencies(d, 10000.0, 64);
    for (int k = 0; k < 20; ++k) {
      const Tensor x = rng.normal_tensor({d});
      const std::size_t m = rng.below(200);
      t.error(max_abs_diff(rotate(x, {m}, tab), apply_matrix(explicit_rotation_matrix(tab, m), x)));
    }
  }
  return t.done();
}

// ---------------------------------------------------------------- ssd

PropertyResult ssd_inputs_validated() {
  Tally t(0.0);
  Rng rng(41);
  SSDInputs ok = random_ssd(rng, 4, 2, 2, false);
  ok.validate();
  t.expect(true, "");
  for (double bad : {0.0, -0.2, 1.5}) {
    SSDInputs in = ok;
    in.a[2] = bad;
    t.expect_throw<DomainError>([&] { in.validate(); }, "a=" + std::to_string(bad));
  }
  SSDInputs short_x = ok;
  short_x.X = rng.normal_tensor({3, 2});
  t.expect_throw<ShapeError>([&] { short_x.validate(); }, "length mismatch");
  return t.done();
}

PropertyResult ssd_decay_mask_structure() {
  Tally t(0.0);
  Rng rng(42);
  for (int k = 0; k < 20; ++k) {
    const std::size_t T = 1 + rng.below(12);
    const Tensor a = rng.uniform_tensor({T}, 0.05, 1.0);
    const Tensor L = decay_mask(a);
    for (std::size_t j = 0; j < T; ++j) {
      t.expect(L(j, j) == 1.0, "diagonal not exactly 1");
      for (std::size_t i = j + 1; i < T; ++i) t.expect(L(j, i) == 0.0, "nonzero above diagonal");
      for (std::size_t i = 1; i <= j; ++i) t.expect(L(j, i - 1) <= L(j, i), "row increases moving left");
    }
  }
  return t.done();
}

PropertyResult ssd_three_form_equivalence() {
  Tally t(1e-9);
  Rng rng(43);
  const FrequencyTable tab = build_frequencies(8, 10000.0, 512);
  for (bool rope : {false, true}) {
    for (bool unit : {true, false}) {
      for (std::size_t T : {1, 7, 33, 64, 130}) {
        const SSDInputs in = random_ssd(rng, T, 8, 3, unit);
        const Tensor rec = ssd_recurrent(in, tab, rope);
        const Tensor mat = ssd_matrix(in, tab, rope);
        const std::string at = "T=" + std::to_string(T) + (rope ? " rope" : "") + (unit ? " a=1" : "");
        t.error(rel_diff(mat, rec), at);
        for (std::size_t chunk : {1, 5, 16, 256}) t.error(rel_diff(ssd_chunked(in, tab, rope, chunk), rec), at);
      }
    }
  }
  return t.done();
}

PropertyResult ssd_attention_duality() {
  Tally t(1e-10);
  Rng rng(44);
  const FrequencyTable tab = build_frequencies(8, 10000.0, 64);
  for (bool rope : {false, true}) {
    for (int k = 0; k < 10; ++k) {
      const std::size_t T = 1 + rng.below(24);
      const SSDInputs in = random_ssd(rng, T, 8, 4, true);
      const AttentionInputs att{in.C, in.B, in.X, 1};
      t.error(rel_diff(ssd_matrix(in, tab, rope), causal_attention(att, tab, Normalize::none, rope)));
    }
  }
  return t.done();
}

PropertyResult ssd_causality() {
  Tally t(0.0);
  Rng rng(45);
  const FrequencyTable tab = build_frequencies(4, 10000.0, 64);
  for (int k = 0; k < 10; ++k) {
    const std::size_t T = 12;
    const SSDInputs in = random_ssd(rng, T, 4, 3, false);
    const std::size_t s = rng.below(T);
    SSDInputs pert = in;
    for (std::size_t c = 0; c < 3; ++c) pert.X(s, c) += 1.0;
    for (int form = 0; form < 3; ++form) {
      auto run = [&](const SSDInputs& x) {
        return form == 0 ? ssd_recurrent(x, tab, true) : form == 1 ? ssd_matrix(x, tab, true) : ssd_chunked(x, tab, true, 5);
      };
      const Tensor y0 = run(in), y1 = run(pert);
      for (std::size_t j = 0; j < s; ++j) {
        for (std::size_t c = 0; c < 3; ++c) t.expect(y0(j, c) == y1(j, c), "output before the perturbation moved");
      }
      t.expect(max_abs_diff(y0, y1) > 0.0, "perturbation had no effect");
    }
  }
  return t.done();
}

PropertyResult ssd_decay_monotonicity() {
  Tally t(0.0);
  Rng rng(46);
  for (int k = 0; k < 20; ++k) {
    const std::size_t T = 3 + rng.below(10);
    const Tensor a = rng.uniform_tensor({T}, 0.3, 1.0);
    const std::size_t s = 1 + rng.below(T - 1);
    Tensor a2 = a;
    a2[s] *= 0.5;
    const Tensor L = decay_mask(a), L2 = decay_mask(a2);
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t i = 0; i <= j; ++i) {
        if (i < s && s <= j) {
          t.expect(L2(j, i) < L(j, i), "shrinking a_t did not shrink L[j][i]");
        } else {
          t.expect(L2(j, i) == L(j, i), "entry not spanning t changed");
        }
      }
    }
    SSDInputs in = random_ssd(rng, T, 2, 2, false);
    in.a = a;
    for (double& v : in.B.data()) v = std::abs(v);
    for (double& v : in.C.data()) v = std::abs(v);
    for (double& v : in.X.data()) v = std::abs(v);
    SSDInputs in2 = in;
    in2.a = a2;
    const FrequencyTable tab = build_frequencies(2);
    const Tensor y = ssd_recurrent(in, tab, false), y2 = ssd_recurrent(in2, tab, false);
    for (std::size_t j = s; j < T; ++j) {
      for (std::size_t c = 0; c < 2; ++c) t.expect(y2(j, c) <= y(j, c), "|y| grew after shrinking a_t");
    }
  }
  return t.done();
}

PropertyResult ssd_recurrent_linear_memory() {
  Tally t(0.0);
  Rng rng(47);
  const std::size_t T = 512, N = 8, P = 4;
  const SSDInputs in = random_ssd(rng, T, N, P, false);
  const FrequencyTable tab = build_frequencies(N, 10000.0, T);
  AllocationProbe probe;
  ssd_recurrent(in, tab, true);
  t.expect(probe.largest_numel() <= T * P, "recurrent path allocated " + std::to_string(probe.largest_numel()) +
                                               " elements (T*T = " + std::to_string(T * T) + ")");
  return t.done();
}

// ---------------------------------------------------------------- attention

PropertyResult attention_per_head_dim_even() {
  Tally t(0.0);
  Rng rng(51);
  const AttentionInputs odd{rng.normal_tensor({4, 6}), rng.normal_tensor({4, 6}), rng.normal_tensor({4, 4}), 2};
  t.expect_throw<ShapeError>([&] { odd.validate(); }, "per-head dim 3");
  const AttentionInputs even{rng.normal_tensor({4, 8}), rng.normal_tensor({4, 8}), rng.normal_tensor({4, 4}), 2};
  even.validate();
  t.expect(true, "");
  ModelConfig cfg;
  cfg.d_model = 12;
  cfg.n_heads = 4;
  t.expect_throw<DomainError>([&] { cfg.validate(); }, "model per-head dim 3");
  return t.done();
}

PropertyResult attention_recurrent_state_direct_sum() {
  Tally t(1e-10);
  Rng rng(52);
  const std::size_t d = 8, P = 3, T = 20;
  const FrequencyTable tab = build_frequencies(d, 10000.0, 64);
  for (FeatureMap fm : {FeatureMap::identity, FeatureMap::elu_plus_one}) {
    LinearAttentionOptions opt;
    opt.query_map = opt.key_map = fm;
    const Tensor Q = rng.normal_tensor({T, d}), K = rng.normal_tensor({T, d}), V = rng.normal_tensor({T, P});
    RecurrentAttnState st = RecurrentAttnState::zeros(d, P);
    for (std::size_t i = 0; i < T; ++i) {
      Tensor qi({d}), ki({d}), vi({P});
      std::copy_n(Q.row(i).begin(), d, qi.raw());
      std::copy_n(K.row(i).begin(), d, ki.raw());
      std::copy_n(V.row(i).begin(), P, vi.raw());
      LinearStepResult r = linear_attention_step(std::move(st), qi, ki, vi, {i}, tab, opt);
      st = std::move(r.state);
      // Direct evaluation of the running sums and the normalised output.
      const Tensor fq = apply_feature_map(fm, rotate(qi, {i}, tab));
      Tensor S({d, P}), z({d}), num({P});
      double den = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        Tensor kj({d});
        std::copy_n(K.row(j).begin(), d, kj.raw());
        const Tensor fk = apply_feature_map(fm, rotate(kj, {j}, tab));
        const double w = dot(fq.data(), fk.data());
        den += w;
        for (std::size_t c = 0; c < P; ++c) num[c] += w * V(j, c);
        for (std::size_t a = 0; a < d; ++a) {
          z[a] += fk[a];
          for (std::size_t c = 0; c < P; ++c) S(a, c) += fk[a] * V(j, c);
        }
      }
      t.error(rel_diff(st.S, S));
      t.error(rel_diff(st.z, z));
      if (std::abs(den) >= opt.eps) t.error(rel_diff(r.y, scale(num, 1.0 / den)));
    }
  }
  return t.done();
}

PropertyResult attention_causality() {
  Tally t(0.0);
  Rng rng(53);
  const FrequencyTable tab = build_frequencies(4, 10000.0, 64);
  for (Normalize nm : {Normalize::softmax, Normalize::none}) {
    for (int k = 0; k < 10; ++k) {
      const std::size_t T = 10;
      AttentionInputs in{rng.normal_tensor({T, 8}), rng.normal_tensor({T, 8}), rng.normal_tensor({T, 6}), 2};
      const std::size_t m = rng.below(T - 1);
      AttentionInputs pert = in;
      for (std::size_t r = m + 1; r < T; ++r) {
        for (std::size_t c = 0; c < 8; ++c) pert.K(r, c) += rng.normal();
        for (std::size_t c = 0; c < 6; ++c) pert.V(r, c) += rng.normal();
      }
      const Tensor y0 = causal_attention(in, tab, nm), y1 = causal_attention(pert, tab, nm);
      for (std::size_t r = 0; r <= m; ++r) {
        for (std::size_t c = 0; c < 6; ++c) t.expect(y0(r, c) == y1(r, c), "row m depends on later K/V");
      }
    }
  }
  return t.done();
}

PropertyResult attention_softmax_rows_sum() {
  Tally t(1e-12);
  Rng rng(54);
  const FrequencyTable tab = build_frequencies(4, 10000.0, 64);
  for (int k = 0; k < 20; ++k) {
    const std::size_t T = 1 + rng.below(16);
    // With V = I the output rows are the post-mask weight rows.
    const AttentionInputs in{rng.normal_tensor({T, 4}, 3.0), rng.normal_tensor({T, 4}, 3.0), Tensor::identity(T), 1};
    const Tensor w = causal_attention(in, tab, Normalize::softmax);
    for (std::size_t r = 0; r < T; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < T; ++c) s += w(r, c);
      t.error(std::abs(s - 1.0));
    }
  }
  return t.done();
}

PropertyResult attention_permutation_sensitivity() {
  Tally t(0.0);
  Rng rng(55);
  const FrequencyTable tab = build_frequencies(8, 10000.0, 64);
  for (int k = 0; k < 10; ++k) {
    const std::size_t T = 8;
    const AttentionInputs in{rng.normal_tensor({T, 8}), rng.normal_tensor({T, 8}), rng.normal_tensor({T, 4}), 1};
    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = T - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    if (std::is_sorted(perm.begin(), perm.end())) std::swap(perm[0], perm[1]);
    AttentionInputs p = in;
    for (std::size_t r = 0; r < T; ++r) {
      std::copy_n(in.Q.row(perm[r]).begin(), 8, p.Q.row(r).begin());
      std::copy_n(in.K.row(perm[r]).begin(), 8, p.K.row(r).begin());
      std::copy_n(in.V.row(perm[r]).begin(), 4, p.V.row(r).begin());
    }
    const Tensor y = causal_attention(in, tab, Normalize::softmax);
    const Tensor yp = causal_attention(p, tab, Normalize::softmax);
    double diff = 0.0;
    for (std::size_t r = 0; r < T; ++r) {
      for (std::size_t c = 0; c < 4; ++c) diff = std::max(diff, std::abs(yp(r, c) - y(perm[r], c)));
    }
    t.expect(diff > 1e-3, "permuted input gave the same outputs");
  }
  return t.done();
}

// ---------------------------------------------------------------- blocks

PropertyResult blocks_zero_projection_identity() {
  Tally t(0.0);
  const ModelConfig cfg = tiny_config();
  const FrequencyTable at = build_frequencies(cfg.head_dim(), cfg.rope_base, 64);
  const FrequencyTable st = build_frequencies(cfg.d_state, cfg.rope_base, 64);
  const BlockContext ctx{cfg, at, st};
  Rng rng(61);
  const Tensor x = rng.normal_tensor({2 * 6, cfg.d_model});
  const SequenceShape shape{2, 6, 0};
  SSBlockParams ss = init_ss_block(cfg, rng);
  ss.w_o = Tensor(ss.w_o.shape());
  SABlockParams sa = init_sa_block(cfg, rng);
  sa.w_o = Tensor(sa.w_o.shape());
  FFNParams ffn = init_ffn(cfg, rng);
  ffn.w2 = Tensor(ffn.w2.shape());
  t.expect(ss_block_forward(Var(x), constants(ss), ctx, shape).value() == x, "SS with zero W_O");
  t.expect(sa_block_forward(Var(x), constants(sa), ctx, shape).value() == x, "SA with zero W_O");
  t.expect(ffn_sublayer(Var(x), constants(ffn), cfg.norm_eps).value() == x, "FFN with zero W_2");
  HybridModuleParams m = init_hybrid_module(cfg, rng);
  for (auto& l : m.ss) {
    l.mixer.w_o = Tensor(l.mixer.w_o.shape());
    l.ffn.w2 = Tensor(l.ffn.w2.shape());
  }
  for (auto& l : m.sa) {
    l.mixer.w_o = Tensor(l.mixer.w_o.shape());
    l.ffn.w2 = Tensor(l.ffn.w2.shape());
  }
  t.expect(hybrid_module_forward(Var(x), constants(m), ctx, shape).value() == x, "module with zero projections");
  return t.done();
}

PropertyResult blocks_cached_matches_full() {
  Tally t(1e-9);
  for (bool long_scale : {false, true}) {
    ModelConfig cfg = tiny_config();
    cfg.long_position_scaling = long_scale;
    cfg.long_position_base = 3;
    const FrequencyTable at = build_frequencies(cfg.head_dim(), cfg.rope_base, 64);
    const FrequencyTable st = build_frequencies(cfg.d_state, cfg.rope_base, 64);
    const BlockContext ctx{cfg, at, st};
    Rng rng(62);
    const std::size_t T = 11;
    const Tensor x = rng.normal_tensor({T, cfg.d_model});
    const HybridModuleParams m = init_hybrid_module(cfg, rng);
    const Tensor full = hybrid_module_forward(Var(x), constants(m), ctx, {1, T, 0}).value();
    ModuleCache cache = make_module_cache(cfg);
    Tensor inc({T, cfg.d_model});
    // Uneven pieces: a prompt chunk then single tokens.
    std::size_t pos = 0;
    for (std::size_t len : {4, 1, 1, 3, 1, 1}) {
      Tensor piece({len, cfg.d_model});
      std::copy_n(x.raw() + pos * cfg.d_model, len * cfg.d_model, piece.raw());
      const Tensor y = hybrid_module_forward(Var(piece), constants(m), ctx, {1, len, pos}, &cache).value();
      std::copy_n(y.raw(), len * cfg.d_model, inc.raw() + pos * cfg.d_model);
      pos += len;
    }
    t.error(rel_diff(inc, full), long_scale ? "long-position scaling" : "default");
    t.expect_throw<CacheError>(
        [&] { hybrid_module_forward(Var(rng.normal_tensor({1, cfg.d_model})), constants(m), ctx, {1, 1, 3}, &cache); },
        "out-of-order cache use");
  }
  return t.done();
}

PropertyResult blocks_ratio_structural() {
  Tally t(0.0);
  const ModelConfig cfg = tiny_config();
  Rng rng(63);
  HybridModuleParams m = init_hybrid_module(cfg, rng);
  const auto kinds = m.layer_kinds();
  std::vector<LayerKind> want(7, LayerKind::ss);
  want.push_back(LayerKind::sa);
  t.expect(kinds == want, "layer kinds differ from 7 SS + 1 SA");
  HybridModuleParams broken = m;
  broken.ss.pop_back();
  t.expect_throw<std::invalid_argument>([&] { validate_module(broken, cfg); }, "6:1 module");
  return t.done();
}

PropertyResult blocks_activation_bound() {
  Tally t(0.0);
  Rng rng(64);
  for (int k = 0; k < 20; ++k) {
    const std::size_t d = 4 + rng.below(12);
    const Tensor x = rng.normal_tensor({5, d}, std::pow(10.0, rng.uniform(-3.0, 3.0)));
    const Tensor g = rng.normal_tensor({d});
    const Tensor y = rmsnorm(Var(x), Var(g), 1e-6).value();
    double gmax = 0.0;
    for (double v : g.data()) gmax = std::max(gmax, std::abs(v));
    for (std::size_t r = 0; r < 5; ++r) {
      const double rms = norm2(y.row(r)) / std::sqrt(static_cast<double>(d));
      t.expect(rms <= gmax * (1.0 + 1e-12), "token RMS above max gain");
    }
  }
  return t.done();
}

PropertyResult blocks_checkpoint_roundtrip() {
  Tally t(0.0);
  const Model m = Model::initialize(tiny_config(), 65);
  const auto path = std::filesystem::temp_directory_path() /
                    ("transx_verify_" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".ckpt");
  save_checkpoint(path, m, {{"note", "verify"}});
  nlohmann::json extra;
  const Model back = load_checkpoint(path, &extra);
  std::filesystem::remove(path);
  const auto a = m.named_parameters();
  const auto b = back.named_parameters();
  t.expect(a.size() == b.size(), "parameter count changed");
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    t.expect(a[i].first == b[i].first && *a[i].second == *b[i].second, "tensor " + a[i].first + " not bit-identical");
  }
  t.expect(nlohmann::json(m.config()) == nlohmann::json(back.config()), "config changed");
  t.expect(extra.value("note", "") == "verify", "extra header lost");
  return t.done();
}

// ---------------------------------------------------------------- lm

PropertyResult lm_config_invariants() {
  Tally t(0.0);
  ModelConfig::micro().validate();
  t.expect(true, "");
  ModelConfig bad = ModelConfig::micro();
  bad.n_heads = 5;
  t.expect_throw<DomainError>([&] { bad.validate(); }, "d_model not divisible by n_heads");
  bad = ModelConfig::micro();
  bad.d_model = 24;
  bad.n_heads = 8;
  t.expect_throw<DomainError>([&] { bad.validate(); }, "odd per-head dim");
  return t.done();
}

PropertyResult lm_warmup_fraction_range() {
  Tally t(0.0);
  TrainConfig c;
  for (double w : {0.0, 0.1, 0.99}) {
    c.warmup_fraction = w;
    c.validate();
    t.expect(true, "");
  }
  for (double w : {-0.1, 1.0, 1.5}) {
    c.warmup_fraction = w;
    t.expect_throw<DomainError>([&] { c.validate(); }, "warmup fraction " + std::to_string(w));
  }
  return t.done();
}

PropertyResult lm_task_ids_valid() {
  Tally t(0.0);
  Rng rng(71);
  for (const char* kind : {"copy", "needle"}) {
    for (std::size_t T : {16, 33, 64}) {
      const TaskSpec spec = TaskSpec::parse(kind, T);
      for (int k = 0; k < 20; ++k) {
        const TaskInstance inst = spec.sample(rng);
        t.expect(inst.inputs.size() == T && inst.targets.size() == T && inst.mask.size() == T, "length mismatch");
        bool any = false;
        for (std::size_t i = 0; i < T; ++i) {
          t.expect(inst.inputs[i] >= 0 && static_cast<std::size_t>(inst.inputs[i]) < kByteVocabSize, "input id range");
          t.expect(inst.targets[i] >= 0 && static_cast<std::size_t>(inst.targets[i]) < kByteVocabSize, "target id range");
          any = any || inst.mask[i];
        }
        t.expect(any, "empty loss mask");
      }
    }
  }
  return t.done();
}

PropertyResult lm_causality() {
  Tally t(0.0);
  const Model m = Model::initialize(tiny_config(), 72);
  Rng rng(72);
  for (int k = 0; k < 4; ++k) {
    const std::size_t T = 9;
    std::vector<int> ids(T);
    for (int& v : ids) v = static_cast<int>(rng.below(kByteVocabSize));
    const std::size_t edit = rng.below(T);
    std::vector<int> ids2 = ids;
    ids2[edit] = (ids2[edit] + 1) % static_cast<int>(kByteVocabSize);
    const Tensor a = model_logits(m, ids), b = model_logits(m, ids2);
    for (std::size_t r = 0; r < edit; ++r) {
      for (std::size_t c = 0; c < a.cols(); ++c) t.expect(a(r, c) == b(r, c), "logits before the edit changed");
    }
  }
  return t.done();
}

PropertyResult lm_cache_prefix_consistency() {
  Tally t(1e-9);
  const Model m = Model::initialize(tiny_config(), 73);
  std::vector<int> seq = tokenize_bytes("hello");
  GenerateOptions opt;
  opt.n_new = 8;
  opt.on_token = [&](const GenerateTrace& tr) {
    const Tensor full = model_logits(m, seq);
    Tensor last({1, full.cols()});
    std::copy_n(full.row(full.rows() - 1).begin(), full.cols(), last.raw());
    t.error(rel_diff(*tr.logits, last), "step " + std::to_string(tr.step));
    seq.push_back(tr.token);
  };
  generate(m, tokenize_bytes("hello"), opt);
  return t.done();
}

PropertyResult lm_untrained_loss_uniform() {
  Tally t(0.05);
  const Model m = Model::initialize(ModelConfig::micro(), 74);
  Rng rng(74);
  const std::size_t T = 32;
  std::vector<int> ids(T + 1);
  for (int& v : ids) v = static_cast<int>(rng.below(kByteVocabSize));
  const Tensor logits = model_logits(m, std::span<const int>(ids).first(T));
  const std::vector<std::uint8_t> mask(T, 1);
  const double loss = cross_entropy(logits, std::span<const int>(ids).subspan(1), mask);
  const double ref = std::log(static_cast<double>(kByteVocabSize));
  t.error(std::abs(loss - ref) / ref);
  return t.done();
}

PropertyResult lm_ablation_sa_unaffected() {
  Tally t(0.0);
  ModelConfig on = tiny_config();
  ModelConfig off = on;
  off.use_rope_on_ssd = false;
  const FrequencyTable at = build_frequencies(on.head_dim(), on.rope_base, 64);
  const FrequencyTable st = build_frequencies(on.d_state, on.rope_base, 64);
  Rng rng(75);
  const HybridModuleParams m = init_hybrid_module(on, rng);
  const std::size_t T = 7;
  const Tensor x = rng.normal_tensor({T, on.d_model});
  const BlockContext c_on{on, at, st}, c_off{off, at, st};
  const auto sa = constants(m.sa[0].mixer);
  t.expect(sa_block_forward(Var(x), sa, c_on, {1, T, 0}).value() == sa_block_forward(Var(x), sa, c_off, {1, T, 0}).value(),
           "SA output depends on the SSD rope switch");
  const auto ss = constants(m.ss[0].mixer);
  t.expect(max_abs_diff(ss_block_forward(Var(x), ss, c_on, {1, T, 0}).value(),
                        ss_block_forward(Var(x), ss, c_off, {1, T, 0}).value()) > 0.0,
           "SS output ignores the SSD rope switch");
  return t.done();
}

// ---------------------------------------------------------------- cli

PropertyResult cli_metadata_reproducible() {
  Tally t(0.0);
  RunConfig cfg;
  cfg.train.seed = 1234;
  cfg.task = "needle";
  cfg.ablate_ssd_rope = true;
  cfg.model.d_state = 24;
  const nlohmann::json meta = run_metadata("train", cfg);
  for (const char* key : {"config", "seed", "fp_mode", "build_id"}) {
    t.expect(meta.contains(key), std::string("metadata lacks ") + key);
  }
  const RunConfig back = meta.at("config").get<RunConfig>();
  t.expect(nlohmann::json(back) == nlohmann::json(cfg), "config echo does not reproduce the run config");
  return t.done();
}

PropertyResult cli_registry_coverage() {
  Tally t(0.0);
  for (const auto& gap : registry_coverage_gaps()) t.expect(false, "coverage gap: " + gap);
  t.expect(true, "");
  return t.done();
}

PropertyResult cli_bench_protocol() {
  Tally t(0.0);
  BenchConfig b;
  b.lengths = {8, 16};
  b.iterations = 5;
  b.warmups = 2;
  const ModelConfig cfg = tiny_config();
  const BenchReport rep = run_bench(b, cfg, 1);
  t.expect(rep.records.size() == b.modes.size() * b.lengths.size(), "record count");
  for (const auto& r : rep.records) {
    std::vector<double> s = r.samples;
    std::sort(s.begin(), s.end());
    t.expect(r.samples.size() >= 5 && r.warmups >= 2, "timing protocol");
    t.expect(r.seconds == s[s.size() / 2], "reported time is not the median");
  }
  t.expect(rep.slopes.size() == b.modes.size(), "one slope per mode");
  BenchConfig few = b;
  few.iterations = 4;
  t.expect_throw<ConfigError>([&] { run_bench(few, cfg, 1); }, "4 timed iterations");
  BenchConfig huge = b;
  huge.modes = {"attention-full"};
  huge.lengths = {1u << 22};
  t.expect_throw<ConfigError>([&] { run_bench(huge, cfg, 1); }, "OOM-scale length");
  return t.done();
}

const std::vector<Property>& build_registry() {
  static const std::vector<Property> reg{
      {"tensor.shape_matches_data", "tensor", "product(shape) == len(data)", tensor_shape_matches_data},
      {"tensor.nonfinite_surfaced", "tensor", "NaN/Inf results raise", tensor_nonfinite_surfaced},
      {"tensor.matmul_associativity", "tensor", "(AB)C == A(BC) to 1e-10", tensor_matmul_associativity},
      {"tensor.softmax_rows_normalized", "tensor", "softmax rows in [0,1], sum 1 to 1e-12", tensor_softmax_rows_normalized},
      {"rng.stream_reproducible", "rng", "same seed, same 10^4 draws", rng_stream_reproducible},
      {"autodiff.tape_topological", "autodiff", "creation order is a topological order", autodiff_tape_topological},
      {"autodiff.relative_error_formula", "autodiff", "|ad-fd| / max(|ad|,|fd|,1e-8)", autodiff_relative_error_formula},
      {"autodiff.op_gradients", "autodiff", "every differentiable op vs central differences, 3 seeds", autodiff_op_gradients},
      {"autodiff.model_gradient", "autodiff", "micro model loss vs central differences, 3 seeds", autodiff_model_gradient},
      {"autodiff.independent_param_zero", "autodiff", "unreached parameters get exact zeros", autodiff_independent_param_zero},
      {"rope.theta_strictly_decreasing", "rope", "theta_0 == 1, strictly decreasing, d even", rope_theta_strictly_decreasing},
      {"rope.norm_preservation", "rope", "|rotate(x,m)| == |x| to 1e-12", rope_norm_preservation},
      {"rope.composition", "rope", "rotate(rotate(x,a),b) == rotate(x,a+b) to 1e-10", rope_composition},
      {"rope.shift_invariance", "rope", "score(q,m,k,n) == score(q,m+s,k,n+s), 200 tuples", rope_shift_invariance},
      {"rope.identity_at_zero", "rope", "rotate(x,0) bit-equals x", rope_identity_at_zero},
      {"rope.roles_identical", "rope", "query/key/C/B share one rotation", rope_roles_identical},
      {"rope.block_diagonal_matrix", "rope", "rotate == explicit block-diagonal matrix to 1e-12", rope_matches_block_diagonal_matrix},
      {"ssd.inputs_validated", "ssd", "a in (0,1], consistent T", ssd_inputs_validated},
      {"ssd.decay_mask_structure", "ssd", "L lower-triangular, unit diagonal, monotone rows", ssd_decay_mask_structure},
      {"ssd.three_form_equivalence", "ssd", "recurrent == matrix == chunked to 1e-9", ssd_three_form_equivalence},
      {"ssd.attention_duality", "ssd", "(L o CB^T)X == unnormalised masked attention to 1e-10", ssd_attention_duality},
      {"ssd.causality", "ssd", "perturbing X_t leaves y_<t exactly unchanged", ssd_causality},
      {"ssd.decay_monotonicity", "ssd", "shrinking a_t shrinks the spanning L entries", ssd_decay_monotonicity},
      {"ssd.recurrent_linear_memory", "ssd", "recurrent path allocates no T x T tensor", ssd_recurrent_linear_memory},
      {"attention.per_head_dim_even", "attention", "odd per-head dims rejected", attention_per_head_dim_even},
      {"attention.recurrent_state_direct_sum", "attention", "linear state == direct sums to 1e-10", attention_recurrent_state_direct_sum},
      {"attention.causality", "attention", "row m independent of later K/V", attention_causality},
      {"attention.softmax_rows_sum", "attention", "post-mask weights sum to 1 to 1e-12", attention_softmax_rows_sum},
      {"attention.permutation_sensitivity", "attention", "permuted inputs change outputs by > 1e-3", attention_permutation_sensitivity},
      {"blocks.zero_projection_identity", "blocks", "zero output projection gives the identity", blocks_zero_projection_identity},
      {"blocks.cached_matches_full", "blocks", "incremental == full forward to 1e-9", blocks_cached_matches_full},
      {"blocks.ratio_structural", "blocks", "module layer kinds follow 7:1", blocks_ratio_structural},
      {"blocks.activation_bound", "blocks", "normed token RMS <= max gain", blocks_activation_bound},
      {"blocks.checkpoint_roundtrip", "blocks", "save/load is bit-exact", blocks_checkpoint_roundtrip},
      {"lm.config_invariants", "lm", "d_model divisible by heads, even head dim", lm_config_invariants},
      {"lm.warmup_fraction_range", "lm", "warmup fraction in [0,1)", lm_warmup_fraction_range},
      {"lm.task_ids_valid", "lm", "task ids < vocab, masks valid", lm_task_ids_valid},
      {"lm.causality", "lm", "editing token t leaves logits[<t] unchanged", lm_causality},
      {"lm.cache_prefix_consistency", "lm", "cached generation logits == recompute to 1e-9", lm_cache_prefix_consistency},
      {"lm.untrained_loss_uniform", "lm", "untrained loss within 5% of ln V", lm_untrained_loss_uniform},
      {"lm.ablation_sa_unaffected", "lm", "SSD rope switch leaves SA outputs unchanged", lm_ablation_sa_unaffected},
      {"cli.metadata_reproducible", "cli", "metadata echo reproduces the config", cli_metadata_reproducible},
      {"cli.registry_coverage", "cli", "invariants and properties match 1:1", cli_registry_coverage},
      {"cli.bench_protocol", "cli", ">= 2 warmups, median of >= 5, size guard", cli_bench_protocol},
  };
  return reg;
}

}  // namespace

const std::vector<Property>& property_registry() { return build_registry(); }

const std::vector<std::string>& required_properties() {
  static const std::vector<std::string> names{
      // tensor-core
      "tensor.shape_matches_data", "tensor.nonfinite_surfaced", "tensor.matmul_associativity",
      "tensor.softmax_rows_normalized", "rng.stream_reproducible",
      // autodiff
      "autodiff.tape_topological", "autodiff.relative_error_formula", "autodiff.op_gradients",
      "autodiff.model_gradient", "autodiff.independent_param_zero",
      // rope
      "rope.theta_strictly_decreasing", "rope.norm_preservation", "rope.composition", "rope.shift_invariance",
      "rope.identity_at_zero", "rope.roles_identical", "rope.block_diagonal_matrix",
      // ssd
      "ssd.inputs_validated", "ssd.decay_mask_structure", "ssd.three_form_equivalence", "ssd.attention_duality",
      "ssd.causality", "ssd.decay_monotonicity", "ssd.recurrent_linear_memory",
      // attention
      "attention.per_head_dim_even", "attention.recurrent_state_direct_sum", "attention.causality",
      "attention.softmax_rows_sum", "attention.permutation_sensitivity",
      // blocks
      "blocks.zero_projection_identity", "blocks.cached_matches_full", "blocks.ratio_structural",
      "blocks.activation_bound", "blocks.checkpoint_roundtrip",
      // lm
      "lm.config_invariants", "lm.warmup_fraction_range", "lm.task_ids_valid", "lm.causality",
      "lm.cache_prefix_consistency", "lm.untrained_loss_uniform", "lm.ablation_sa_unaffected",
      // cli
      "cli.metadata_reproducible", "cli.registry_coverage", "cli.bench_protocol"};
  return names;
}

std::vector<std::string> registry_coverage_gaps() {
  std::set<std::string> req(required_properties().begin(), required_properties().end());
  std::set<std::string> reg;
  for (const auto& p : property_registry()) reg.insert(p.name);
  std::vector<std::string> gaps;
  for (const auto& n : req) {
    if (!reg.count(n)) gaps.push_back("unregistered " + n);
  }
  for (const auto& n : reg) {
    if (!req.count(n)) gaps.push_back("unlisted " + n);
  }
  if (req.size() != required_properties().size()) gaps.push_back("duplicate required names");
  if (reg.size() != property_registry().size()) gaps.push_back("duplicate registered names");
  return gaps;
}

bool VerifyReport::all_passed() const {
  return std::all_of(outcomes.begin(), outcomes.end(), [](const VerifyOutcome& o) { return o.result.passed; });
}

VerifyReport run_verify(const VerifyOptions& options, const std::function<void(const VerifyOutcome&)>& on_outcome) {
  std::vector<const Property*> selected;
  const auto& reg = property_registry();
  if (!options.filter || options.filter->empty()) {
    for (const auto& p : reg) selected.push_back(&p);
  } else if (std::any_of(reg.begin(), reg.end(), [&](const Property& p) { return p.module == *options.filter; })) {
    for (const auto& p : reg) {
      if (p.module == *options.filter) selected.push_back(&p);
    }
  } else {
    std::regex re;
    try {
      re = std::regex(*options.filter);
    } catch (const std::regex_error& e) {
      throw ConfigError("verify: bad filter '" + *options.filter + "': " + e.what());
    }
    for (const auto& p : reg) {
      if (std::regex_search(p.name, re)) selected.push_back(&p);
    }
  }
  if (selected.empty()) throw ConfigError("verify: filter '" + options.filter.value_or("") + "' matches no property");

  const bool saved_fault = testing::rotation_fault();
  testing::set_rotation_fault(options.inject_rotation_fault);
  struct Restore {
    bool v;
    ~Restore() { testing::set_rotation_fault(v); }
  } restore{saved_fault};

  VerifyReport report;
  for (const Property* p : selected) {
    VerifyOutcome o;
    o.name = p->name;
    o.module = p->module;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o.result = p->run();
    } catch (const std::exception& e) {
      o.result.passed = false;
      o.result.detail = std::string("exception: ") + e.what();
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.outcomes.push_back(o);
    if (on_outcome) on_outcome(o);
  }
  return report;
}

}  // namespace transx
