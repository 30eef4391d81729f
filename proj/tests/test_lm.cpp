#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numeric>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

using namespace transx;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_modules = 2;
  c.n_heads = 2;
  c.d_state = 8;
  c.chunk_len = 4;
  c.max_position = 64;
  return c;
}

double naive_cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
  double total = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!mask[r]) continue;
    long double z = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(static_cast<long double>(logits(r, c)));
    total += static_cast<double>(std::log(z)) - logits(r, static_cast<std::size_t>(targets[r]));
    ++n;
  }
  return total / n;
}

}  // namespace

TEST_SUITE("lm") {
  TEST_CASE("byte tokenizer") {
    CHECK(tokenize_bytes("A") == std::vector<int>{65});
    CHECK(tokenize_bytes("").empty());
    std::string all;
    for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
    CHECK(detokenize(tokenize_bytes(all)) == all);
    const std::vector<int> specials{kBosToken, kSepToken, kQueryToken};
    CHECK(detokenize(specials) == "<bos><sep><query>");
  }

  TEST_CASE("logits have one row per token") {
    const Model m = Model::initialize(tiny(), 1);
    const std::vector<int> ids{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const Tensor l = model_logits(m, ids, 2);
    CHECK(l.shape() == Shape{10, kByteVocabSize});
  }

  TEST_CASE("editing a token leaves earlier logits unchanged") {
    const Model m = Model::initialize(tiny(), 2);
    std::vector<int> ids{5, 17, 200, 3, 99, 42, 7};
    const Tensor a = model_logits(m, ids);
    ids[4] = 100;
    const Tensor b = model_logits(m, ids);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) REQUIRE(a(r, c) == b(r, c));
    CHECK(max_abs_diff(a, b) > 0.0);
  }

  TEST_CASE("two-token gradient on the micro model") {
    ModelConfig cfg = ModelConfig::micro();
    cfg.init_std = 0.3;
    cfg.decay_bias_init = 0.5;
    cfg.max_position = 16;
    const Model m = Model::initialize(cfg, 3);
    const std::vector<int> ids{kBosToken, 'x'}, targets{'x', 'y'};
    const std::vector<std::uint8_t> mask{1, 1};
    std::vector<Tensor> params;
    for (const auto& [name, p] : m.named_parameters()) params.push_back(*p);
    auto f = [&](std::span<const Var> leaves) {
      ModelWeights<Var> w = bind_constants(m.weights());
      std::size_t i = 0;
      ModelWeights<Var>::visit(w, [&](const std::string&, Var& v) { v = leaves[i++]; });
      return ad::cross_entropy(model_forward(m, w, ids, {1, 2, 0}), targets, mask);
    };
    GradCheckOptions o;
    o.max_coords = 4;
    CHECK(grad_check(f, params, o).max_rel_error() < 1e-4);
  }

  TEST_CASE("cross entropy") {
    const std::vector<int> t{3, 0};
    const std::vector<std::uint8_t> m{1, 1};
    CHECK(cross_entropy(Tensor({2, 7}), t, m) == doctest::Approx(std::log(7.0)).epsilon(1e-15));
    Tensor huge({2, 7});
    huge(0, 3) = 1e4;
    huge(1, 0) = 1e4;
    CHECK(cross_entropy(huge, t, m) < 1e-12);
    Rng rng(4);
    const Tensor l = rng.normal_tensor({5, 11}, 4.0);
    const std::vector<int> tt{1, 10, 4, 4, 0};
    const std::vector<std::uint8_t> mm{1, 0, 1, 1, 1};
    CHECK(std::abs(cross_entropy(l, tt, mm) - naive_cross_entropy(l, tt, mm)) < 1e-10);
    const double acc = masked_accuracy(huge, t, m);
    CHECK(acc == 1.0);
  }

  TEST_CASE("learning rate schedule") {
    TrainConfig c;
    c.steps = 1000;
    c.lr = 2e-3;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(100, c) == doctest::Approx(2e-3).epsilon(1e-12));
    CHECK(lr_at(999, c) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lr_at(50, c) == doctest::Approx(1e-3).epsilon(1e-12));
    // Halfway through the decay the cosine is at its midpoint.
    CHECK(lr_at(100 + 899 / 2, c) == doctest::Approx(1.1e-3).epsilon(2e-3));
  }

  TEST_CASE("zero learning rate and decay leave parameters unchanged") {
    Model m = Model::initialize(tiny(), 5);
    const Model before = m;
    TrainConfig c;
    c.lr = 0.0;
    c.weight_decay = 0.0;
    c.steps = 3;
    c.batch_size = 2;
    train(m, TaskSpec::parse("copy", 8), c);
    const auto a = before.named_parameters();
    const auto b = m.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  }

  TEST_CASE("weight decay touches matrices only") {
    Tensor w = Tensor::matrix({{1.0, -2.0}}), g = Tensor::vector({3.0});
    std::vector<Tensor*> params{&w, &g};
    TrainConfig c;
    c.weight_decay = 0.5;
    AdamW opt(c, params);
    const std::vector<Tensor> grads{Tensor({1, 2}), Tensor({1})};
    opt.step(params, grads, 0.1);
    CHECK(w(0, 0) == doctest::Approx(1.0 * (1 - 0.1 * 0.5)));
    CHECK(g[0] == 3.0);
  }

  TEST_CASE("gradient clipping") {
    std::vector<Tensor> g{Tensor::vector({3.0}), Tensor::vector({4.0})};
    CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g[0][0] == doctest::Approx(0.6));
    CHECK(g[1][0] == doctest::Approx(0.8));
  }

  TEST_CASE("copy loss falls over the first 200 steps") {
    int falling = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      Model m = Model::initialize(ModelConfig::micro(), seed);
      TrainConfig c;
      c.steps = 200;
      c.batch_size = 8;
      c.seed = seed;
      const TrainResult r = train(m, TaskSpec::parse("copy", 32), c);
      REQUIRE(r.steps.size() == 200);
      double head = 0.0, tail = 0.0;
      for (std::size_t i = 0; i < 20; ++i) {
        head += r.steps[i].loss;
        tail += r.steps[180 + i].loss;
      }
      MESSAGE("seed " << seed << ": mean loss " << head / 20 << " -> " << tail / 20);
      falling += tail < head;
    }
    CHECK(falling >= 2);
  }

  TEST_CASE("generation") {
    const Model m = Model::initialize(tiny(), 6);
    const std::vector<int> prompt = tokenize_bytes("hi");
    GenerateOptions o;
    CHECK(generate(m, prompt, o) == prompt);
    o.n_new = 6;
    const auto a = generate(m, prompt, o);
    CHECK(a == generate(m, prompt, o));
    CHECK(a.size() == 8);

    std::vector<int> seq = prompt;
    std::size_t ss = 0;
    std::vector<std::size_t> sa;
    o.on_token = [&](const GenerateTrace& t) {
      const Tensor full = model_logits(m, seq);
      for (std::size_t c = 0; c < full.cols(); ++c) REQUIRE(std::abs((*t.logits)(0, c) - full(full.rows() - 1, c)) < 1e-9);
      if (t.step == 0) ss = t.ss_cache_bytes;
      CHECK(t.ss_cache_bytes == ss);
      sa.push_back(t.sa_cache_bytes);
      seq.push_back(t.token);
    };
    generate(m, prompt, o);
    for (std::size_t i = 1; i < sa.size(); ++i) CHECK(sa[i] - sa[i - 1] == sa[1] - sa[0]);
    CHECK(sa[1] > sa[0]);

    o.temperature = 1.0;
    o.seed = 9;
    o.on_token = nullptr;
    CHECK(generate(m, prompt, o) == generate(m, prompt, o));
    CHECK_THROWS_AS(generate(m, std::vector<int>{}, o), DomainError);
  }

  TEST_CASE("copy task construction") {
    const std::vector<int> payload{'a', 'b'};
    const TaskInstance t = copy_task_from_payload(payload);
    CHECK(t.sequence() == std::vector<int>{'a', 'b', kSepToken, 'a', 'b'});
    CHECK(t.inputs == std::vector<int>{'a', 'b', kSepToken, 'a'});
    CHECK(t.mask == std::vector<std::uint8_t>{0, 0, 1, 1});
    Rng rng(7);
    const TaskInstance c = make_copy_task(rng, 32, 16);
    CHECK(c.length() == 32);
    CHECK(std::accumulate(c.mask.begin(), c.mask.end(), 0) == 16);
  }

  TEST_CASE("needle tasks are reproducible") {
    Rng a(11), b(11);
    for (int i = 0; i < 5; ++i) {
      const TaskInstance x = make_needle_task(a, 64, 4), y = make_needle_task(b, 64, 4);
      CHECK(x.inputs == y.inputs);
      CHECK(x.targets == y.targets);
      const auto seq = x.sequence();
      const std::size_t k = *x.key_position;
      CHECK(seq[k] == kSepToken);
      CHECK(seq[seq.size() - 5] == kQueryToken);
      for (std::size_t j = 0; j < 4; ++j) CHECK(seq[k + 1 + j] == seq[seq.size() - 4 + j]);
    }
  }

  TEST_CASE("needle depth is uniform") {
    // T=256, needle 4: key positions 0..247, eight bins of 31.
    Rng rng(12);
    const int n = 10000, bins = 8;
    std::vector<int> hist(bins, 0);
    for (int i = 0; i < n; ++i) ++hist[*make_needle_task(rng, 256, 4).key_position / 31];
    const double p = 1.0 / bins, mean = n * p, sd = std::sqrt(n * p * (1 - p));
    for (int h : hist) CHECK(std::abs(h - mean) <= 3 * sd);
  }

  TEST_CASE("training is reproducible") {
    auto run = [] {
      Model m = Model::initialize(tiny(), 8);
      TrainConfig c;
      c.steps = 4;
      c.batch_size = 2;
      c.eval_every = 2;
      const TrainResult r = train(m, TaskSpec::parse("needle", 24), c);
      std::vector<double> out;
      for (const auto& s : r.steps) out.insert(out.end(), {s.loss, s.grad_norm, s.lr});
      for (const auto& e : r.evals) out.insert(out.end(), {e.loss, e.accuracy});
      return out;
    };
    CHECK(run() == run());
  }

  TEST_CASE("checkpoint round trip") {
    const Model m = Model::initialize(tiny(), 9);
    const auto path = std::filesystem::temp_directory_path() / "transx_test_lm.ckpt";
    save_checkpoint(path, m, {{"step", 12}});
    nlohmann::json extra;
    const Model back = load_checkpoint(path, &extra);
    CHECK(extra["step"] == 12);
    const auto a = m.named_parameters(), b = back.named_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
    {
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      f << "garbage";
    }
    CHECK_THROWS(load_checkpoint(path));
    std::filesystem::remove(path);
  }
}
