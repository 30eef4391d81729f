#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "transx/attention.hpp"
#include "transx/errors.hpp"
#include "transx/rng.hpp"
#include "transx/ssd.hpp"

using namespace transx;

namespace {

SSDInputs random_inputs(Rng& rng, std::size_t T, std::size_t N, std::size_t P, bool unit_decay) {
  SSDInputs in;
  in.a = unit_decay ? Tensor({T}, 1.0) : rng.uniform_tensor({T}, 0.5, 1.0);
  in.B = rng.normal_tensor({T, N}, 0.5);
  in.C = rng.normal_tensor({T, N}, 0.5);
  in.X = rng.normal_tensor({T, P});
  return in;
}

// y_t = sum_{s<=t} (prod_{k=s+1..t} a_k) <C_t, B_s> x_s, evaluated term by term.
Tensor direct_sum(const SSDInputs& in) {
  const std::size_t T = in.length(), N = in.state_dim(), P = in.channels();
  Tensor y({T, P});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s <= t; ++s) {
      double decay = 1.0;
      for (std::size_t k = s + 1; k <= t; ++k) decay *= in.a[k];
      double cb = 0.0;
      for (std::size_t n = 0; n < N; ++n) cb += in.C(t, n) * in.B(s, n);
      for (std::size_t p = 0; p < P; ++p) y(t, p) += decay * cb * in.X(s, p);
    }
  return y;
}

}  // namespace

TEST_SUITE("ssd") {
  TEST_CASE("decay mask") {
    CHECK(decay_mask(Tensor::vector({1, 1, 1})) == Tensor::matrix({{1, 0, 0}, {1, 1, 0}, {1, 1, 1}}));
    CHECK(decay_mask(Tensor::vector({1, 0.5, 0.5})) == Tensor::matrix({{1, 0, 0}, {0.5, 1, 0}, {0.25, 0.5, 1}}));
    CHECK_THROWS_AS(decay_mask(Tensor::vector({1, 0, 0.5})), DomainError);
  }

  TEST_CASE("input validation") {
    Rng rng(1);
    SSDInputs in = random_inputs(rng, 3, 2, 2, false);
    in.a[1] = 1.5;
    CHECK_THROWS_AS(in.validate(), DomainError);
    const FrequencyTable t = build_frequencies(2);
    CHECK_THROWS_AS(ssd_recurrent(in, t, false), DomainError);
    SSDInputs bad = random_inputs(rng, 3, 2, 2, false);
    bad.X = Tensor({2, 2});
    CHECK_THROWS_AS(bad.validate(), ShapeError);
  }

  TEST_CASE("single token") {
    Rng rng(2);
    const SSDInputs in = random_inputs(rng, 1, 4, 3, false);
    const double cb = dot(in.C.row(0), in.B.row(0));
    const Tensor y = ssd_recurrent(in, build_frequencies(4), true);
    for (std::size_t p = 0; p < 3; ++p) CHECK(y(0, p) == doctest::Approx(cb * in.X(0, p)).epsilon(1e-14));
  }

  TEST_CASE("unit decay with scalar ones is a prefix sum") {
    const std::size_t T = 6;
    SSDInputs in{Tensor({T}, 1.0), Tensor({T, 1}, 1.0), Tensor({T, 1}, 1.0), Rng(3).normal_tensor({T, 2})};
    const Tensor y = ssd_recurrent(in, build_frequencies(2), false);
    double run0 = 0.0, run1 = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      run0 += in.X(t, 0);
      run1 += in.X(t, 1);
      CHECK(y(t, 0) == doctest::Approx(run0).epsilon(1e-14));
      CHECK(y(t, 1) == doctest::Approx(run1).epsilon(1e-14));
    }
  }

  TEST_CASE("two-token hand instance") {
    SSDInputs in{Tensor::vector({1, 0.5}), Tensor::matrix({{1}, {1}}), Tensor::matrix({{1}, {1}}),
                 Tensor::matrix({{2}, {3}})};
    const Tensor y = ssd_matrix(in, build_frequencies(2), false);
    CHECK(y(0, 0) == 2.0);
    CHECK(y(1, 0) == 4.0);
  }

  TEST_CASE("forms agree with the direct sum") {
    Rng rng(4);
    const FrequencyTable t = build_frequencies(4, 10000.0, 64);
    for (int k = 0; k < 10; ++k) {
      const SSDInputs in = random_inputs(rng, 1 + rng.below(20), 4, 3, k % 2 == 0);
      const Tensor ref = direct_sum(in);
      CHECK(max_abs_diff(ssd_recurrent(in, t, false), ref) < 1e-10);
      CHECK(max_abs_diff(ssd_matrix(in, t, false), ref) < 1e-10);
      CHECK(max_abs_diff(ssd_chunked(in, t, false, 3), ref) < 1e-10);
    }
  }

  TEST_CASE("recurrent equals matrix on 16 tokens") {
    Rng rng(5);
    const FrequencyTable t = build_frequencies(4, 10000.0, 16);
    const SSDInputs in = random_inputs(rng, 16, 4, 4, false);
    CHECK(max_abs_diff(ssd_recurrent(in, t, true), ssd_matrix(in, t, true)) < 1e-10);
  }

  TEST_CASE("chunk extremes") {
    Rng rng(6);
    const FrequencyTable t = build_frequencies(4, 10000.0, 64);
    const SSDInputs in = random_inputs(rng, 40, 4, 3, false);
    CHECK(max_abs_diff(ssd_chunked(in, t, true, 64), ssd_matrix(in, t, true)) < 1e-10);
    CHECK(max_abs_diff(ssd_chunked(in, t, true, 1), ssd_recurrent(in, t, true)) < 1e-10);
    CHECK_THROWS_AS(ssd_chunked(in, t, true, 0), DomainError);
  }

  TEST_CASE("long chunked scan") {
    Rng rng(7);
    const FrequencyTable t = build_frequencies(8, 10000.0, 256);
    const SSDInputs in = random_inputs(rng, 256, 8, 4, false);
    CHECK(max_abs_diff(ssd_chunked(in, t, true, 64), ssd_recurrent(in, t, true)) < 1e-9);
  }

  TEST_CASE("rotary scores") {
    Rng rng(8);
    const std::size_t T = 8, N = 4;
    const FrequencyTable t = build_frequencies(N, 10000.0, T);
    const Tensor C = rng.normal_tensor({T, N}), B = rng.normal_tensor({T, N});
    const Tensor S = ssd_rope_scores(C, B, t);
    for (std::size_t m = 0; m < T; ++m) {
      CHECK(S(m, m) == doctest::Approx(dot(C.row(m), B.row(m))).epsilon(1e-12));
      for (std::size_t n = 0; n < T; ++n) {
        // (R_m c)^T (R_n b) = c^T R_{n-m} b, with the rotation built entry by entry.
        double ref = 0.0;
        for (std::size_t i = 0; i < N / 2; ++i) {
          const double ang = (static_cast<double>(n) - static_cast<double>(m)) * t.theta()[i];
          const double c0 = C(m, 2 * i), c1 = C(m, 2 * i + 1), b0 = B(n, 2 * i), b1 = B(n, 2 * i + 1);
          ref += c0 * (std::cos(ang) * b0 - std::sin(ang) * b1) + c1 * (std::sin(ang) * b0 + std::cos(ang) * b1);
        }
        CHECK(std::abs(S(m, n) - ref) < 1e-10);
      }
    }
    // Constant rows give a Toeplitz score matrix.
    Tensor Cc({T, N}), Bc({T, N});
    const Tensor c = rng.normal_tensor({N}), b = rng.normal_tensor({N});
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t i = 0; i < N; ++i) {
        Cc(r, i) = c[i];
        Bc(r, i) = b[i];
      }
    const Tensor St = ssd_rope_scores(Cc, Bc, t);
    for (std::size_t m = 1; m < T; ++m)
      for (std::size_t n = 1; n < T; ++n) CHECK(std::abs(St(m, n) - St(m - 1, n - 1)) < 1e-12);
  }

  TEST_CASE("matrix form equals unnormalised masked attention") {
    Rng rng(9);
    const FrequencyTable t = build_frequencies(4, 10000.0, 32);
    for (bool rope : {false, true}) {
      const SSDInputs in = random_inputs(rng, 12, 4, 3, true);
      const Tensor att = causal_attention(AttentionInputs{in.C, in.B, in.X, 1}, t, Normalize::none, rope);
      CHECK(max_abs_diff(ssd_matrix(in, t, rope), att) < 1e-10);
    }
  }

  TEST_CASE("step matches the recurrent form") {
    Rng rng(10);
    const FrequencyTable t = build_frequencies(4, 10000.0, 16);
    const SSDInputs in = random_inputs(rng, 9, 4, 2, false);
    const Tensor ref = ssd_recurrent(in, t, true);
    SsdState st = SsdState::zeros(4, 2);
    for (std::size_t i = 0; i < 9; ++i) {
      double y[2];
      ssd_step(st, in.a[i], in.B.row(i), in.C.row(i), in.X.row(i), y, &t);
      CHECK(std::abs(y[0] - ref(i, 0)) < 1e-12);
      CHECK(std::abs(y[1] - ref(i, 1)) < 1e-12);
    }
    CHECK(st.position == 9);
    CHECK(st.bytes() == 4 * 2 * sizeof(double));
  }

  TEST_CASE("recurrent form allocates no T x T tensor") {
    Rng rng(11);
    const SSDInputs in = random_inputs(rng, 300, 4, 2, false);
    const FrequencyTable t = build_frequencies(4, 10000.0, 300);
    AllocationProbe probe;
    ssd_recurrent(in, t, true);
    CHECK(probe.largest_numel() < 300 * 300);
  }

  TEST_CASE("matrix form refuses very long inputs") {
    SSDInputs in{Tensor({kMaxMatrixLength + 1}, 1.0), Tensor({kMaxMatrixLength + 1, 2}),
                 Tensor({kMaxMatrixLength + 1, 2}), Tensor({kMaxMatrixLength + 1, 1})};
    CHECK_THROWS_AS(ssd_matrix(in, build_frequencies(2), false), DomainError);
  }
}
