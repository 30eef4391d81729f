#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "transx/errors.hpp"
#include "transx/rng.hpp"
#include "transx/tensor.hpp"

using namespace transx;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul by identity and projector") {
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor::identity(2), m) == m);
    const Tensor p = Tensor::matrix({{1, 0}, {0, 0}});
    CHECK(matmul(p, Tensor::matrix({{5, 6}, {7, 8}})) == Tensor::matrix({{5, 6}, {0, 0}}));
  }

  TEST_CASE("matmul matches a triple loop") {
    Rng rng(3);
    for (int k = 0; k < 5; ++k) {
      const Tensor a = rng.normal_tensor({3, 4});
      const Tensor b = rng.normal_tensor({4, 2});
      CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
      CHECK(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)) < 1e-12);
      CHECK(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)) < 1e-12);
    }
  }

  TEST_CASE("matmul rejects mismatched inner dims") {
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  }

  TEST_CASE("construction checks data length") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK(Tensor({2, 3, 4}).numel() == 24);
  }

  TEST_CASE("softmax of zeros is uniform") {
    const Tensor p = softmax_rows(Tensor({1, 3}));
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("softmax is invariant to an additive shift") {
    const Tensor x = Tensor::matrix({{0.3, -1.2, 2.0}});
    const Tensor y = Tensor::matrix({{100.3, 98.8, 102.0}});
    CHECK(max_abs_diff(softmax_rows(x), softmax_rows(y)) < 1e-12);
  }

  TEST_CASE("masked softmax renormalises over kept entries") {
    const Tensor p = softmax_rows(Tensor::matrix({{1, 2, 3}}), Tensor::matrix({{1, 1, 0}}));
    const double z = std::exp(1.0) + std::exp(2.0);
    CHECK(p(0, 0) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
    CHECK(p(0, 1) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
    CHECK(p(0, 2) == 0.0);
  }

  TEST_CASE("softmax survives huge logits") {
    const Tensor p = softmax_rows(Tensor::matrix({{1000.0, 0.0}}));
    CHECK(p(0, 0) == 1.0);
    CHECK(p(0, 1) == 0.0);
  }

  TEST_CASE("overflow and NaN raise") {
    CHECK_THROWS_AS(scale(Tensor::vector({1e300}), 1e300), NonFiniteError);
    CHECK_THROWS_AS(add(Tensor::vector({NAN}), Tensor::vector({1.0})), NonFiniteError);
  }

  TEST_CASE("fp32 mode rounds results") {
    set_precision(Precision::fp32);
    const Tensor y = scale(Tensor::vector({1.0 / 3.0}), 1.0);
    set_precision(Precision::fp64);
    CHECK(y[0] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
    CHECK(precision() == Precision::fp64);
  }

  TEST_CASE("allocation probe records the largest tensor") {
    AllocationProbe probe;
    Tensor a({3, 5});
    Tensor b({7});
    CHECK(probe.largest_numel() == 15);
  }
}

TEST_SUITE("rng") {
  TEST_CASE("same seed gives the same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  }

  TEST_CASE("forks are independent of draw order") {
    Rng a(7);
    a.next_u64();
    Rng b(7);
    CHECK(a.fork(3).next_u64() == b.fork(3).next_u64());
    CHECK(b.fork(3).next_u64() != b.fork(4).next_u64());
  }

  TEST_CASE("below stays in range and hits every value") {
    Rng r(1);
    std::vector<int> seen(6, 0);
    for (int i = 0; i < 6000; ++i) {
      const auto v = r.below(6);
      REQUIRE(v < 6);
      ++seen[v];
    }
    for (int c : seen) CHECK(c > 800);
  }

  TEST_CASE("normal draws have unit variance") {
    Rng r(5);
    double s = 0.0, s2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double v = r.normal();
      s += v;
      s2 += v * v;
    }
    CHECK(std::abs(s / n) < 0.03);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
  }
}
