#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "transx/errors.hpp"
#include "transx/rng.hpp"
#include "transx/rope.hpp"

using namespace transx;

namespace {

// Literal block-diagonal rotation matrix, applied as R x.
std::vector<double> explicit_rotation(const std::vector<double>& x, std::size_t m, double base) {
  const std::size_t d = x.size();
  std::vector<std::vector<double>> R(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double th = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double c = std::cos(static_cast<double>(m) * th), s = std::sin(static_cast<double>(m) * th);
    R[2 * i][2 * i] = c;
    R[2 * i][2 * i + 1] = -s;
    R[2 * i + 1][2 * i] = s;
    R[2 * i + 1][2 * i + 1] = c;
  }
  std::vector<double> y(d, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) y[r] += R[r][c] * x[c];
  return y;
}

Tensor to_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

}  // namespace

TEST_SUITE("rope") {
  TEST_CASE("frequency tables") {
    const FrequencyTable f2 = build_frequencies(2), f4 = build_frequencies(4), f8 = build_frequencies(8);
    CHECK(f2.theta()[0] == 1.0);
    const auto t4 = f4.theta();
    CHECK(t4[0] == 1.0);
    CHECK(t4[1] == doctest::Approx(0.01).epsilon(1e-14));
    const auto t8 = f8.theta();
    REQUIRE(t8.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(t8[i] == doctest::Approx(std::pow(10000.0, -static_cast<double>(i) / 4.0)).epsilon(1e-14));
    }
  }

  TEST_CASE("invalid tables") {
    CHECK_THROWS_AS(build_frequencies(3), DomainError);
    CHECK_THROWS_AS(build_frequencies(0), DomainError);
    CHECK_THROWS_AS(build_frequencies(4, 1.0), DomainError);
  }

  TEST_CASE("position zero is the identity") {
    const Tensor x = Rng(1).normal_tensor({2, 8});
    CHECK(rotate(x, {0}, build_frequencies(8)) == x);
  }

  TEST_CASE("quarter turn of a unit vector") {
    // d=2, theta=1, so position m rotates by m radians; pi/2 is not an integer,
    // so check the same identity through cos/sin of one step.
    const FrequencyTable t = build_frequencies(2);
    const Tensor y = rotate(Tensor::vector({1.0, 0.0}), {1}, t);
    CHECK(y[0] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
    const Tensor q = rotate(Tensor::vector({1.0, 0.0}), {1, std::numbers::pi / 2}, t);
    CHECK(std::abs(q[0] - std::numbers::pi / 2 * std::cos(1.0)) < 1e-15);
  }

  TEST_CASE("matches the literal block-diagonal matrix") {
    Rng rng(2);
    for (std::size_t d : {4, 8, 16}) {
      const FrequencyTable t = build_frequencies(d, 10000.0, 32);
      for (std::size_t m : {1, 7, 31, 500}) {
        std::vector<double> x(d);
        for (double& v : x) v = rng.normal();
        CHECK(max_abs_diff(rotate(to_tensor(x), {m}, t), to_tensor(explicit_rotation(x, m, 10000.0))) < 1e-12);
      }
    }
  }

  TEST_CASE("cached and uncached positions agree") {
    const FrequencyTable small = build_frequencies(8, 10000.0, 4);
    const FrequencyTable big = small.with_capacity(64);
    const Tensor x = Rng(3).normal_tensor({8});
    CHECK(max_abs_diff(rotate(x, {40}, small), rotate(x, {40}, big)) < 1e-14);
  }

  TEST_CASE("relative scores") {
    Rng rng(4);
    const FrequencyTable t = build_frequencies(8, 10000.0, 256);
    const Tensor q = rng.normal_tensor({8}), k = rng.normal_tensor({8});
    CHECK(relative_score(q, {9}, k, {9}, t) == doctest::Approx(dot(q.data(), k.data())).epsilon(1e-12));
    for (std::size_t s : {1, 5, 100}) {
      CHECK(std::abs(relative_score(q, {12}, k, {3}, t) - relative_score(q, {12 + s}, k, {3 + s}, t)) < 1e-10);
    }
    const FrequencyTable t2 = build_frequencies(2);
    const double sc = relative_score(Tensor::vector({1, 0}), {5}, Tensor::vector({1, 0}), {4}, t2);
    CHECK(sc == doctest::Approx(0.5403023058681398).epsilon(1e-14));
  }

  TEST_CASE("log position scaling") {
    CHECK(log_position_scale(0, 512) == 1.0);
    CHECK(log_position_scale(510, 512) == 1.0);
    CHECK(log_position_scale(511, 512) == 1.0);
    CHECK(log_position_scale(512 * 512 - 1, 512) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(log_position_scale(99, 10) == doctest::Approx(2.0).epsilon(1e-14));
  }

  TEST_CASE("rotate_rows applies each row's position to every head") {
    Rng rng(5);
    const FrequencyTable t = build_frequencies(4, 10000.0, 16);
    const Tensor x = rng.normal_tensor({6, 8});  // 2 sequences of 3 tokens, 2 heads
    const Tensor y = rotate_rows(Var(x), t, RowPositions{3, 5, std::nullopt}).value();
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t h = 0; h < 2; ++h) {
        const Tensor piece({4}, std::vector<double>(x.row(r).begin() + 4 * h, x.row(r).begin() + 4 * h + 4));
        const Tensor ref = rotate(piece, {5 + r % 3}, t);
        for (std::size_t c = 0; c < 4; ++c) CHECK(y(r, 4 * h + c) == doctest::Approx(ref[c]).epsilon(1e-15));
      }
    }
  }

  TEST_CASE("injected fault breaks orthogonality") {
    const Tensor x = Tensor::vector({1.0, 2.0, -0.5, 0.25});
    const FrequencyTable t = build_frequencies(4);
    testing::set_rotation_fault(true);
    const Tensor y = rotate(x, {3}, t);
    testing::set_rotation_fault(false);
    CHECK(std::abs(norm2(y.data()) - norm2(x.data())) > 1e-3);
  }
}
