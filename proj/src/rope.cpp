#include "transx/rope.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "transx/errors.hpp"

namespace transx {

namespace {

std::atomic<bool> g_rotation_fault{false};

// [c -s; s c] * (x0, x1), or its transpose.
inline void rotate_pair(double& x0, double& x1, double c, double s, bool transpose) {
  const double a = x0;
  const double b = x1;
  const double s_lower = g_rotation_fault.load(std::memory_order_relaxed) ? -s : s;
  if (!transpose) {
    x0 = a * c - b * s;
    x1 = a * s_lower + b * c;
  } else {
    x0 = a * c + b * s_lower;
    x1 = -a * s + b * c;
  }
}

void rotate_span(std::span<double> v, std::size_t m, const FrequencyTable& table, double scale,
                 bool transpose) {
  const std::size_t half = table.d() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    rotate_pair(v[2 * i], v[2 * i + 1], table.cos_at(m, i), table.sin_at(m, i), transpose);
  }
  if (scale != 1.0) {
    for (double& e : v) e *= scale;
  }
}

}  // namespace

namespace testing {
void set_rotation_fault(bool enabled) { g_rotation_fault.store(enabled); }
bool rotation_fault() { return g_rotation_fault.load(); }
}  // namespace testing

double FrequencyTable::cos_at(std::size_t m, std::size_t i) const {
  if (m < cached_) return (*cos_)[m * (d_ / 2) + i];
  return std::cos(static_cast<double>(m) * theta_[i]);
}

double FrequencyTable::sin_at(std::size_t m, std::size_t i) const {
  if (m < cached_) return (*sin_)[m * (d_ / 2) + i];
  return std::sin(static_cast<double>(m) * theta_[i]);
}

FrequencyTable FrequencyTable::with_capacity(std::size_t max_position) const {
  if (max_position <= cached_) return *this;
  return build_frequencies(d_, base_, max_position);
}

FrequencyTable build_frequencies(std::size_t d, double base, std::size_t max_position) {
  if (d < 2 || d % 2 != 0) throw DomainError("build_frequencies: d must be even and >= 2, got " + std::to_string(d));
  if (!(base > 1.0)) throw DomainError("build_frequencies: base must be > 1");
  FrequencyTable t;
  t.d_ = d;
  t.base_ = base;
  const std::size_t half = d / 2;
  t.theta_.resize(half);
  for (std::size_t i = 0; i < half; ++i) {
    t.theta_[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
  }
  auto cs = std::make_shared<std::vector<double>>(max_position * half);
  auto sn = std::make_shared<std::vector<double>>(max_position * half);
  for (std::size_t m = 0; m < max_position; ++m) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(m) * t.theta_[i];
      (*cs)[m * half + i] = std::cos(angle);
      (*sn)[m * half + i] = std::sin(angle);
    }
  }
  t.cached_ = max_position;
  t.cos_ = std::move(cs);
  t.sin_ = std::move(sn);
  return t;
}

void rotate_inplace(std::span<double> v, std::size_t m, const FrequencyTable& table, double scale) {
  if (v.size() != table.d()) {
    throw ShapeError("rotate: vector length " + std::to_string(v.size()) + " != d " + std::to_string(table.d()));
  }
  rotate_span(v, m, table, scale, false);
}

Tensor rotate(const Tensor& x, PositionIndex m, const FrequencyTable& table, Role /*role*/) {
  if (x.rank() == 0 || x.shape().back() != table.d()) {
    throw ShapeError("rotate: last dim of " + shape_string(x.shape()) + " != d " + std::to_string(table.d()));
  }
  Tensor out = x;
  auto data = out.data();
  for (std::size_t off = 0; off < data.size(); off += table.d()) {
    rotate_span(data.subspan(off, table.d()), m.m, table, m.scale, false);
  }
  finalize(out, "rotate");
  return out;
}

double relative_score(const Tensor& q, PositionIndex m, const Tensor& k, PositionIndex n,
                      const FrequencyTable& table) {
  if (q.numel() != table.d() || k.numel() != table.d()) throw ShapeError("relative_score: vectors must have length d");
  const Tensor rq = rotate(q, m, table, Role::query);
  const Tensor rk = rotate(k, n, table, Role::key);
  return dot(rq.data(), rk.data());
}

double log_position_scale(std::size_t m, std::size_t base) {
  if (base < 2) throw DomainError("log_position_scale: base must be >= 2");
  const double r = std::log(static_cast<double>(m) + 1.0) / std::log(static_cast<double>(base));
  return std::max(1.0, r);
}

Var rotate_rows(const Var& x, const FrequencyTable& table, const RowPositions& positions) {
  auto px = x.value_ptr();
  const std::size_t d = table.d();
  if (px->rank() != 2 || px->cols() % d != 0) {
    throw ShapeError("rotate_rows: columns of " + shape_string(px->shape()) + " not a multiple of d");
  }
  if (positions.seq_len == 0 || px->rows() % positions.seq_len != 0) {
    throw ShapeError("rotate_rows: rows not a multiple of seq_len");
  }
  const std::size_t rows = px->rows();
  const std::size_t heads = px->cols() / d;
  auto pos = positions;
  auto tbl = std::make_shared<const FrequencyTable>(table);
  auto apply = [tbl, pos, rows, heads, d](Tensor& t, bool transpose) {
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t m = pos.offset + r % pos.seq_len;
      const double s = pos.log_scale_base ? log_position_scale(m, *pos.log_scale_base) : 1.0;
      auto row = t.row(r);
      for (std::size_t h = 0; h < heads; ++h) rotate_span(row.subspan(h * d, d), m, *tbl, s, transpose);
    }
  };
  Tensor out = *px;
  apply(out, false);
  finalize(out, "rotate_rows");
  return Tape::record(std::move(out), {x}, [apply](const Tensor& g, GradSink& sink) {
    Tensor d = g;
    apply(d, true);
    sink.add(0, std::move(d));
  });
}

}  // namespace transx
