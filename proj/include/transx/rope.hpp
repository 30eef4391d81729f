#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "transx/autodiff.hpp"
#include "transx/tensor.hpp"

namespace transx {

/// Token position, optionally carrying a multiplicative factor from
/// log-position scaling.
struct PositionIndex {
  std::size_t m = 0;
  double scale = 1.0;
};

/// Which projection a vector came from. All four share one rotation path;
/// the tag exists so callers state intent.
enum class Role { query, key, c, b };

/// Rotary angles theta_i = base^(-2i/d), i in [0, d/2), with cos/sin caches
/// for positions below `cached_positions()`. Immutable; positions past the
/// cache are evaluated directly with the same formula.
class FrequencyTable {
 public:
  std::size_t d() const { return d_; }
  double base() const { return base_; }
  std::span<const double> theta() const { return theta_; }
  std::size_t cached_positions() const { return cached_; }

  double cos_at(std::size_t m, std::size_t i) const;
  double sin_at(std::size_t m, std::size_t i) const;

  /// A table with caches covering at least `max_position` positions.
  FrequencyTable with_capacity(std::size_t max_position) const;

 private:
  friend FrequencyTable build_frequencies(std::size_t d, double base, std::size_t max_position);
  std::size_t d_ = 0;
  double base_ = 0.0;
  std::vector<double> theta_;
  std::size_t cached_ = 0;
  std::shared_ptr<const std::vector<double>> cos_;
  std::shared_ptr<const std::vector<double>> sin_;
};

FrequencyTable build_frequencies(std::size_t d, double base = 10000.0, std::size_t max_position = 0);

/// Rotates each consecutive pair (x_2i, x_2i+1) of every length-d vector in x
/// by m * theta_i, then multiplies by m.scale.
Tensor rotate(const Tensor& x, PositionIndex m, const FrequencyTable& table, Role role = Role::query);

/// In-place rotation of a single length-d vector.
void rotate_inplace(std::span<double> v, std::size_t m, const FrequencyTable& table, double scale = 1.0);

/// <rotate(q, m), rotate(k, n)>
double relative_score(const Tensor& q, PositionIndex m, const Tensor& k, PositionIndex n,
                      const FrequencyTable& table);

/// max(1, log(m + 1) / log(base)).
double log_position_scale(std::size_t m, std::size_t base);

/// Position layout for rows of a [batch*seq_len x heads*d] activation: row r
/// sits at position offset + r % seq_len.
struct RowPositions {
  std::size_t seq_len = 0;
  std::size_t offset = 0;
  std::optional<std::size_t> log_scale_base;
};

/// Differentiable rotation of every d-wide head slice in every row.
Var rotate_rows(const Var& x, const FrequencyTable& table, const RowPositions& positions);

namespace testing {
/// Mutation hook for the verification suite: flips the sign of the sine in
/// the second row of every 2x2 block, which breaks orthogonality.
void set_rotation_fault(bool enabled);
bool rotation_fault();
}  // namespace testing

}  // namespace transx
