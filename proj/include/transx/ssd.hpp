#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "transx/autodiff.hpp"
#include "transx/rope.hpp"
#include "transx/tensor.hpp"

namespace transx {

/// Scalar-decay state space inputs for one head.
///   a: [T] decays in (0, 1]
///   B, C: [T x N]
///   X: [T x P]
struct SSDInputs {
  Tensor a;
  Tensor B;
  Tensor C;
  Tensor X;

  std::size_t length() const { return a.numel(); }
  std::size_t state_dim() const { return B.cols(); }
  std::size_t channels() const { return X.cols(); }
  void validate() const;
};

/// Lower-triangular L with L[j][i] = a_j * ... * a_{i+1}, unit diagonal.
Tensor decay_mask(const Tensor& a);

/// Recurrent state h in R^{N x P} and the position of the next token.
struct SsdState {
  Tensor h;
  std::size_t position = 0;

  static SsdState zeros(std::size_t state_dim, std::size_t channels);
  std::size_t bytes() const { return h.numel() * sizeof(double); }
};

/// One step: h = a h + b~^T x, y = c~ h, with b~, c~ rotated to state.position
/// when `table` is non-null. Advances the position.
void ssd_step(SsdState& state, double a, std::span<const double> b, std::span<const double> c,
              std::span<const double> x, std::span<double> y, const FrequencyTable* table,
              double c_scale = 1.0);

/// Linear-time recurrence; O(N*P) state, no T x T intermediates.
Tensor ssd_recurrent(const SSDInputs& inp, const FrequencyTable& table, bool use_rope);

/// Y = (L o S) X with S the (optionally rotated) C B^T scores. Quadratic;
/// limited to T <= kMaxMatrixLength.
Tensor ssd_matrix(const SSDInputs& inp, const FrequencyTable& table, bool use_rope);
inline constexpr std::size_t kMaxMatrixLength = 4096;

/// Block form: matrix form inside each chunk, recurrent state carried
/// between chunks.
Tensor ssd_chunked(const SSDInputs& inp, const FrequencyTable& table, bool use_rope, std::size_t chunk_len);

/// S[m][n] = <rotate(C_m, m), rotate(B_n, n)> for all pairs.
Tensor ssd_rope_scores(const Tensor& C, const Tensor& B, const FrequencyTable& table);

/// Layout of the multi-head activations consumed by ssd_heads:
///   a: [batch*seq_len x heads]
///   B, C: [batch*seq_len x heads*state_dim]
///   X, Y: [batch*seq_len x heads*head_dim]
struct SsdHeadLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
  std::size_t state_dim = 0;
  std::size_t head_dim = 0;
  std::size_t chunk_len = 64;
};

/// Differentiable chunked scan over every (sequence, head). B and C must
/// already be rotated; the scan itself is position-free.
Var ssd_heads(const Var& a, const Var& B, const Var& C, const Var& X, const SsdHeadLayout& layout);

namespace detail {

/// Chunk-entry states and chunk-local log-decay prefix sums kept for the
/// backward pass.
struct ChunkScanTrace {
  Buffer log_cum;  // [T]
  Buffer states;   // [(n_chunks + 1) x N x P]
};

void chunk_scan_forward(std::span<const double> a, std::span<const double> B, std::span<const double> C,
                        std::span<const double> X, std::size_t T, std::size_t N, std::size_t P,
                        std::size_t chunk_len, std::span<double> Y, ChunkScanTrace* trace);

void chunk_scan_backward(std::span<const double> a, std::span<const double> B, std::span<const double> C,
                         std::span<const double> X, std::size_t T, std::size_t N, std::size_t P,
                         std::size_t chunk_len, const ChunkScanTrace& trace, std::span<const double> dY,
                         std::span<double> da, std::span<double> dB, std::span<double> dC,
                         std::span<double> dX);

}  // namespace detail

}  // namespace transx
