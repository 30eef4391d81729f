#include "transx/ssd.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "transx/errors.hpp"

namespace transx {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using Vec = Eigen::VectorXd;

// Fixed-order sum of a .* b; Eigen's vectorized reductions over maps peel by
// address, which makes the rounding depend on where the buffers live.
template <class A, class B>
double ordered_dot(const A& a, const B& b) {
  double acc = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) acc += a(r, c) * b(r, c);
  return acc;
}

void require_rope_width(const SSDInputs& inp, const FrequencyTable& table, bool use_rope) {
  if (use_rope && table.d() != inp.state_dim()) {
    throw ShapeError("ssd: rotary table d=" + std::to_string(table.d()) + " but state dim N=" +
                     std::to_string(inp.state_dim()));
  }
}

// Rotated copies of B and C (row t rotated by t).
std::pair<Tensor, Tensor> rotated_bc(const SSDInputs& inp, const FrequencyTable& table) {
  Tensor B = inp.B;
  Tensor C = inp.C;
  for (std::size_t t = 0; t < inp.length(); ++t) {
    rotate_inplace(B.row(t), t, table);
    rotate_inplace(C.row(t), t, table);
  }
  return {std::move(B), std::move(C)};
}

}  // namespace

void SSDInputs::validate() const {
  const std::size_t T = a.numel();
  if (a.rank() != 1) throw ShapeError("SSDInputs: a must be rank 1");
  if (B.rank() != 2 || C.rank() != 2 || X.rank() != 2) throw ShapeError("SSDInputs: B, C, X must be matrices");
  if (B.rows() != T || C.rows() != T || X.rows() != T) throw ShapeError("SSDInputs: sequence lengths disagree");
  if (B.cols() != C.cols()) throw ShapeError("SSDInputs: B and C state dims disagree");
  for (std::size_t t = 0; t < T; ++t) {
    if (!(a[t] > 0.0 && a[t] <= 1.0)) {
      throw DomainError("SSDInputs: decay a[" + std::to_string(t) + "] = " + std::to_string(a[t]) +
                        " outside (0, 1]");
    }
  }
}

Tensor decay_mask(const Tensor& a) {
  const std::size_t T = a.numel();
  for (std::size_t t = 0; t < T; ++t) {
    if (!(a[t] > 0.0 && a[t] <= 1.0)) throw DomainError("decay_mask: a outside (0, 1]");
  }
  Tensor L({T, T});
  for (std::size_t j = 0; j < T; ++j) {
    L(j, j) = 1.0;
    for (std::size_t i = j; i-- > 0;) L(j, i) = L(j, i + 1) * a[i + 1];
  }
  return L;
}

SsdState SsdState::zeros(std::size_t state_dim, std::size_t channels) {
  return SsdState{Tensor({state_dim, channels}), 0};
}

void ssd_step(SsdState& state, double a, std::span<const double> b, std::span<const double> c,
              std::span<const double> x, std::span<double> y, const FrequencyTable* table, double c_scale) {
  const std::size_t N = state.h.rows();
  const std::size_t P = state.h.cols();
  if (b.size() != N || c.size() != N || x.size() != P || y.size() != P) throw ShapeError("ssd_step: shape mismatch");
  if (!(a > 0.0 && a <= 1.0)) throw DomainError("ssd_step: decay outside (0, 1]");
  std::vector<double> bt(b.begin(), b.end());
  std::vector<double> ct(c.begin(), c.end());
  if (table) {
    rotate_inplace(bt, state.position, *table);
    rotate_inplace(ct, state.position, *table, c_scale);
  } else if (c_scale != 1.0) {
    for (double& v : ct) v *= c_scale;
  }
  double* h = state.h.raw();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) h[n * P + p] = a * h[n * P + p] + bt[n] * x[p];
  }
  for (std::size_t p = 0; p < P; ++p) y[p] = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) y[p] += ct[n] * h[n * P + p];
  }
  for (std::size_t p = 0; p < P; ++p) {
    if (!std::isfinite(y[p])) throw NonFiniteError("ssd_step: non-finite state");
  }
  ++state.position;
}

Tensor ssd_recurrent(const SSDInputs& inp, const FrequencyTable& table, bool use_rope) {
  inp.validate();
  require_rope_width(inp, table, use_rope);
  const std::size_t T = inp.length();
  SsdState state = SsdState::zeros(inp.state_dim(), inp.channels());
  Tensor Y({T, inp.channels()});
  for (std::size_t t = 0; t < T; ++t) {
    ssd_step(state, inp.a[t], inp.B.row(t), inp.C.row(t), inp.X.row(t), Y.row(t), use_rope ? &table : nullptr);
  }
  finalize(Y, "ssd_recurrent");
  return Y;
}

Tensor ssd_rope_scores(const Tensor& C, const Tensor& B, const FrequencyTable& table) {
  if (C.rank() != 2 || B.rank() != 2 || C.rows() != B.rows() || C.cols() != B.cols()) {
    throw ShapeError("ssd_rope_scores: C and B must be [T x N] with equal shapes");
  }
  if (C.cols() != table.d()) throw ShapeError("ssd_rope_scores: N != table d");
  SSDInputs tmp{Tensor({C.rows()}, 1.0), B, C, Tensor({C.rows(), 1})};
  auto [Bt, Ct] = rotated_bc(tmp, table);
  return matmul_nt(Ct, Bt);
}

Tensor ssd_matrix(const SSDInputs& inp, const FrequencyTable& table, bool use_rope) {
  inp.validate();
  require_rope_width(inp, table, use_rope);
  const std::size_t T = inp.length();
  if (T > kMaxMatrixLength) {
    throw DomainError("ssd_matrix: T=" + std::to_string(T) + " exceeds the quadratic-form limit");
  }
  Tensor S = use_rope ? ssd_rope_scores(inp.C, inp.B, table) : matmul_nt(inp.C, inp.B);
  const Tensor M = hadamard(decay_mask(inp.a), S);
  return matmul(M, inp.X);
}

namespace detail {

void chunk_scan_forward(std::span<const double> a, std::span<const double> B, std::span<const double> C,
                        std::span<const double> X, std::size_t T, std::size_t N, std::size_t P,
                        std::size_t chunk_len, std::span<double> Y, ChunkScanTrace* trace) {
  if (chunk_len == 0) throw DomainError("ssd_chunked: chunk_len must be >= 1");
  const std::size_t n_chunks = (T + chunk_len - 1) / chunk_len;
  Buffer g(T);
  RowMat H = RowMat::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(P));
  if (trace) {
    trace->states.assign((n_chunks + 1) * N * P, 0.0);
  }
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const std::size_t s = c * chunk_len;
    const std::size_t len = std::min(chunk_len, T - s);
    const auto L = static_cast<Eigen::Index>(len);
    // g is a prefix sum of log a that starts after the chunk's first token;
    // a_s only scales the carried-in state.
    const double a_s = a[s];
    double acc = 0.0;
    g[s] = 0.0;
    for (std::size_t t = 1; t < len; ++t) {
      acc += std::log(a[s + t]);
      g[s + t] = acc;
    }
    if (trace) std::copy(H.data(), H.data() + N * P, trace->states.begin() + static_cast<std::ptrdiff_t>(c * N * P));
    CMap Bc(B.data() + s * N, L, static_cast<Eigen::Index>(N));
    CMap Cc(C.data() + s * N, L, static_cast<Eigen::Index>(N));
    CMap Xc(X.data() + s * P, L, static_cast<Eigen::Index>(P));
    MMap Yc(Y.data() + s * P, L, static_cast<Eigen::Index>(P));

    RowMat W = Cc * Bc.transpose();
    Vec eg(L);
    for (Eigen::Index j = 0; j < L; ++j) {
      eg[j] = a_s * std::exp(g[s + static_cast<std::size_t>(j)]);
      for (Eigen::Index i = 0; i < L; ++i) {
        W(j, i) = i <= j ? W(j, i) * std::exp(g[s + static_cast<std::size_t>(j)] - g[s + static_cast<std::size_t>(i)])
                         : 0.0;
      }
    }
    Yc.noalias() = W * Xc;
    Yc.noalias() += eg.asDiagonal() * (Cc * H);

    const double g_last = g[s + len - 1];
    Vec u(L);
    for (Eigen::Index i = 0; i < L; ++i) u[i] = std::exp(g_last - g[s + static_cast<std::size_t>(i)]);
    RowMat next = (a_s * std::exp(g_last)) * H;
    next.noalias() += Bc.transpose() * (u.asDiagonal() * Xc);
    H = std::move(next);
  }
  if (trace) {
    std::copy(H.data(), H.data() + N * P, trace->states.begin() + static_cast<std::ptrdiff_t>(n_chunks * N * P));
    trace->log_cum = std::move(g);
  }
}

void chunk_scan_backward(std::span<const double> a, std::span<const double> B, std::span<const double> C,
                         std::span<const double> X, std::size_t T, std::size_t N, std::size_t P,
                         std::size_t chunk_len, const ChunkScanTrace& trace, std::span<const double> dY,
                         std::span<double> da, std::span<double> dB, std::span<double> dC,
                         std::span<double> dX) {
  const std::size_t n_chunks = (T + chunk_len - 1) / chunk_len;
  const auto& g = trace.log_cum;
  const auto Ni = static_cast<Eigen::Index>(N);
  const auto Pi = static_cast<Eigen::Index>(P);
  RowMat dH = RowMat::Zero(Ni, Pi);  // gradient w.r.t. the state leaving the current chunk
  Buffer dg(T, 0.0);
  for (std::size_t c = n_chunks; c-- > 0;) {
    const std::size_t s = c * chunk_len;
    const std::size_t len = std::min(chunk_len, T - s);
    const auto L = static_cast<Eigen::Index>(len);
    CMap Bc(B.data() + s * N, L, Ni);
    CMap Cc(C.data() + s * N, L, Ni);
    CMap Xc(X.data() + s * P, L, Pi);
    CMap dYc(dY.data() + s * P, L, Pi);
    MMap dBc(dB.data() + s * N, L, Ni);
    MMap dCc(dC.data() + s * N, L, Ni);
    MMap dXc(dX.data() + s * P, L, Pi);
    CMap Hin(trace.states.data() + c * N * P, Ni, Pi);
    CMap Hout(trace.states.data() + (c + 1) * N * P, Ni, Pi);

    RowMat G = Cc * Bc.transpose();
    RowMat D = RowMat::Zero(L, L);
    const double a_s = a[s];
    double d_log_as = 0.0;
    Vec eg(L);
    for (Eigen::Index j = 0; j < L; ++j) {
      const double gj = g[s + static_cast<std::size_t>(j)];
      eg[j] = a_s * std::exp(gj);
      for (Eigen::Index i = 0; i <= j; ++i) D(j, i) = std::exp(gj - g[s + static_cast<std::size_t>(i)]);
    }
    const RowMat W = D.cwiseProduct(G);

    // Intra-chunk: Y = W X.
    RowMat dW = (dYc * Xc.transpose()).triangularView<Eigen::Lower>();
    dXc.noalias() += W.transpose() * dYc;
    const RowMat dG = dW.cwiseProduct(D);
    dCc.noalias() += dG * Bc;
    dBc.noalias() += dG.transpose() * Cc;
    const RowMat Q = dW.cwiseProduct(W);
    for (Eigen::Index j = 0; j < L; ++j) {
      for (Eigen::Index i = 0; i <= j; ++i) {
        dg[s + static_cast<std::size_t>(j)] += Q(j, i);
        dg[s + static_cast<std::size_t>(i)] -= Q(j, i);
      }
    }

    // Carried-in state: Y += diag(e^g) C H_in.
    const RowMat CH = Cc * Hin;
    dCc.noalias() += eg.asDiagonal() * (dYc * Hin.transpose());
    for (Eigen::Index j = 0; j < L; ++j) {
      const double v = eg[j] * ordered_dot(CH.row(j), dYc.row(j));
      dg[s + static_cast<std::size_t>(j)] += v;
      d_log_as += v;
    }
    RowMat dHin = Cc.transpose() * (eg.asDiagonal() * dYc);

    // Outgoing state: H_out = e^{g_last} H_in + sum_i u_i B_i^T X_i.
    const double g_last = g[s + len - 1];
    Vec u(L);
    for (Eigen::Index i = 0; i < L; ++i) u[i] = std::exp(g_last - g[s + static_cast<std::size_t>(i)]);
    const RowMat XdH = Xc * dH.transpose();  // [L x N]: row i = dH X_i
    dBc.noalias() += u.asDiagonal() * XdH;
    dXc.noalias() += u.asDiagonal() * (Bc * dH);
    dg[s + len - 1] += ordered_dot(Hout, dH);
    for (Eigen::Index i = 0; i < L; ++i) dg[s + static_cast<std::size_t>(i)] -= u[i] * ordered_dot(Bc.row(i), XdH.row(i));
    const double carry = a_s * std::exp(g_last);
    d_log_as += carry * ordered_dot(Hin, dH);
    dHin += carry * dH;
    dH = std::move(dHin);

    double run = 0.0;
    for (std::size_t t = len; t-- > 1;) {
      run += dg[s + t];
      da[s + t] += run / a[s + t];
    }
    da[s] += d_log_as / a_s;
  }
}

}  // namespace detail

Tensor ssd_chunked(const SSDInputs& inp, const FrequencyTable& table, bool use_rope, std::size_t chunk_len) {
  inp.validate();
  require_rope_width(inp, table, use_rope);
  if (chunk_len == 0) throw DomainError("ssd_chunked: chunk_len must be >= 1");
  const std::size_t T = inp.length();
  Tensor Y({T, inp.channels()});
  if (use_rope) {
    auto [Bt, Ct] = rotated_bc(inp, table);
    detail::chunk_scan_forward(inp.a.data(), Bt.data(), Ct.data(), inp.X.data(), T, inp.state_dim(),
                               inp.channels(), chunk_len, Y.data(), nullptr);
  } else {
    detail::chunk_scan_forward(inp.a.data(), inp.B.data(), inp.C.data(), inp.X.data(), T, inp.state_dim(),
                               inp.channels(), chunk_len, Y.data(), nullptr);
  }
  finalize(Y, "ssd_chunked");
  return Y;
}

Var ssd_heads(const Var& a, const Var& B, const Var& C, const Var& X, const SsdHeadLayout& lay) {
  auto pa = a.value_ptr();
  auto pB = B.value_ptr();
  auto pC = C.value_ptr();
  auto pX = X.value_ptr();
  const std::size_t rows = lay.batch * lay.seq_len;
  const std::size_t H = lay.heads, N = lay.state_dim, P = lay.head_dim, T = lay.seq_len;
  if (pa->rows() != rows || pa->cols() != H || pB->rows() != rows || pB->cols() != H * N ||
      pC->shape() != pB->shape() || pX->rows() != rows || pX->cols() != H * P) {
    throw ShapeError("ssd_heads: activations do not match layout");
  }
  for (double v : pa->data()) {
    if (!(v > 0.0 && v <= 1.0)) throw DomainError("ssd_heads: decay outside (0, 1]");
  }

  struct Slot {
    Buffer a, B, C, X;
    detail::ChunkScanTrace trace;
  };
  auto slots = std::make_shared<std::vector<Slot>>(lay.batch * H);
  Tensor Y({rows, H * P});
  Buffer y(T * P);
  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      Slot& sl = (*slots)[b * H + h];
      sl.a.resize(T);
      sl.B.resize(T * N);
      sl.C.resize(T * N);
      sl.X.resize(T * P);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t r = b * T + t;
        sl.a[t] = (*pa)(r, h);
        for (std::size_t n = 0; n < N; ++n) {
          sl.B[t * N + n] = (*pB)(r, h * N + n);
          sl.C[t * N + n] = (*pC)(r, h * N + n);
        }
        for (std::size_t p = 0; p < P; ++p) sl.X[t * P + p] = (*pX)(r, h * P + p);
      }
      detail::chunk_scan_forward(sl.a, sl.B, sl.C, sl.X, T, N, P, lay.chunk_len, y, &sl.trace);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t p = 0; p < P; ++p) Y(b * T + t, h * P + p) = y[t * P + p];
      }
    }
  }
  finalize(Y, "ssd_heads");
  return Tape::record(std::move(Y), {a, B, C, X}, [slots, lay](const Tensor& g, GradSink& sink) {
    const std::size_t H = lay.heads, N = lay.state_dim, P = lay.head_dim, T = lay.seq_len;
    const std::size_t rows = lay.batch * T;
    Tensor da({rows, H}), dB({rows, H * N}), dC({rows, H * N}), dX({rows, H * P});
    Buffer dy(T * P), sa(T), sB(T * N), sC(T * N), sX(T * P);
    for (std::size_t b = 0; b < lay.batch; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const Slot& sl = (*slots)[b * H + h];
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t p = 0; p < P; ++p) dy[t * P + p] = g(b * T + t, h * P + p);
        }
        std::fill(sa.begin(), sa.end(), 0.0);
        std::fill(sB.begin(), sB.end(), 0.0);
        std::fill(sC.begin(), sC.end(), 0.0);
        std::fill(sX.begin(), sX.end(), 0.0);
        detail::chunk_scan_backward(sl.a, sl.B, sl.C, sl.X, T, N, P, lay.chunk_len, sl.trace, dy, sa, sB, sC, sX);
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t r = b * T + t;
          da(r, h) = sa[t];
          for (std::size_t n = 0; n < N; ++n) {
            dB(r, h * N + n) = sB[t * N + n];
            dC(r, h * N + n) = sC[t * N + n];
          }
          for (std::size_t p = 0; p < P; ++p) dX(r, h * P + p) = sX[t * P + p];
        }
      }
    }
    sink.add(0, std::move(da));
    sink.add(1, std::move(dB));
    sink.add(2, std::move(dC));
    sink.add(3, std::move(dX));
  });
}

}  // namespace transx
