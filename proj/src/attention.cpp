#include "transx/attention.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "transx/errors.hpp"

namespace transx {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor head_slice(const Tensor& x, std::size_t head, std::size_t width) {
  Tensor out({x.rows(), width});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r).subspan(head * width, width);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void rotate_rows_inplace(Tensor& x, const FrequencyTable& table, std::size_t offset) {
  for (std::size_t r = 0; r < x.rows(); ++r) rotate_inplace(x.row(r), offset + r, table);
}

}  // namespace

void AttentionInputs::validate() const {
  if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2) throw ShapeError("attention: Q, K, V must be matrices");
  if (n_heads == 0) throw ShapeError("attention: n_heads must be positive");
  if (Q.shape() != K.shape()) throw ShapeError("attention: Q and K shapes differ");
  if (V.rows() != Q.rows()) throw ShapeError("attention: V length differs from Q");
  if (Q.cols() % n_heads != 0 || V.cols() % n_heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (head_dim() % 2 != 0) throw ShapeError("attention: per-head dim must be even");
}

Tensor attention_scores(const AttentionInputs& inp, std::size_t head, const FrequencyTable& table, bool use_rope,
                        std::size_t position_offset) {
  inp.validate();
  const std::size_t d = inp.head_dim();
  if (use_rope && table.d() != d) throw ShapeError("attention: table d differs from head dim");
  Tensor q = head_slice(inp.Q, head, d);
  Tensor k = head_slice(inp.K, head, d);
  if (use_rope) {
    rotate_rows_inplace(q, table, position_offset);
    rotate_rows_inplace(k, table, position_offset);
  }
  return matmul_nt(q, k);
}

Tensor causal_attention(const AttentionInputs& inp, const FrequencyTable& table, Normalize normalize, bool use_rope,
                        std::size_t position_offset) {
  inp.validate();
  const std::size_t T = inp.length();
  const std::size_t d = inp.head_dim();
  const std::size_t p = inp.value_dim();
  Tensor mask({T, T});
  for (std::size_t j = 0; j < T; ++j) {
    for (std::size_t i = 0; i <= j; ++i) mask(j, i) = 1.0;
  }
  Tensor out({T, inp.n_heads * p});
  for (std::size_t h = 0; h < inp.n_heads; ++h) {
    Tensor s = attention_scores(inp, h, table, use_rope, position_offset);
    Tensor w;
    if (normalize == Normalize::softmax) {
      w = softmax_rows(scale(s, 1.0 / std::sqrt(static_cast<double>(d))), mask);
    } else {
      w = hadamard(s, mask);
    }
    const Tensor y = matmul(w, head_slice(inp.V, h, p));
    for (std::size_t r = 0; r < T; ++r) {
      auto src = y.row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(h * p));
    }
  }
  finalize(out, "causal_attention");
  return out;
}

Tensor apply_feature_map(FeatureMap map, const Tensor& x) {
  Tensor out = x;
  if (map == FeatureMap::elu_plus_one) {
    for (double& v : out.data()) v = v > 0.0 ? v + 1.0 : std::exp(v);
  }
  return out;
}

RecurrentAttnState RecurrentAttnState::zeros(std::size_t d, std::size_t value_dim) {
  return RecurrentAttnState{Tensor({d, value_dim}), Tensor({d}), 0, 0};
}

LinearStepResult linear_attention_step(RecurrentAttnState state, const Tensor& q, const Tensor& k, const Tensor& v,
                                       PositionIndex m, const FrequencyTable& table,
                                       const LinearAttentionOptions& options) {
  const std::size_t d = table.d();
  const std::size_t P = v.numel();
  if (q.numel() != d || k.numel() != d || state.S.rows() != d || state.S.cols() != P || state.z.numel() != d) {
    throw ShapeError("linear_attention_step: shape mismatch");
  }
  if (state.position != m.m) {
    throw CacheError("linear_attention_step: state at position " + std::to_string(state.position) +
                     ", token at " + std::to_string(m.m));
  }
  const Tensor fq = apply_feature_map(options.query_map, rotate(q.reshaped({d}), m, table, Role::query));
  const Tensor fk = apply_feature_map(options.key_map, rotate(k.reshaped({d}), PositionIndex{m.m}, table, Role::key));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < P; ++c) state.S(i, c) += fk[i] * v[c];
    state.z[i] += fk[i];
  }
  Tensor y({P});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < P; ++c) y[c] += fq[i] * state.S(i, c);
  }
  const double den = dot(fq.data(), state.z.data());
  if (std::abs(den) < options.eps) {
    ++state.guard_hits;
  } else {
    for (double& e : y.data()) e /= den;
  }
  finalize(y, "linear_attention_step");
  ++state.position;
  return {std::move(y), std::move(state)};
}

Var causal_softmax_attention(const Var& Q, const Var& K, const Var& V, const AttentionLayout& lay) {
  auto pq = Q.value_ptr();
  auto pk = K.value_ptr();
  auto pv = V.value_ptr();
  const std::size_t T = lay.seq_len, H = lay.heads, d = lay.head_dim, p = lay.value_dim;
  const std::size_t rows = lay.batch * T;
  if (pq->rows() != rows || pq->cols() != H * d || pk->shape() != pq->shape() || pv->rows() != rows ||
      pv->cols() != H * p) {
    throw ShapeError("causal_softmax_attention: activations do not match layout");
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  const auto Ti = static_cast<Eigen::Index>(T);
  const bool keep = Q.tracked() || K.tracked() || V.tracked();
  auto probs = std::make_shared<std::vector<RowMat>>(keep ? lay.batch * H : 0);
  Tensor out({rows, H * p});

  auto block = [T](const Tensor& src, std::size_t b, std::size_t h, std::size_t w) {
    RowMat m(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(w));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < w; ++c) m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = src(b * T + t, h * w + c);
    }
    return m;
  };

  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const RowMat q = block(*pq, b, h, d), k = block(*pk, b, h, d), v = block(*pv, b, h, p);
      RowMat s = (q * k.transpose()) * sc;
      for (Eigen::Index j = 0; j < Ti; ++j) {
        const double mx = s.row(j).head(j + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index i = 0; i <= j; ++i) {
          s(j, i) = std::exp(s(j, i) - mx);
          z += s(j, i);
        }
        for (Eigen::Index i = 0; i <= j; ++i) s(j, i) /= z;
        for (Eigen::Index i = j + 1; i < Ti; ++i) s(j, i) = 0.0;
      }
      const RowMat o = s * v;
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < p; ++c) out(b * T + t, h * p + c) = o(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c));
      }
      if (keep) (*probs)[b * H + h] = std::move(s);
    }
  }
  finalize(out, "causal_softmax_attention");

  return Tape::record(std::move(out), {Q, K, V}, [pq, pk, pv, probs, lay, sc, block](const Tensor& g, GradSink& sink) {
    const std::size_t T = lay.seq_len, H = lay.heads, d = lay.head_dim, p = lay.value_dim;
    const std::size_t rows = lay.batch * T;
    Tensor dQ({rows, H * d}), dK({rows, H * d}), dV({rows, H * p});
    auto scatter = [T](Tensor& dst, const RowMat& m, std::size_t b, std::size_t h) {
      const auto w = static_cast<std::size_t>(m.cols());
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < w; ++c) dst(b * T + t, h * w + c) = m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c));
      }
    };
    for (std::size_t b = 0; b < lay.batch; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const RowMat& P = (*probs)[b * H + h];
        const RowMat q = block(*pq, b, h, d), k = block(*pk, b, h, d), v = block(*pv, b, h, p);
        const RowMat go = block(g, b, h, p);
        const RowMat dP = go * v.transpose();
        RowMat dS = P.cwiseProduct(dP);
        const Eigen::VectorXd rowdot = dS.rowwise().sum();
        dS -= P.cwiseProduct(rowdot.replicate(1, dS.cols()));
        dS *= sc;
        scatter(dQ, dS * k, b, h);
        scatter(dK, dS.transpose() * q, b, h);
        scatter(dV, P.transpose() * go, b, h);
      }
    }
    sink.add(0, std::move(dQ));
    sink.add(1, std::move(dK));
    sink.add(2, std::move(dV));
  });
}

KVCache::KVCache(std::size_t heads, std::size_t head_dim, std::size_t value_dim)
    : heads_(heads), head_dim_(head_dim), value_dim_(value_dim) {}

void KVCache::append(std::span<const double> rotated_key, std::span<const double> value) {
  if (rotated_key.size() != heads_ * head_dim_ || value.size() != heads_ * value_dim_) {
    throw ShapeError("KVCache::append: row width mismatch");
  }
  keys_.insert(keys_.end(), rotated_key.begin(), rotated_key.end());
  values_.insert(values_.end(), value.begin(), value.end());
  ++length_;
}

void KVCache::attend(std::span<const double> rotated_query, std::size_t visible, std::span<double> out) const {
  if (visible == 0 || visible > length_) throw CacheError("KVCache::attend: invalid visible length");
  if (rotated_query.size() != heads_ * head_dim_ || out.size() != heads_ * value_dim_) {
    throw ShapeError("KVCache::attend: row width mismatch");
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(head_dim_));
  std::vector<double> w(visible);
  for (std::size_t h = 0; h < heads_; ++h) {
    auto q = rotated_query.subspan(h * head_dim_, head_dim_);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < visible; ++i) {
      const double* k = keys_.data() + i * heads_ * head_dim_ + h * head_dim_;
      double s = 0.0;
      for (std::size_t c = 0; c < head_dim_; ++c) s += q[c] * k[c];
      w[i] = s * sc;
      mx = std::max(mx, w[i]);
    }
    double z = 0.0;
    for (double& e : w) {
      e = std::exp(e - mx);
      z += e;
    }
    auto o = out.subspan(h * value_dim_, value_dim_);
    std::fill(o.begin(), o.end(), 0.0);
    for (std::size_t i = 0; i < visible; ++i) {
      const double* v = values_.data() + i * heads_ * value_dim_ + h * value_dim_;
      for (std::size_t c = 0; c < value_dim_; ++c) o[c] += (w[i] / z) * v[c];
    }
  }
}

}  // namespace transx
