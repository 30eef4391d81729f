#include "transx/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

#include "transx/errors.hpp"

namespace transx {

namespace {

std::atomic<Precision> g_precision{Precision::fp64};
thread_local AllocationProbe* t_probe = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.raw(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.raw(), t.rows(), t.cols()); }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }
const char* precision_name(Precision p) { return p == Precision::fp32 ? "fp32" : "fp64"; }

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  if (t_probe) t_probe->note(data_.size());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("Tensor: shape " + shape_string(shape_) + " does not hold " +
                     std::to_string(data_.size()) + " values");
  }
  if (t_probe) t_probe->note(data_.size());
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("Tensor::rows on rank " + std::to_string(shape_.size()));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("Tensor::cols on rank " + std::to_string(shape_.size()));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("Tensor::item on shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  if (t_probe) t_probe->note(out.data_.size());
  return out;
}

void finalize(Tensor& t, const char* op) {
  if (precision() == Precision::fp32) {
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
  // x * 0 is NaN exactly when x is NaN or infinite.
  if (std::isnan((Eigen::Map<const Eigen::ArrayXd>(t.raw(), static_cast<Eigen::Index>(t.numel())) * 0.0).sum())) {
    throw NonFiniteError(std::string(op) + ": non-finite value in result");
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  finalize(out, "matmul");
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " * " + shape_string(b.shape()) + "^T");
  }
  Tensor out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  finalize(out, "matmul_nt");
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_string(a.shape()) + "^T * " + shape_string(b.shape()));
  }
  Tensor out({a.cols(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
  finalize(out, "matmul_tn");
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a).transpose();
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  finalize(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  finalize(out, "sub");
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  finalize(out, "hadamard");
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  finalize(out, "scale");
  return out;
}

void axpy(Tensor& a, const Tensor& b, double s) {
  require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += s * b[i];
}

Tensor softmax_rows(const Tensor& x, const std::optional<Tensor>& mask) {
  require_matrix(x, "softmax_rows");
  if (mask) require_same_shape(x, *mask, "softmax_rows mask");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Tensor out({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask && (*mask)(r, c) == 0.0) continue;
      mx = std::max(mx, x(r, c));
      any = true;
    }
    if (!any) throw DomainError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask && (*mask)(r, c) == 0.0) continue;
      const double e = std::exp(x(r, c) - mx);
      out(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < n; ++c) out(r, c) /= z;
  }
  finalize(out, "softmax_rows");
  return out;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

AllocationProbe::AllocationProbe() : previous_(t_probe) { t_probe = this; }
AllocationProbe::~AllocationProbe() { t_probe = previous_; }

void AllocationProbe::note(std::size_t numel) {
  largest_ = std::max(largest_, numel);
  if (previous_) previous_->note(numel);
}

}  // namespace transx
