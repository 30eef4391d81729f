#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace transx {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocation, so vectorized kernels see the same
/// alignment (and therefore the same rounding) on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

enum class Precision { fp64, fp32 };

/// Global numeric mode. In fp32 mode every op result is rounded to float.
void set_precision(Precision p);
Precision precision();
const char* precision_name(Precision p);

std::string shape_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty(); }

  // Rank-2 helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  /// Scalar value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Buffer data_;
};

/// Throws NonFiniteError on NaN/Inf and applies the global precision mode.
void finalize(Tensor& t, const char* op);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// In-place a += s * b.
void axpy(Tensor& a, const Tensor& b, double s = 1.0);

/// Row-wise softmax with per-row max subtraction. Masked entries (mask == 0)
/// come out as exactly zero; every row needs at least one unmasked entry.
Tensor softmax_rows(const Tensor& x, const std::optional<Tensor>& mask = std::nullopt);

double sum(const Tensor& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Records the largest tensor allocated on this thread while in scope.
class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;

  std::size_t largest_numel() const { return largest_; }
  void note(std::size_t numel);

 private:
  std::size_t largest_ = 0;
  AllocationProbe* previous_ = nullptr;
};

}  // namespace transx
