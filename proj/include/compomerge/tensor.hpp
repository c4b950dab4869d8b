#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "compomerge/errors.hpp"
#include "compomerge/rng.hpp"

namespace compomerge {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major 1D or 2D tensor. `T` is the storage type; TensorF32 is the
/// interchange type for adapters and files, TensorF64 is used inside training.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(checked_numel(shape_), T{0}) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  /// 2D literal, e.g. Tensor<float>::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) { return Tensor({values.size()}, std::vector<T>(values)); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Element-wise conversion to another storage type.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty() || shape.size() > 2) {
      throw ShapeError("tensor rank must be 1 or 2, got shape " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF32 = Tensor<float>;
using TensorF64 = Tensor<double>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw DegenerateInputError(std::string(op) + ": non-finite value in result");
  }
}

/// Standard matrix product, accumulated in double and rounded to T on store.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  Tensor<T> out({m, p});
  std::vector<double> acc(p);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const T* brow = &b.data()[k * p];
      for (std::size_t j = 0; j < p; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < p; ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  ensure_finite(out, "matmul");
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2D, got " + shape_str(a.shape()));
  Tensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

namespace detail {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  ensure_finite(out, op);
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <typename T>
Tensor<T> scale(double alpha, const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>(alpha * static_cast<double>(a[i]));
  ensure_finite(out, "scale");
  return out;
}

/// alpha * x + y
template <typename T>
Tensor<T> axpy(double alpha, const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_same_shape(x, y, "axpy");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<T>(alpha * static_cast<double>(x[i]) + static_cast<double>(y[i]));
  ensure_finite(out, "axpy");
  return out;
}

/// In-place y += alpha * x.
template <typename T>
void axpy_inplace(double alpha, const Tensor<T>& x, Tensor<T>& y) {
  detail::require_same_shape(x, y, "axpy_inplace");
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = static_cast<T>(alpha * static_cast<double>(x[i]) + static_cast<double>(y[i]));
}

struct Norms {
  double frobenius = 0.0;
  double l2_flat = 0.0;
};

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
Norms norms(const Tensor<T>& t) {
  const double n = std::sqrt(dot(t.data(), t.data()));
  return {n, n};
}

/// Cosine of the angle between the flattened tensors, clamped to [-1, 1].
template <typename T>
double cosine(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const double na = std::sqrt(dot(a.data(), a.data()));
  const double nb = std::sqrt(dot(b.data(), b.data()));
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine: zero vector");
  return std::clamp(dot(a.data(), b.data()) / (na * nb), -1.0, 1.0);
}

enum class InitKind { zeros, ones, kaiming_uniform };

/// Bound of the kaiming-uniform draw. Gain is sqrt(1/3) (the `a = sqrt(5)`
/// convention used for LoRA A factors), which makes the bound 1/sqrt(fan_in).
inline double kaiming_uniform_bound(std::size_t fan_in) {
  const double gain = std::sqrt(1.0 / 3.0);
  return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

template <typename T>
Tensor<T> init(InitKind kind, const Shape& shape, SeededRng& rng, std::size_t fan_in = 0) {
  Tensor<T> out(shape);
  switch (kind) {
    case InitKind::zeros:
      break;
    case InitKind::ones:
      out.fill(T{1});
      break;
    case InitKind::kaiming_uniform: {
      if (fan_in == 0) throw ValidationError("init: kaiming_uniform requires fan_in > 0");
      const double bound = kaiming_uniform_bound(fan_in);
      for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
  }
  return out;
}

}  // namespace compomerge
