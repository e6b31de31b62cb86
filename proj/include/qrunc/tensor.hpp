#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qrunc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf showed up where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Same data viewed with another shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) throw ShapeError("row slice out of range");
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                    data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
  }

  /// Gathers the given rows of the leading axis, in order.
  Tensor gather_rows(std::span<const std::size_t> rows) const {
    if (rank() == 0) throw ShapeError("gather on rank-0 tensor");
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = rows.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= shape_[0]) throw ShapeError("gather index out of range");
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    return out;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape_ != b.shape_) {
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape_) + " vs " +
                       shape_str(b.shape_));
    }
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) return Tensor({0});
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  Tensor out(std::move(s));
  std::size_t off = 0;
  for (const auto& t : items) {
    Tensor::require_same_shape(t, items[0], "stack");
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += t.size();
  }
  return out;
}

template <class F>
Tensor map(const Tensor& t, F&& f) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F&& f) {
  Tensor::require_same_shape(a, b, "zip");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline double sum(const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0); }

inline double mean(const Tensor& t) { return t.empty() ? 0.0 : sum(t) / static_cast<double>(t.size()); }

/// Lower median for even counts; input is copied.
inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty set");
  auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

}  // namespace qrunc
