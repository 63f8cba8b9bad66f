#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "srlb/errors.hpp"

// Scalar type of the tensor engine. Everything that serializes or trains
// assumes float; the gradient checks build with -DSRLB_REAL=double.
#ifndef SRLB_REAL
#define SRLB_REAL float
#endif

namespace srlb {

using real = SRLB_REAL;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of `real`. Value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, real fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }

  // 2-D literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<real>> rows) {
    std::vector<real> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("tensor: ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<real> values) {
    return Tensor({values.size()}, std::vector<real>(values));
  }

  static Tensor scalar(real v) { return Tensor({1}, std::vector<real>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Dimension by index; negative indices count from the back.
  std::size_t dim(int i) const {
    int r = static_cast<int>(shape_.size());
    int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw DimensionError("tensor: dim index out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(k)];
  }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* ptr() noexcept { return data_.data(); }
  const real* ptr() const noexcept { return data_.data(); }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  real& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  real at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
  }

  // Bit-exact comparison of shape and payload.
  bool bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(real)) == 0);
  }

  real sum() const noexcept {
    double acc = 0.0;
    for (real v : data_) acc += v;
    return static_cast<real>(acc);
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<real> data_;
};

inline void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericalError(std::string(where) + ": non-finite value produced");
}

// Sum of squared differences, accumulated in double.
inline double squared_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("squared_distance: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

// Picks slices along the leading axis, in the given order.
inline Tensor gather_leading(const Tensor& t, std::span<const std::size_t> which) {
  if (which.empty()) throw DimensionError("gather_leading: empty selection");
  const std::size_t stride = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = which.size();
  Tensor out(s);
  for (std::size_t i = 0; i < which.size(); ++i) {
    if (which[i] >= t.dim(0)) throw DimensionError("gather_leading: index out of range");
    std::copy_n(t.ptr() + which[i] * stride, stride, out.ptr() + i * stride);
  }
  return out;
}

}  // namespace srlb
