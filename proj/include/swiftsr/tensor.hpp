#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace swiftsr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  NonFiniteError(std::size_t index, const std::string& what)
      : Error(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// NCHW extents.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

/// Flat offset of (n,c,h,w) in a row-major NCHW buffer.
constexpr std::size_t flat_index(const Shape& s, std::size_t n, std::size_t c,
                                 std::size_t h, std::size_t w) noexcept {
  return ((n * s.c + c) * s.h + h) * s.w + w;
}

/// Inverse of flat_index.
constexpr std::array<std::size_t, 4> unflatten_index(const Shape& s,
                                                     std::size_t idx) noexcept {
  const std::size_t w = idx % s.w;
  idx /= s.w;
  const std::size_t h = idx % s.h;
  idx /= s.h;
  const std::size_t c = idx % s.c;
  return {idx / s.c, c, h, w};
}

/// Dense rank-4 float tensor in NCHW order. Owns its storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float value = 0.0f)
      : shape_(shape), data_(shape.numel(), value) {}
  Tensor(Shape shape, std::vector<float> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[flat_index(shape_, n, c, h, w)];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[flat_index(shape_, n, c, h, w)];
  }

  /// Same storage, new extents with an equal element count.
  Tensor reshaped(Shape s) const& {
    check_reshape(s);
    return Tensor(s, data_);
  }
  Tensor reshaped(Shape s) && {
    check_reshape(s);
    shape_ = s;
    return std::move(*this);
  }

  void fill(float v) noexcept { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_reshape(const Shape& s) const {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    }
  }

  Shape shape_{};
  std::vector<float> data_;
};

inline Tensor tensor_full(Shape shape, float value) {
  if (shape.numel() == 0) {
    throw ShapeError("tensor_full: zero element count for shape " + shape.str());
  }
  return Tensor(shape, value);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

inline Tensor tensor_add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "tensor_add");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  return out;
}

/// a += b in place.
inline void tensor_add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "tensor_add_inplace");
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) a[i] += b[i];
}

/// Mean in flat-index order with a double accumulator.
inline float tensor_reduce_mean(const Tensor& a) {
  if (a.empty()) throw ShapeError("tensor_reduce_mean: empty tensor");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return static_cast<float>(acc / static_cast<double>(a.size()));
}

/// Throws NonFiniteError carrying the first offending flat index.
inline void tensor_validate_finite(const Tensor& a) {
  const auto d = a.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NonFiniteError(i, "non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace swiftsr
