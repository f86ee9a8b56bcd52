#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "defer/error.hpp"

namespace defer {

static_assert(std::endian::native == std::endian::little,
              "wire and file formats assume a little-endian host");
static_assert(sizeof(float) == 4);

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major float32 array. Rank >= 1 and every extent >= 1.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(checked_count(shape_), 0.0f) {}

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_count(shape_)) {
      fail(Errc::ShapeMismatch, "tensor data length " +
                                    std::to_string(data_.size()) +
                                    " does not match shape " +
                                    shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const float> values() const noexcept { return data_; }
  std::span<float> values() noexcept { return data_; }
  const float* data() const noexcept { return data_.data(); }
  float* data() noexcept { return data_.data(); }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  std::size_t byte_size() const noexcept { return data_.size() * sizeof(float); }

  /// Bitwise equality: distinguishes -0.0 from 0.0 and compares NaN payloads.
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), byte_size()) == 0);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_count(const Shape& shape) {
    if (shape.empty()) fail(Errc::ShapeMismatch, "tensor rank must be >= 1");
    for (auto e : shape) {
      if (e == 0) {
        fail(Errc::ShapeMismatch,
             "tensor extents must be >= 1, got " + shape_string(shape));
      }
    }
    return element_count(shape);
  }

  Shape shape_;
  std::vector<float> data_;
};

}  // namespace defer
