#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bicanet/errors.hpp"

namespace bicanet {

/// Extents of an NCHW tensor. Every extent is at least one.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }

  bool operator==(const Shape&) const = default;

  std::string str() const;
};

/// Throws InvalidArgument unless all extents are >= 1.
void validate(const Shape& shape);

/// Dense row-major NCHW array. Plain value type; gradients live on autodiff nodes.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  std::size_t index(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) noexcept { return data_[index(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const noexcept { return data_[index(n, c, h, w)]; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  T operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Scalar value of a 1x1x1x1 tensor.
  T item() const;

  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Per-pixel integer class map of shape (n, h, w); 255 marks ignored pixels.
struct LabelMap {
  static constexpr std::uint8_t kIgnore = 255;

  int n = 1;
  int h = 1;
  int w = 1;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t index(int b, int y, int x) const noexcept {
    return (static_cast<std::size_t>(b) * h + y) * w + x;
  }
  std::uint8_t& at(int b, int y, int x) noexcept { return data[index(b, y, x)]; }
  std::uint8_t at(int b, int y, int x) const noexcept { return data[index(b, y, x)]; }

  bool operator==(const LabelMap&) const = default;
};

/// Throws DataError naming the first pixel whose label is >= num_classes and not ignored.
void check_labels(const LabelMap& labels, int num_classes);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace bicanet
