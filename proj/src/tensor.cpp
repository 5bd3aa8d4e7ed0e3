#include "bicanet/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace bicanet {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

void validate(const Shape& shape) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw std::invalid_argument("tensor extents must be >= 1, got " + shape.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  validate(shape_);
  data_.assign(shape_.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  validate(shape_);
  if (data_.size() != shape_.numel()) {
    throw ShapeError("data", "expected " + std::to_string(shape_.numel()) + " elements for " +
                                 shape_.str() + ", got " + std::to_string(data_.size()));
  }
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("item() requires a single-element tensor, got " + shape_.str());
  }
  return data_[0];
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

void check_labels(const LabelMap& labels, int num_classes) {
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const int v = labels.data[i];
    if (v != LabelMap::kIgnore && v >= num_classes) {
      throw DataError("label " + std::to_string(v) + " at pixel index " + std::to_string(i) +
                      " is outside [0, " + std::to_string(num_classes) + ") and not 255");
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace bicanet
