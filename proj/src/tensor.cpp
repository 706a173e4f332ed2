#include "advspk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace advspk {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values do not fill shape " + shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

namespace {
std::pair<Eigen::Index, Eigen::Index> matrix_dims(const Shape& shape) {
  if (shape.size() == 2) return {static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1])};
  if (shape.size() == 1) return {1, static_cast<Eigen::Index>(shape[0])};
  throw ShapeError("matrix view requires rank 1 or 2, got " + shape_str(shape));
}
}  // namespace

MatMap Tensor::matrix() {
  auto [r, c] = matrix_dims(shape_);
  return MatMap(data_.data(), r, c);
}

ConstMatMap Tensor::matrix() const {
  auto [r, c] = matrix_dims(shape_);
  return ConstMatMap(data_.data(), r, c);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace advspk
