#include "ni/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace ni {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("array dimensions must be positive, got " + shape_string(shape_));
  }
}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("array dimensions must be positive, got " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Array Array::vector(std::initializer_list<double> values) {
  return Array({values.size()}, std::vector<double>(values));
}

Array Array::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data));
}

void Array::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace ni
