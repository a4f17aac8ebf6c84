#pragma once

// Dense row-major arrays of doubles and the error types shared by the
// numeric layers.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ni {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised when operand shapes are incompatible; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or infinity, or divides by exact zero.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array({1}, std::vector<double>{v}); }
  static Array vector(std::initializer_list<double> values);
  static Array matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Reinterpret with a new shape of equal element count.
  void reshape(Shape shape);
  void fill(double v);

  bool all_finite() const;
  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace ni
