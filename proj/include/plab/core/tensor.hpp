#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "plab/core/error.hpp"

namespace plab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. A rank-0 tensor holds a single scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape)) {
      throw ShapeError("tensor value count " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t rank() const { return shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  [[nodiscard]] bool empty() const { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  [[nodiscard]] double item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape));
    return data[0];
  }

  [[nodiscard]] std::span<double> values() { return data; }
  [[nodiscard]] std::span<const double> values() const { return data; }

  [[nodiscard]] bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  [[nodiscard]] double squared_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return s;
  }

  [[nodiscard]] double norm() const { return std::sqrt(squared_norm()); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace plab
