#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "retgen/errors.hpp"

namespace retgen {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

// Dense row-major double tensor. The gradient accumulator, when a tensor
// participates in differentiation, lives next to it in a tape node or a
// Parameter, never inside Tensor itself.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row_vector(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Tensor({1, n}, std::move(v));
  }
  static Tensor matrix(int rows, int cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  bool is_scalar() const { return numel() == 1; }

  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const {
    if (ndim() != 2) throw DimensionError("rows() on non-matrix " + shape_str(shape));
    return shape[0];
  }
  int cols() const {
    if (ndim() != 2) throw DimensionError("cols() on non-matrix " + shape_str(shape));
    return shape[1];
  }

  double& at(int i, int j) { return values[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return values[static_cast<size_t>(i) * cols() + j]; }

  const double* row_ptr(int i) const { return values.data() + static_cast<size_t>(i) * shape.back(); }
  double* row_ptr(int i) { return values.data() + static_cast<size_t>(i) * shape.back(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar " + shape_str(shape));
    return values[0];
  }
};

// Single deterministic dot-product path. Index scoring, search and the
// 0-ulp recompute tests all go through here.
inline double dot(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw DimensionError("dot of mismatched lengths " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
  return dot(a.data(), b.data(), static_cast<int>(a.size()));
}

}  // namespace retgen
