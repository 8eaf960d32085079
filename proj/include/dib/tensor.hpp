#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dib/errors.hpp"

namespace dib {

/// Dense row-major tensor of 64-bit reals.
///
/// Only rank 0..2 is used in practice: scalars, row vectors and [rows x cols]
/// matrices. The data length always equals the product of the shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(count(shape), fill) {}

  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != count(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape product " + std::to_string(count(shape)));
    }
  }

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    Tensor t = matrix(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionError("ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    return t;
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }

  /// Rows of a matrix view: rank-1 tensors are a single row, scalars 1x1.
  std::size_t rows() const noexcept { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const noexcept {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    return 1;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  double item() const {
    if (data.size() != 1) throw DimensionError("item() on non-scalar tensor");
    return data[0];
  }

  bool all_finite() const noexcept {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& o) const noexcept { return shape == o.shape; }

  Tensor zeros_like() const { return Tensor(shape, 0.0); }

  /// Rows selected by index, in the given order.
  Tensor gather_rows(std::span<const std::size_t> idx) const {
    Tensor out = matrix(idx.size(), cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace dib
