#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "crossmark/common.hpp"
#include "crossmark/rng.hpp"

namespace crossmark {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

// Dense row-major tensor. Images are stored H x W x C with values in [0,1],
// token sequences N x D; a leading batch dimension is used throughout the
// network code.
template <typename T>
struct Tensor {
  std::vector<i64> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<i64> s) : shape(std::move(s)), data(checked_numel(shape)) {}
  Tensor(std::vector<i64> s, T fill_value)
      : shape(std::move(s)), data(checked_numel(shape), fill_value) {}
  Tensor(std::vector<i64> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if ((i64)data.size() != checked_numel(shape))
      throw ShapeError("tensor data size does not match shape");
  }

  static i64 checked_numel(const std::vector<i64>& s) {
    i64 n = 1;
    for (i64 d : s) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  i64 numel() const { return (i64)data.size(); }
  i64 ndim() const { return (i64)shape.size(); }
  i64 dim(i64 i) const { return shape[(size_t)i]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(std::vector<i64> s) const {
    if (checked_numel(s) != numel()) throw ShapeError("reshape changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  // View of the whole tensor as a (rows x cols) row-major matrix.
  MatMap<T> mat(i64 rows, i64 cols) {
    if (rows * cols != numel()) throw ShapeError("matrix view size mismatch");
    return MatMap<T>(data.data(), rows, cols);
  }
  ConstMatMap<T> mat(i64 rows, i64 cols) const {
    if (rows * cols != numel()) throw ShapeError("matrix view size mismatch");
    return ConstMatMap<T>(data.data(), rows, cols);
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

  static Tensor zeros(std::vector<i64> s) { return Tensor(std::move(s), T(0)); }
  static Tensor full(std::vector<i64> s, T v) { return Tensor(std::move(s), v); }

  static Tensor randn(std::vector<i64> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (T& v : t.data) v = (T)rng.normal(0.0, stddev);
    return t;
  }
  static Tensor rand_uniform(std::vector<i64> s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (T& v : t.data) v = (T)rng.uniform(lo, hi);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = (U)data[i];
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

}  // namespace crossmark
