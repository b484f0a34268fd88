#pragma once

// Dense row-major kernels in double precision. Every reduction runs
// left-to-right over its index so results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dpnet/errors.hpp"

namespace dpnet {

inline constexpr double kNormEps = 1e-12;

using Vec = std::vector<double>;

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ContractError("Mat: data length " + std::to_string(data_.size()) +
                          " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vec column(std::size_t c) const {
    Vec out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ContractError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
  }
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

/// y = m * x
inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw ContractError("matvec: shape mismatch " + m.shape() + " x " + std::to_string(x.size()));
  }
  Vec out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), x);
  return out;
}

inline Vec softmax(std::span<const double> v) {
  if (v.empty()) throw ContractError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline Mat column_softmax(const Mat& m) {
  if (m.empty()) throw ContractError("column_softmax: empty matrix " + m.shape());
  Mat out(m.rows(), m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double mx = m(0, c);
    for (std::size_t r = 1; r < m.rows(); ++r) mx = std::max(mx, m(r, c));
    double sum = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      out(r, c) = std::exp(m(r, c) - mx);
      sum += out(r, c);
    }
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) /= sum;
  }
  return out;
}

/// Returns v / ||v|| when ||v|| > eps, otherwise v unchanged.
inline Vec l2_normalize(std::span<const double> v, double eps = kNormEps) {
  if (v.empty()) throw ContractError("l2_normalize: empty input");
  Vec out(v.begin(), v.end());
  const double n = norm2(v);
  if (n > eps) {
    for (double& x : out) x /= n;
  }
  return out;
}

/// Row-wise L2 normalization; also returns the original row norms.
inline Mat normalize_rows(const Mat& m, Vec* norms = nullptr, double eps = kNormEps) {
  Mat out = m;
  if (norms) norms->assign(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = norm2(m.row(r));
    if (norms) (*norms)[r] = n;
    if (n > eps) {
      for (double& x : out.row(r)) x /= n;
    }
  }
  return out;
}

}  // namespace dpnet
