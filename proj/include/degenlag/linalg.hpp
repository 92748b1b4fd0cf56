#pragma once

// Small dense vectors and matrices. Every system in this library has dimension
// 2d <= 6, so storage is a flat row-major std::vector and algorithms are the
// textbook ones. The element type is a template parameter so that the same
// formulas run on plain doubles and on reverse-mode tape variables.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "degenlag/errors.hpp"

namespace degenlag {

template <class S>
using Vec = std::vector<S>;

template <class S>
class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols, S fill = S(0.0))
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), fill) {}

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = S(1.0);
    return m;
  }

  [[nodiscard]] int rows() const noexcept { return rows_; }
  [[nodiscard]] int cols() const noexcept { return cols_; }

  S& operator()(int i, int j) { return data_[static_cast<std::size_t>(i * cols_ + j)]; }
  const S& operator()(int i, int j) const {
    return data_[static_cast<std::size_t>(i * cols_ + j)];
  }

  [[nodiscard]] std::span<S> data() noexcept { return data_; }
  [[nodiscard]] std::span<const S> data() const noexcept { return data_; }

  [[nodiscard]] Mat block(int r0, int c0, int nr, int nc) const {
    Mat out(nr, nc);
    for (int i = 0; i < nr; ++i)
      for (int j = 0; j < nc; ++j) out(i, j) = (*this)(r0 + i, c0 + j);
    return out;
  }

  void set_block(int r0, int c0, const Mat& b) {
    for (int i = 0; i < b.rows(); ++i)
      for (int j = 0; j < b.cols(); ++j) (*this)(r0 + i, c0 + j) = b(i, j);
  }

  [[nodiscard]] Mat transpose() const {
    Mat out(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) out(j, i) = (*this)(i, j);
    return out;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<S> data_;
};

template <class S>
Vec<S> operator*(const Mat<S>& a, const Vec<S>& v) {
  assert(static_cast<std::size_t>(a.cols()) == v.size());
  Vec<S> out(static_cast<std::size_t>(a.rows()), S(0.0));
  for (int i = 0; i < a.rows(); ++i) {
    S acc(0.0);
    for (int j = 0; j < a.cols(); ++j) acc = acc + a(i, j) * v[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

template <class S>
Mat<S> operator*(const Mat<S>& a, const Mat<S>& b) {
  assert(a.cols() == b.rows());
  Mat<S> out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      S acc(0.0);
      for (int k = 0; k < a.cols(); ++k) acc = acc + a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

template <class S>
Mat<S> operator+(const Mat<S>& a, const Mat<S>& b) {
  Mat<S> out(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) + b(i, j);
  return out;
}

template <class S>
Mat<S> operator-(const Mat<S>& a, const Mat<S>& b) {
  Mat<S> out(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) - b(i, j);
  return out;
}

template <class S>
Vec<S> operator+(const Vec<S>& a, const Vec<S>& b) {
  assert(a.size() == b.size());
  Vec<S> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class S>
Vec<S> operator-(const Vec<S>& a, const Vec<S>& b) {
  assert(a.size() == b.size());
  Vec<S> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class S>
Vec<S> scaled(const Vec<S>& a, const S& c) {
  Vec<S> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = c * a[i];
  return out;
}

template <class S>
Vec<S> concat(const Vec<S>& a, const Vec<S>& b) {
  Vec<S> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

template <class S>
S squared_norm(const Vec<S>& a) {
  S acc(0.0);
  for (const auto& v : a) acc = acc + v * v;
  return acc;
}

inline double sup_norm(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline double sup_norm(const Mat<double>& a) { return sup_norm(a.data()); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

namespace detail {

/// In-place LU factorisation with partial pivoting; `perm[i]` is the source row of row i.
inline void lu_factor(Mat<double>& a, std::vector<int>& perm) {
  const int n = a.rows();
  perm.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int k = 0; k < n; ++k) {
    int p = k;
    for (int i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(p, k))) p = i;
    if (a(p, k) == 0.0 || !std::isfinite(a(p, k)))
      throw SingularMatrixError("zero pivot in LU factorisation",
                                std::numeric_limits<double>::infinity());
    if (p != k) {
      for (int j = 0; j < n; ++j) std::swap(a(k, j), a(p, j));
      std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(p)]);
    }
    for (int i = k + 1; i < n; ++i) {
      a(i, k) /= a(k, k);
      for (int j = k + 1; j < n; ++j) a(i, j) -= a(i, k) * a(k, j);
    }
  }
}

inline Vec<double> lu_solve(const Mat<double>& lu, const std::vector<int>& perm,
                            const Vec<double>& b) {
  const int n = lu.rows();
  Vec<double> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = b[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    for (int j = 0; j < i; ++j) s -= lu(i, j) * x[static_cast<std::size_t>(j)];
    x[static_cast<std::size_t>(i)] = s;
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = x[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) s -= lu(i, j) * x[static_cast<std::size_t>(j)];
    x[static_cast<std::size_t>(i)] = s / lu(i, i);
  }
  return x;
}

// Solves A^T x = b given the factorisation P A = L U.
inline Vec<double> lu_solve_transposed(const Mat<double>& lu, const std::vector<int>& perm,
                                       const Vec<double>& b) {
  const int n = lu.rows();
  Vec<double> w(static_cast<std::size_t>(n));
  // U^T w = b
  for (int i = 0; i < n; ++i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int j = 0; j < i; ++j) s -= lu(j, i) * w[static_cast<std::size_t>(j)];
    w[static_cast<std::size_t>(i)] = s / lu(i, i);
  }
  // L^T v = w
  for (int i = n - 1; i >= 0; --i) {
    double s = w[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) s -= lu(j, i) * w[static_cast<std::size_t>(j)];
    w[static_cast<std::size_t>(i)] = s;
  }
  Vec<double> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    x[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = w[static_cast<std::size_t>(i)];
  return x;
}

inline Eigen::MatrixXd to_eigen(const Mat<double>& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
  return m;
}

}  // namespace detail

/// Solves A x = b by LU with partial pivoting.
inline Vec<double> solve(const Mat<double>& a, const Vec<double>& b) {
  Mat<double> lu = a;
  std::vector<int> perm;
  detail::lu_factor(lu, perm);
  return detail::lu_solve(lu, perm, b);
}

/// Solves A^T x = b.
inline Vec<double> solve_transposed(const Mat<double>& a, const Vec<double>& b) {
  return solve(a.transpose(), b);
}

/// Spectral condition number sigma_max / sigma_min; infinity for singular input.
inline double condition_number(const Mat<double>& a) {
  if (!all_finite(a.data())) return std::numeric_limits<double>::infinity();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(detail::to_eigen(a));
  const auto& s = svd.singularValues();
  const double smin = s(s.size() - 1);
  if (smin == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / smin;
}

}  // namespace degenlag
