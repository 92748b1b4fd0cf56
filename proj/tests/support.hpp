#pragma once

// Shared helpers for the unit tests: random domain samples and finite differences.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "degenlag/core.hpp"
#include "degenlag/models.hpp"

namespace testing_support {

using degenlag::Mat;
using degenlag::PhaseState;
using degenlag::Vec;

inline PhaseState random_lv_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.3, 4.5);
  return PhaseState({u(rng)}, {u(rng)});
}

inline PhaseState random_mcp_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  return PhaseState({u(rng)}, {std::numbers::pi / 2 + u(rng)});
}

/// Tokamak-like points; `r_lo`, `r_hi` bound the minor radius.
inline PhaseState random_gc_point(std::mt19937_64& rng, double r_lo = 0.03, double r_hi = 0.055) {
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> rr(r_lo, r_hi);
  std::uniform_real_distribution<double> uu(-9e-4, 9e-4);
  return PhaseState({ang(rng), ang(rng)}, {rr(rng), uu(rng)});
}

/// Central difference of a vector-valued function of the stacked coordinates.
inline Mat<double> fd_jacobian(const std::function<Vec<double>(const Vec<double>&)>& f,
                               const Vec<double>& z, double step) {
  const Vec<double> f0 = f(z);
  Mat<double> j(static_cast<int>(f0.size()), static_cast<int>(z.size()));
  for (std::size_t k = 0; k < z.size(); ++k) {
    Vec<double> zp = z;
    Vec<double> zm = z;
    zp[k] += step;
    zm[k] -= step;
    const Vec<double> fp = f(zp);
    const Vec<double> fm = f(zm);
    for (std::size_t i = 0; i < f0.size(); ++i)
      j(static_cast<int>(i), static_cast<int>(k)) = (fp[i] - fm[i]) / (2.0 * step);
  }
  return j;
}

/// max_ij |a - b| / (|b_ij| + floor * max|b|), a scale-aware relative error.
inline double relative_error(const Mat<double>& a, const Mat<double>& b, double floor = 1e-3) {
  double scale = 0.0;
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int k = 0; k < a.cols(); ++k) {
      const double denom = std::abs(b(i, k)) + floor * scale;
      const double diff = std::abs(a(i, k) - b(i, k));
      if (diff == 0.0) continue;
      worst = std::max(worst, denom > 0.0 ? diff / denom : diff);
    }
  return worst;
}

inline Mat<double> as_row(const Vec<double>& v) {
  Mat<double> m(1, static_cast<int>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<int>(i)) = v[i];
  return m;
}

inline double relative_error(const Vec<double>& a, const Vec<double>& b, double floor = 1e-3) {
  return relative_error(as_row(a), as_row(b), floor);
}

inline double max_abs_diff(const Vec<double>& a, const Vec<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing_support
