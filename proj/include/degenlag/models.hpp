#pragma once

// Analytic reference systems with hand-derived derivatives up to order two.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>

#include "degenlag/core.hpp"
#include "degenlag/quadrature.hpp"
#include "degenlag/trajectory.hpp"

namespace degenlag {

/// x' = x(1 - y), y' = y(x - 2) with theta = -ln(y)/x, H = x + y - 2 ln x - ln y.
class LotkaVolterraModel final : public DegenerateModel {
 public:
  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    const double x = z.x()[0];
    const double y = z.y()[0];
    if (!(x > 0.0 && y > 0.0)) throw DomainError("Lotka-Volterra requires x > 0 and y > 0");
    const double lny = std::log(y);
    ModelEvaluation<double> e(1, order);
    e.theta[0] = -lny / x;
    e.hamiltonian = x + y - 2.0 * std::log(x) - lny;
    if (order == EvalOrder::Value) return e;
    e.jac_theta(0, 0) = lny / (x * x);
    e.jac_theta(0, 1) = -1.0 / (x * y);
    e.grad_h = {1.0 - 2.0 / x, 1.0 - 1.0 / y};
    if (order != EvalOrder::Second) return e;
    Mat<double>& t = e.hess_theta[0];
    t(0, 0) = -2.0 * lny / (x * x * x);
    t(0, 1) = t(1, 0) = 1.0 / (x * x * y);
    t(1, 1) = 1.0 / (x * y * y);
    e.hess_h(0, 0) = 2.0 / (x * x);
    e.hess_h(1, 1) = 1.0 / (y * y);
    return e;
  }

  [[nodiscard]] int dimension() const override { return 1; }
  [[nodiscard]] std::string name() const override { return "lotka-volterra"; }
};

/// Massless charged particle: theta = -A0 y (1 + 2x^2 + 2y^2/3), H = E0 (2 - cos x - sin y).
class MasslessParticleModel final : public DegenerateModel {
 public:
  explicit MasslessParticleModel(double a0 = 1.0, double e0 = 1.0) : a0_(a0), e0_(e0) {
    if (a0 == 0.0) throw ConfigError("magnetic amplitude A0 must be non-zero");
  }

  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    const double x = z.x()[0];
    const double y = z.y()[0];
    ModelEvaluation<double> e(1, order);
    e.theta[0] = -a0_ * y * (1.0 + 2.0 * x * x + 2.0 * y * y / 3.0);
    e.hamiltonian = e0_ * (2.0 - std::cos(x) - std::sin(y));
    if (order == EvalOrder::Value) return e;
    e.jac_theta(0, 0) = -4.0 * a0_ * x * y;
    e.jac_theta(0, 1) = -a0_ * (1.0 + 2.0 * x * x + 2.0 * y * y);
    e.grad_h = {e0_ * std::sin(x), -e0_ * std::cos(y)};
    if (order != EvalOrder::Second) return e;
    Mat<double>& t = e.hess_theta[0];
    t(0, 0) = -4.0 * a0_ * y;
    t(0, 1) = t(1, 0) = -4.0 * a0_ * x;
    t(1, 1) = -4.0 * a0_ * y;
    e.hess_h(0, 0) = e0_ * std::cos(x);
    e.hess_h(1, 1) = e0_ * std::sin(y);
    return e;
  }

  /// Magnetic field magnitude B = -d theta / dy.
  [[nodiscard]] double magnetic_field(double x, double y) const {
    return a0_ * (1.0 + 2.0 * x * x + 2.0 * y * y);
  }

  [[nodiscard]] int dimension() const override { return 1; }
  [[nodiscard]] std::string name() const override { return "massless-particle"; }
  [[nodiscard]] double a0() const noexcept { return a0_; }
  [[nodiscard]] double e0() const noexcept { return e0_; }

 private:
  double a0_;
  double e0_;
};

// ---------------------------------------------------------------------------
// Guiding center in a circular tokamak.

struct GuidingCenterParams {
  double b0 = 1.0;
  double r0 = 1.0;
  double q0 = 2.0;
  double mu = 2.25e-6;
  int quadrature_points = 20;
};

/// Period of the deeply trapped reference orbit for the default parameters.
inline constexpr double kGuidingCenterPeriodDT = 37974.6;

/// Below this |cos(theta)| the poloidal potential uses the integral form.
inline constexpr double kIntegralFormThreshold = 0.2;

struct PoloidalPotential {
  double a_theta = 0.0;        // A_theta
  double a_theta_theta = 0.0;  // d A_theta / d theta
};

/// A_theta = B0 r^2 int_0^1 t/(1+rho t) dt and A_theta,theta = B0 r^2 Z int_0^1 t^2/(1+rho t)^2 dt.
inline PoloidalPotential gc_a_theta_integral(double r, double theta, const GaussLegendre& rule,
                                             double b0 = 1.0, double r0 = 1.0) {
  const double rho = r * std::cos(theta) / r0;
  const double zz = r * std::sin(theta) / r0;
  if (!(1.0 + std::min(rho, 0.0) > 0.0))
    throw DomainError("poloidal potential integrand has non-positive denominator");
  const double i1 = rule.integrate([rho](double t) { return t / (1.0 + rho * t); });
  const double i2 = rule.integrate([rho](double t) {
    const double q = 1.0 + rho * t;
    return t * t / (q * q);
  });
  return {b0 * r * r * i1, b0 * r * r * zz * i2};
}

inline PoloidalPotential gc_a_theta_integral(double r, double theta, int n_points, double b0 = 1.0,
                                             double r0 = 1.0) {
  if (n_points < 10) throw ConfigError("poloidal potential quadrature needs at least 10 points");
  return gc_a_theta_integral(r, theta, GaussLegendre(n_points), b0, r0);
}

/// Closed formulas for A_theta and A_theta,theta; inaccurate when rho is small.
inline PoloidalPotential gc_a_theta_closed(double r, double theta, double b0 = 1.0,
                                           double r0 = 1.0) {
  const double rho = r * std::cos(theta) / r0;
  const double zz = r * std::sin(theta) / r0;
  const double l = std::log1p(rho);
  const double i1 = (rho - l) / (rho * rho);
  const double i2 = (rho * (2.0 + rho) / (1.0 + rho) - 2.0 * l) / (rho * rho * rho);
  return {b0 * r * r * i1, b0 * r * r * zz * i2};
}

/// z = (theta, phi, r, u), x = (theta, phi), y = (r, u).
/// theta-potential = (A_theta(r, theta), A_phi(r) + u (R0 + r cos theta)), H = u^2/2 + mu B.
class GuidingCenterModel final : public DegenerateModel {
 public:
  explicit GuidingCenterModel(GuidingCenterParams p = {})
      : p_(p), rule_(p.quadrature_points) {
    if (p.quadrature_points < 10) throw ConfigError("quadrature_points must be at least 10");
  }

  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    const double th = z.x()[0];
    const double r = z.y()[0];
    const double u = z.y()[1];
    const double c = std::cos(th);
    const double s = std::sin(th);
    const double rho = r * c / p_.r0;
    const double zz = r * s / p_.r0;
    if (!(1.0 + rho > 0.0)) throw DomainError("guiding center requires 1 + r cos(theta)/R0 > 0");
    const double b0 = p_.b0;
    const double big_r = p_.r0 + r * c;

    const PoloidalPotential pot = std::abs(c) < kIntegralFormThreshold
                                      ? gc_a_theta_integral(r, th, rule_, b0, p_.r0)
                                      : gc_a_theta_closed(r, th, b0, p_.r0);
    const double pinv = 1.0 / (1.0 + rho);
    const double qr2 = (p_.q0 * p_.r0) * (p_.q0 * p_.r0);
    const double sq = std::sqrt(1.0 + r * r / qr2);
    const double field = b0 * sq * pinv;

    ModelEvaluation<double> e(2, order);
    e.theta[0] = pot.a_theta;
    e.theta[1] = -b0 * r * r / (2.0 * p_.q0) + u * big_r;
    e.hamiltonian = 0.5 * u * u + p_.mu * field;
    if (order == EvalOrder::Value) return e;

    // Indices: 0 theta, 1 phi, 2 r, 3 u.
    const double p_r = -(c / p_.r0) * pinv * pinv;
    const double p_th = zz * pinv * pinv;
    const double s1 = r / (qr2 * sq);
    const double b_r = b0 * (s1 * pinv + sq * p_r);
    const double b_th = b0 * sq * p_th;

    e.jac_theta(0, 0) = pot.a_theta_theta;
    e.jac_theta(0, 2) = b0 * r * pinv;
    e.jac_theta(1, 0) = -u * r * s;
    e.jac_theta(1, 2) = -b0 * r / p_.q0 + u * c;
    e.jac_theta(1, 3) = big_r;
    e.grad_h = {p_.mu * b_th, 0.0, p_.mu * b_r, u};
    if (order != EvalOrder::Second) return e;

    const double i3 = rule_.integrate([rho](double t) {
      const double q = 1.0 + rho * t;
      return t * t * t / (q * q * q);
    });
    const double i2 = std::abs(c) < kIntegralFormThreshold
                          ? rule_.integrate([rho](double t) {
                              const double q = 1.0 + rho * t;
                              return t * t / (q * q);
                            })
                          : (rho * (2.0 + rho) / (1.0 + rho) - 2.0 * std::log1p(rho)) /
                                (rho * rho * rho);
    Mat<double>& a = e.hess_theta[0];
    a(0, 0) = b0 * r * r * (rho * i2 + 2.0 * zz * zz * i3);
    a(0, 2) = a(2, 0) = b0 * r * zz * pinv * pinv;
    a(2, 2) = b0 * pinv * pinv;

    Mat<double>& f = e.hess_theta[1];
    f(0, 0) = -u * r * c;
    f(0, 2) = f(2, 0) = -u * s;
    f(0, 3) = f(3, 0) = -r * s;
    f(2, 2) = -b0 / p_.q0;
    f(2, 3) = f(3, 2) = c;

    const double s2 = 1.0 / (qr2 * sq * sq * sq);
    const double p_rr = 2.0 * (c / p_.r0) * (c / p_.r0) * pinv * pinv * pinv;
    const double p_rth = (s / p_.r0) * pinv * pinv - 2.0 * (c / p_.r0) * zz * pinv * pinv * pinv;
    const double p_thth = rho * pinv * pinv + 2.0 * zz * zz * pinv * pinv * pinv;
    const double b_rr = b0 * (s2 * pinv + 2.0 * s1 * p_r + sq * p_rr);
    const double b_rth = b0 * (s1 * p_th + sq * p_rth);
    const double b_thth = b0 * sq * p_thth;
    e.hess_h(0, 0) = p_.mu * b_thth;
    e.hess_h(0, 2) = e.hess_h(2, 0) = p_.mu * b_rth;
    e.hess_h(2, 2) = p_.mu * b_rr;
    e.hess_h(3, 3) = 1.0;
    return e;
  }

  /// |B| at (r, theta).
  [[nodiscard]] double magnetic_field(double r, double theta) const {
    const double rho = r * std::cos(theta) / p_.r0;
    const double rt = r / (p_.q0 * p_.r0);
    return p_.b0 / (1.0 + rho) * std::sqrt(1.0 + rt * rt);
  }

  [[nodiscard]] int dimension() const override { return 2; }
  [[nodiscard]] std::string name() const override { return "guiding-center"; }
  [[nodiscard]] const GuidingCenterParams& params() const noexcept { return p_; }

 private:
  GuidingCenterParams p_;
  GaussLegendre rule_;
};

struct NamedOrbit {
  const char* name;
  double u0;
};

/// Barely passing, barely trapped, well trapped and deeply trapped orbits from r = 0.05, theta = phi = 0.
inline constexpr NamedOrbit kGuidingCenterOrbits[] = {
    {"BP", -7.782e-4}, {"BT", -7.610e-4}, {"WT", -7.487e-4}, {"DT", -4.306e-4}};

inline PhaseState gc_initial_state(double u0, double r0 = 0.05) {
  return PhaseState({0.0, 0.0}, {r0, u0});
}

enum class OrbitClass { Passing, Trapped };

inline const char* to_string(OrbitClass c) { return c == OrbitClass::Passing ? "passing" : "trapped"; }

/// Trapped iff the parallel velocity u changes sign somewhere along the trajectory.
inline OrbitClass gc_classify_trajectory(const Trajectory& traj) {
  if (traj.size() < 2) throw ConfigError("classification needs at least two states");
  const double first = traj.states.front().y()[1];
  for (const auto& z : traj.states) {
    const double u = z.y()[1];
    if ((first < 0.0 && u > 0.0) || (first > 0.0 && u < 0.0) || (first == 0.0 && u != 0.0))
      return OrbitClass::Trapped;
  }
  return OrbitClass::Passing;
}

// ---------------------------------------------------------------------------
// Canonical systems theta(x, y) = y.

/// H and its derivatives up to order two, in stacked coordinates.
struct HamiltonianFunction {
  struct Eval {
    double value = 0.0;
    Vec<double> gradient;
    Mat<double> hessian;
  };
  int d = 1;
  std::function<Eval(const Vec<double>& z)> evaluate;
};

/// H = |z|^2 / 2.
inline HamiltonianFunction quadratic_hamiltonian(int d = 1) {
  return {d, [d](const Vec<double>& z) {
            HamiltonianFunction::Eval e;
            e.value = 0.5 * squared_norm(z);
            e.gradient = z;
            e.hessian = Mat<double>::identity(2 * d);
            return e;
          }};
}

class CanonicalModel final : public DegenerateModel {
 public:
  explicit CanonicalModel(HamiltonianFunction h) : h_(std::move(h)) {}

  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    const int d = h_.d;
    const Vec<double> zz = z.to_vector();
    const HamiltonianFunction::Eval he = h_.evaluate(zz);
    ModelEvaluation<double> e(d, order);
    e.theta = z.y();
    e.hamiltonian = he.value;
    if (order == EvalOrder::Value) return e;
    for (int i = 0; i < d; ++i) e.jac_theta(i, d + i) = 1.0;
    e.grad_h = he.gradient;
    if (order == EvalOrder::Second) e.hess_h = he.hessian;
    return e;
  }

  [[nodiscard]] int dimension() const override { return h_.d; }
  [[nodiscard]] std::string name() const override { return "canonical"; }

 private:
  HamiltonianFunction h_;
};

/// Wraps a Hamiltonian as the degenerate model with theta(x, y) = y.
inline ModelPtr canonical_wrapper(HamiltonianFunction h) {
  return std::make_shared<CanonicalModel>(std::move(h));
}

}  // namespace degenlag
