#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "degenlag/autodiff.hpp"
#include "degenlag/errors.hpp"
#include "degenlag/linalg.hpp"

namespace degenlag {

/// Largest condition number of D_y theta still treated as invertible.
inline constexpr double kConditionThreshold = 1e12;

/// A point z = (x, y) of the 2d-dimensional phase space.
class PhaseState {
 public:
  PhaseState() = default;

  PhaseState(Vec<double> x, Vec<double> y) : x_(std::move(x)), y_(std::move(y)) {
    if (x_.empty() || x_.size() != y_.size())
      throw DomainError("PhaseState halves must have equal non-zero length");
    if (!all_finite(x_) || !all_finite(y_)) throw DomainError("PhaseState has non-finite entries");
  }

  /// Splits a stacked vector z of even length into (x, y).
  static PhaseState from_vector(std::span<const double> z) {
    if (z.size() % 2 != 0) throw DomainError("phase-space vector must have even length");
    const std::size_t d = z.size() / 2;
    return {Vec<double>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(d)),
            Vec<double>(z.begin() + static_cast<std::ptrdiff_t>(d), z.end())};
  }

  [[nodiscard]] int dim() const noexcept { return static_cast<int>(x_.size()); }
  [[nodiscard]] const Vec<double>& x() const noexcept { return x_; }
  [[nodiscard]] const Vec<double>& y() const noexcept { return y_; }
  [[nodiscard]] Vec<double> to_vector() const { return concat(x_, y_); }

 private:
  Vec<double> x_;
  Vec<double> y_;
};

enum class EvalOrder { Value, First, Second };

/// theta, H and their derivatives at one point. Coordinates are ordered
/// z = (x_1..x_d, y_1..y_d); Jacobians are taken with respect to all of z.
template <class S>
struct ModelEvaluation {
  int d = 0;
  Vec<S> theta;           // length d
  S hamiltonian{};        //
  Mat<S> jac_theta;       // d x 2d, (i, k) = d theta_i / d z_k
  Vec<S> grad_h;          // length 2d
  bool has_second = false;
  std::vector<Mat<S>> hess_theta;  // d matrices of 2d x 2d
  Mat<S> hess_h;                   // 2d x 2d

  ModelEvaluation() = default;
  ModelEvaluation(int dim, EvalOrder order)
      : d(dim),
        theta(static_cast<std::size_t>(dim), S(0.0)),
        hamiltonian(0.0),
        jac_theta(dim, 2 * dim),
        grad_h(static_cast<std::size_t>(2 * dim), S(0.0)),
        has_second(order == EvalOrder::Second) {
    if (has_second) {
      hess_theta.assign(static_cast<std::size_t>(dim), Mat<S>(2 * dim, 2 * dim));
      hess_h = Mat<S>(2 * dim, 2 * dim);
    }
  }

  [[nodiscard]] Mat<S> d_x_theta() const { return jac_theta.block(0, 0, d, d); }
  [[nodiscard]] Mat<S> d_y_theta() const { return jac_theta.block(0, d, d, d); }
  [[nodiscard]] Vec<S> grad_x_h() const { return {grad_h.begin(), grad_h.begin() + d}; }
  [[nodiscard]] Vec<S> grad_y_h() const { return {grad_h.begin() + d, grad_h.end()}; }
};

/// A system with properly degenerate Lagrangian L = theta(x, y) . x_t - H(x, y).
class DegenerateModel {
 public:
  virtual ~DegenerateModel() = default;

  /// Evaluation at order Second also fills every first-order field.
  [[nodiscard]] virtual ModelEvaluation<double> evaluate(const PhaseState& z,
                                                         EvalOrder order) const = 0;
  [[nodiscard]] virtual int dimension() const = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

using ModelPtr = std::shared_ptr<const DegenerateModel>;

/// Throws SingularMatrixError when `a` is not safely invertible.
inline void require_invertible(const Mat<double>& a, const char* what) {
  const double c = condition_number(a);
  if (!(c < kConditionThreshold))
    throw SingularMatrixError(std::string(what) + " is singular to working precision", c);
}

/// W = [[D_x theta^T - D_x theta, -D_y theta], [D_y theta^T, 0]].
template <class S>
Mat<S> symplectic_form(const ModelEvaluation<S>& e) {
  const int d = e.d;
  Mat<S> w(2 * d, 2 * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      w(i, j) = e.jac_theta(j, i) - e.jac_theta(i, j);
      w(i, d + j) = -e.jac_theta(i, d + j);
      w(d + i, j) = e.jac_theta(j, d + i);
    }
  return w;
}

inline Mat<double> symplectic_form(const DegenerateModel& model, const PhaseState& z) {
  return symplectic_form(model.evaluate(z, EvalOrder::First));
}

/// Solves W z_t = grad H: x_t = D_y theta^{-T} grad_y H and
/// y_t = D_y theta^{-1} ((D_x theta^T - D_x theta) x_t - grad_x H).
template <class S>
Vec<S> vector_field(const ModelEvaluation<S>& e) {
  using ad::solve;
  using ad::solve_transposed;
  const Mat<S> dy = e.d_y_theta();
  require_invertible(ad::values(dy), "D_y theta");
  const Mat<S> dx = e.d_x_theta();
  const Vec<S> xdot = solve_transposed(dy, e.grad_y_h());
  const Vec<S> rhs = (dx.transpose() - dx) * xdot - e.grad_x_h();
  const Vec<S> ydot = solve(dy, rhs);
  return concat(xdot, ydot);
}

inline Vec<double> vector_field(const DegenerateModel& model, const PhaseState& z) {
  return vector_field(model.evaluate(z, EvalOrder::First));
}

/// Right-hand side of an ODE in stacked coordinates.
using VectorField = std::function<Vec<double>(const Vec<double>&)>;

inline VectorField field_of(ModelPtr model) {
  return [m = std::move(model)](const Vec<double>& z) {
    return vector_field(*m, PhaseState::from_vector(z));
  };
}

// ---------------------------------------------------------------------------
// Gauge transformations theta <- theta + g(x).

/// A map g: x -> R^d with symmetric Jacobian, with derivatives up to order two.
struct GaugeFunction {
  struct Eval {
    Vec<double> value;             // d
    Mat<double> jacobian;          // d x d
    std::vector<Mat<double>> hessian;  // d matrices d x d
  };
  std::function<Eval(const Vec<double>& x)> evaluate;
};

/// g(x) = amplitude * cos(frequency * x) for d = 1.
inline GaugeFunction cosine_gauge(double amplitude = 0.5, double frequency = 2.0) {
  return {[amplitude, frequency](const Vec<double>& x) {
    const double a = frequency * x[0];
    GaugeFunction::Eval e;
    e.value = {amplitude * std::cos(a)};
    e.jacobian = Mat<double>(1, 1, -amplitude * frequency * std::sin(a));
    e.hessian = {Mat<double>(1, 1, -amplitude * frequency * frequency * std::cos(a))};
    return e;
  }};
}

inline GaugeFunction zero_gauge(int d) {
  return {[d](const Vec<double>&) {
    GaugeFunction::Eval e;
    e.value.assign(static_cast<std::size_t>(d), 0.0);
    e.jacobian = Mat<double>(d, d);
    e.hessian.assign(static_cast<std::size_t>(d), Mat<double>(d, d));
    return e;
  }};
}

class GaugePerturbedModel final : public DegenerateModel {
 public:
  GaugePerturbedModel(ModelPtr base, GaugeFunction g) : base_(std::move(base)), g_(std::move(g)) {}

  [[nodiscard]] ModelEvaluation<double> evaluate(const PhaseState& z,
                                                 EvalOrder order) const override {
    ModelEvaluation<double> e = base_->evaluate(z, order);
    const GaugeFunction::Eval ge = g_.evaluate(z.x());
    const int d = e.d;
    for (int i = 0; i < d; ++i) {
      e.theta[static_cast<std::size_t>(i)] += ge.value[static_cast<std::size_t>(i)];
      if (order == EvalOrder::Value) continue;
      for (int j = 0; j < d; ++j) e.jac_theta(i, j) += ge.jacobian(i, j);
      if (!e.has_second) continue;
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b)
          e.hess_theta[static_cast<std::size_t>(i)](a, b) +=
              ge.hessian[static_cast<std::size_t>(i)](a, b);
    }
    return e;
  }

  [[nodiscard]] int dimension() const override { return base_->dimension(); }
  [[nodiscard]] std::string name() const override { return base_->name() + "+gauge"; }

 private:
  ModelPtr base_;
  GaugeFunction g_;
};

/// theta <- theta + g(x), H unchanged. The continuous vector field is invariant.
inline ModelPtr gauge_perturb(ModelPtr model, GaugeFunction g) {
  return std::make_shared<GaugePerturbedModel>(std::move(model), std::move(g));
}

}  // namespace degenlag
