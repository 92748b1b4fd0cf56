#pragma once

// Two-parameter Lotka-Volterra family used as a small trainable model:
// theta = -a ln(y) / x and H = x + y - 2 ln x - b ln y; (a, b) = (1, 1) is exact.

#include <array>
#include <string>

#include "degenlag/autodiff.hpp"
#include "degenlag/core.hpp"
#include "degenlag/nn.hpp"

namespace testing_support {

class ToyLotkaVolterra final : public degenlag::TrainableModel {
 public:
  ToyLotkaVolterra(double a, double b) : p_{a, b} {}

  [[nodiscard]] degenlag::ModelEvaluation<double> evaluate(const degenlag::PhaseState& z,
                                                           degenlag::EvalOrder order) const override {
    return build<double>(z, order, p_[0], p_[1]);
  }

  [[nodiscard]] degenlag::ModelEvaluation<degenlag::ad::Var> evaluate_traced(
      const degenlag::PhaseState& z, degenlag::EvalOrder order,
      degenlag::ParameterTrace& trace) const override {
    using degenlag::ad::Var;
    const Var a = Var::independent(p_[0]);
    const Var b = Var::independent(p_[1]);
    trace.leaves.emplace_back(a.node, 0);
    trace.leaves.emplace_back(b.node, 1);
    return build<Var>(z, order, a, b);
  }

  [[nodiscard]] std::span<const double> parameters() const override { return p_; }
  void set_parameters(std::span<const double> p) override {
    p_[0] = p[0];
    p_[1] = p[1];
  }
  [[nodiscard]] int dimension() const override { return 1; }
  [[nodiscard]] std::string name() const override { return "toy-lotka-volterra"; }

 private:
  template <class S>
  static degenlag::ModelEvaluation<S> build(const degenlag::PhaseState& z, degenlag::EvalOrder order,
                                            const S& a, const S& b) {
    using namespace degenlag;
    using J = ad::Jet<S>;
    const bool second = order == EvalOrder::Second;
    const J x = J::variable(S(z.x()[0]), 0, 2, second);
    const J y = J::variable(S(z.y()[0]), 1, 2, second);
    const J theta = S(-1.0) * a * (log(y) * reciprocal(x));
    const J h = x + y + S(-2.0) * log(x) + S(-1.0) * b * log(y);
    ModelEvaluation<S> e(1, order);
    e.theta[0] = theta.v;
    e.hamiltonian = h.v;
    if (order == EvalOrder::Value) return e;
    for (int k = 0; k < 2; ++k) {
      e.jac_theta(0, k) = theta.g[static_cast<std::size_t>(k)];
      e.grad_h[static_cast<std::size_t>(k)] = h.g[static_cast<std::size_t>(k)];
    }
    if (!second) return e;
    for (int p = 0; p < 2; ++p)
      for (int q = 0; q < 2; ++q) {
        const auto k = static_cast<std::size_t>(ad::hess_index(p, q));
        e.hess_theta[0](p, q) = theta.h[k];
        e.hess_h(p, q) = h.h[k];
      }
    return e;
  }

  std::array<double, 2> p_;
};

}  // namespace testing_support
