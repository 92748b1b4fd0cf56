#pragma once

#include <cstddef>
#include <vector>

#include "degenlag/core.hpp"

namespace degenlag {

/// Discrete solution with per-step diagnostics. All per-step vectors have the
/// same length as `times`; entry 0 describes the initial state.
struct Trajectory {
  std::vector<double> times;
  std::vector<PhaseState> states;
  std::vector<int> newton_iterations;
  std::vector<double> residuals;
  std::vector<double> energy;            // the model's own H
  std::vector<double> reference_energy;  // optional ground-truth H, empty if absent
  bool diverged = false;

  [[nodiscard]] std::size_t size() const noexcept { return states.size(); }

  void push(double t, PhaseState z, int iterations, double residual, double h) {
    times.push_back(t);
    states.push_back(std::move(z));
    newton_iterations.push_back(iterations);
    residuals.push_back(residual);
    energy.push_back(h);
  }
};

}  // namespace degenlag
