#pragma once

// Explicit Runge-Kutta steppers, the Dormand-Prince reference solver and the
// first-order degenerate variational integrator (DVI).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "degenlag/core.hpp"
#include "degenlag/trajectory.hpp"

namespace degenlag {

struct NewtonConfig {
  double abs_tol = 1e-11;  // sup-norm of the scheme residual
  int max_iter = 50;
  double damping = 1.0;
  int max_halvings = 12;

  void validate() const {
    if (!(abs_tol > 0.0)) throw ConfigError("Newton abs_tol must be positive");
    if (max_iter < 1) throw ConfigError("Newton max_iter must be at least 1");
    if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("Newton damping must lie in (0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Explicit steppers.

inline Vec<double> euler_step(const VectorField& f, const Vec<double>& z, double h) {
  return z + scaled(f(z), h);
}

inline Vec<double> rk4_step(const VectorField& f, const Vec<double>& z, double h) {
  const Vec<double> k1 = f(z);
  const Vec<double> k2 = f(z + scaled(k1, 0.5 * h));
  const Vec<double> k3 = f(z + scaled(k2, 0.5 * h));
  const Vec<double> k4 = f(z + scaled(k3, h));
  Vec<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

inline PhaseState rk4_step(const DegenerateModel& model, const PhaseState& z, double h) {
  const VectorField f = [&model](const Vec<double>& v) {
    return vector_field(model, PhaseState::from_vector(v));
  };
  return PhaseState::from_vector(rk4_step(f, z.to_vector(), h));
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4) with PI step-size control and dense output.

struct ReferenceOptions {
  double rtol = 1e-10;
  double atol = 1e-12;
  double initial_step = 0.0;  // 0 selects automatically
  long max_steps = 50'000'000;
};

namespace detail {

inline double error_norm(const Vec<double>& err, const Vec<double>& y0, const Vec<double>& y1,
                         const ReferenceOptions& o) {
  double acc = 0.0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const double sk = o.atol + o.rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    acc += (err[i] / sk) * (err[i] / sk);
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

inline double initial_step(const VectorField& f, const Vec<double>& y, const Vec<double>& f0,
                           double span, const ReferenceOptions& o) {
  double d0 = 0.0;
  double d1 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double sk = o.atol + o.rtol * std::abs(y[i]);
    d0 += (y[i] / sk) * (y[i] / sk);
    d1 += (f0[i] / sk) * (f0[i] / sk);
  }
  d0 = std::sqrt(d0 / static_cast<double>(y.size()));
  d1 = std::sqrt(d1 / static_cast<double>(y.size()));
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, span);
  const Vec<double> f1 = f(y + scaled(f0, h0));
  double d2 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double sk = o.atol + o.rtol * std::abs(y[i]);
    d2 += ((f1[i] - f0[i]) / sk) * ((f1[i] - f0[i]) / sk);
  }
  d2 = std::sqrt(d2 / static_cast<double>(y.size())) / h0;
  const double dm = std::max(d1, d2);
  const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
  return std::min({100.0 * h0, h1, span});
}

}  // namespace detail

/// Integrates z' = f(z) from t0 and returns the state at each of `t_out`
/// (ascending, all >= t0) using dense output between accepted steps.
inline std::vector<Vec<double>> dopri5(const VectorField& f, const Vec<double>& z0, double t0,
                                       const std::vector<double>& t_out,
                                       const ReferenceOptions& o = {}) {
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                   a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                   a76 = 11.0 / 84;
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                   e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                   d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                   d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
  constexpr double beta = 0.04, safe = 0.9, facl = 0.2, facr = 10.0;
  const double expo1 = 0.2 - beta * 0.75;

  std::vector<Vec<double>> out;
  out.reserve(t_out.size());
  if (t_out.empty()) return out;
  if (!std::is_sorted(t_out.begin(), t_out.end()) || t_out.front() < t0)
    throw ConfigError("output times must be ascending and not before the start time");

  const std::size_t n = z0.size();
  const double t_end = t_out.back();
  std::size_t next = 0;
  while (next < t_out.size() && t_out[next] == t0) {
    out.push_back(z0);
    ++next;
  }
  if (next == t_out.size()) return out;

  Vec<double> y = z0;
  Vec<double> k1 = f(y);
  double t = t0;
  double h = o.initial_step > 0.0 ? o.initial_step : detail::initial_step(f, y, k1, t_end - t0, o);
  double facold = 1e-4;
  bool last_rejected = false;
  Vec<double> k2, k3, k4, k5, k6, k7, ys(n), y1(n), err(n);

  for (long step = 0; step < o.max_steps; ++step) {
    if (t + 1.01 * h >= t_end) h = t_end - t;
    if (h < 1e-14 * std::max(1.0, std::abs(t)))
      throw NumericalError("step-size underflow in reference solver");
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[i] + h * a21 * k1[i];
    k2 = f(ys);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    k3 = f(ys);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    k4 = f(ys);
    for (std::size_t i = 0; i < n; ++i)
      ys[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    k5 = f(ys);
    for (std::size_t i = 0; i < n; ++i)
      ys[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    k6 = f(ys);
    for (std::size_t i = 0; i < n; ++i)
      y1[i] = y[i] + h * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] + a75 * k5[i] + a76 * k6[i]);
    k7 = f(y1);
    for (std::size_t i = 0; i < n; ++i)
      err[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
    const double e = detail::error_norm(err, y, y1, o);
    if (!std::isfinite(e)) {
      h *= 0.1;
      last_rejected = true;
      continue;
    }

    const double fac11 = std::pow(e, expo1);
    if (e <= 1.0) {
      const double fac = std::clamp(fac11 / std::pow(facold, beta) / safe, 1.0 / facr, 1.0 / facl);
      facold = std::max(e, 1e-4);
      const double t_new = t + h;
      // Dense output on [t, t_new].
      while (next < t_out.size() && t_out[next] <= t_new) {
        const double th = (t_out[next] - t) / h;
        const double th1 = 1.0 - th;
        Vec<double> z(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double ydiff = y1[i] - y[i];
          const double bspl = h * k1[i] - ydiff;
          const double r4 = ydiff - h * k7[i] - bspl;
          const double r5 = h * (d1 * k1[i] + d3 * k3[i] + d4 * k4[i] + d5 * k5[i] + d6 * k6[i] +
                                 d7 * k7[i]);
          z[i] = y[i] + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)));
        }
        out.push_back(std::move(z));
        ++next;
      }
      y = y1;
      k1 = k7;
      t = t_new;
      if (next == t_out.size()) return out;
      double h_new = h / fac;
      if (last_rejected) h_new = std::min(h_new, h);
      last_rejected = false;
      h = h_new;
    } else {
      h = h / std::min(1.0 / facl, fac11 / safe);
      last_rejected = true;
    }
  }
  throw NumericalError("reference solver exceeded its step budget");
}

/// Exact-flow approximation z(h) starting from z.
inline Vec<double> reference_flow(const VectorField& f, const Vec<double>& z, double h,
                                  const ReferenceOptions& o = {}) {
  return dopri5(f, z, 0.0, {h}, o).front();
}

/// Reference trajectory on the uniform grid t0 + k (t1 - t0) / n_out, k = 0..n_out.
inline Trajectory reference_solve(const DegenerateModel& model, const PhaseState& z0, double t0,
                                  double t1, int n_out, const ReferenceOptions& o = {}) {
  if (n_out < 1 || !(t1 > t0)) throw ConfigError("reference_solve needs t1 > t0 and n_out >= 1");
  std::vector<double> times(static_cast<std::size_t>(n_out) + 1);
  for (int k = 0; k <= n_out; ++k)
    times[static_cast<std::size_t>(k)] = k == n_out ? t1 : t0 + (t1 - t0) * k / n_out;
  const VectorField f = [&model](const Vec<double>& v) {
    return vector_field(model, PhaseState::from_vector(v));
  };
  const std::vector<Vec<double>> states = dopri5(f, z0.to_vector(), t0, times, o);
  Trajectory traj;
  for (std::size_t k = 0; k < states.size(); ++k) {
    PhaseState z = PhaseState::from_vector(states[k]);
    const double energy = model.evaluate(z, EvalOrder::Value).hamiltonian;
    traj.push(times[k], std::move(z), 0, 0.0, energy);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Degenerate variational integrator.

/// Holds x_{n-1}, z_n and the step h.
struct DviStepWorkspace {
  Vec<double> previous_x;
  PhaseState current;
  double step = 0.0;

  DviStepWorkspace() = default;
  DviStepWorkspace(Vec<double> prev, PhaseState cur, double h)
      : previous_x(std::move(prev)), current(std::move(cur)), step(h) {
    if (!(h > 0.0)) throw ConfigError("time step must be positive");
    if (previous_x.size() != current.x().size())
      throw DomainError("previous_x has the wrong dimension");
  }
};

/// x_{-1} = x0 - h D_y theta(z0)^{-T} grad_y H(z0).
inline DviStepWorkspace dvi_bootstrap(const DegenerateModel& model, const PhaseState& z0, double h) {
  const ModelEvaluation<double> e = model.evaluate(z0, EvalOrder::First);
  const Mat<double> dy = e.d_y_theta();
  require_invertible(dy, "D_y theta");
  const Vec<double> xdot = solve_transposed(dy, e.grad_y_h());
  return {z0.x() - scaled(xdot, h), z0, h};
}

/// Scheme residual S on the triple (z0, z1, z2) from evaluations at z1 and z2:
///   S1 = theta(z2) - theta(z1) - D_x theta(z1)^T (x1 - x0) + h grad_x H(z1)
///   S2 = D_y theta(z2)^T (x2 - x1) - h grad_y H(z2)
template <class S>
Vec<S> dvi_residual(const ModelEvaluation<S>& e1, const ModelEvaluation<S>& e2, const Vec<S>& x0,
                    const Vec<S>& x1, const Vec<S>& x2, double h) {
  const int d = e1.d;
  const Vec<S> dx1 = x1 - x0;
  const Vec<S> dx2 = x2 - x1;
  Vec<S> out(static_cast<std::size_t>(2 * d));
  for (int i = 0; i < d; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    S acc = e2.theta[ui] - e1.theta[ui] + S(h) * e1.grad_h[ui];
    for (int j = 0; j < d; ++j) acc = acc - e1.jac_theta(j, i) * dx1[static_cast<std::size_t>(j)];
    out[ui] = acc;
    S acc2 = S(-h) * e2.grad_h[static_cast<std::size_t>(d + i)];
    for (int j = 0; j < d; ++j) acc2 = acc2 + e2.jac_theta(j, d + i) * dx2[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(d + i)] = acc2;
  }
  return out;
}

inline Vec<double> dvi_residual(const DegenerateModel& model, const PhaseState& z0,
                                const PhaseState& z1, const PhaseState& z2, double h) {
  return dvi_residual(model.evaluate(z1, EvalOrder::First), model.evaluate(z2, EvalOrder::First),
                      z0.x(), z1.x(), z2.x(), h);
}

/// Jacobian of dvi_residual with respect to z2; needs second derivatives at z2.
template <class S>
Mat<S> dvi_del_jacobian(const ModelEvaluation<S>& e2, const Vec<S>& x1, const Vec<S>& x2,
                        double h) {
  if (!e2.has_second) throw ConfigError("DEL Jacobian needs a second-order evaluation");
  const int d = e2.d;
  const Vec<S> dx = x2 - x1;
  Mat<S> j(2 * d, 2 * d);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < 2 * d; ++k) j(i, k) = e2.jac_theta(i, k);
  for (int a = 0; a < d; ++a)
    for (int k = 0; k < 2 * d; ++k) {
      S acc = S(-h) * e2.hess_h(d + a, k);
      for (int m = 0; m < d; ++m)
        acc = acc + e2.hess_theta[static_cast<std::size_t>(m)](d + a, k) *
                        dx[static_cast<std::size_t>(m)];
      if (k < d) acc = acc + e2.jac_theta(k, d + a);
      j(d + a, k) = acc;
    }
  return j;
}

inline Mat<double> dvi_del_jacobian(const DegenerateModel& model, const PhaseState& z1,
                                    const PhaseState& z2, double h) {
  return dvi_del_jacobian(model.evaluate(z2, EvalOrder::Second), z1.x(), z2.x(), h);
}

/// The four d x d blocks of the discrete Euler-Lagrange Jacobian with respect to
/// (x2, y2). The DEL equations are (-S1 / h, S2 / h).
struct DelBlocks {
  Mat<double> x_eq_dx2;  // -D_x theta(z2) / h
  Mat<double> x_eq_dy2;  // -D_y theta(z2) / h
  Mat<double> y_eq_dx2;  // theta_{k,a,j} dx^k / h + theta_{j,a} / h - H_{,aj}
  Mat<double> y_eq_dy2;  // theta_{k,ab} dx^k / h - H_{,ab}
};

inline DelBlocks del_blocks(const DegenerateModel& model, const PhaseState& z1,
                            const PhaseState& z2, double h) {
  const Mat<double> j = dvi_del_jacobian(model, z1, z2, h);
  const int d = z1.dim();
  const auto part = [&](int r0, int c0, double s) {
    Mat<double> b = j.block(r0, c0, d, d);
    for (double& v : b.data()) v *= s;
    return b;
  };
  return {part(0, 0, -1.0 / h), part(0, d, -1.0 / h), part(d, 0, 1.0 / h), part(d, d, 1.0 / h)};
}

struct DviStepResult {
  PhaseState next;
  DviStepWorkspace workspace;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// One DVI step by damped Newton from an explicit Euler guess. Non-convergence is
/// reported through `converged`, not thrown.
inline DviStepResult dvi_step(const DegenerateModel& model, const DviStepWorkspace& ws,
                              const NewtonConfig& cfg = {}) {
  cfg.validate();
  const double h = ws.step;
  const PhaseState& z1 = ws.current;
  const ModelEvaluation<double> e1 = model.evaluate(z1, EvalOrder::First);
  const int d = e1.d;

  DviStepResult res;
  res.workspace = ws;
  res.next = z1;
  res.residual = std::numeric_limits<double>::infinity();

  Vec<double> z = z1.to_vector();
  try {
    const Vec<double> guess = z + scaled(vector_field(e1), h);
    if (all_finite(guess)) z = guess;
  } catch (const std::exception&) {
    // Keep z1 as the starting point.
  }

  const auto residual_at = [&](const Vec<double>& v, EvalOrder order,
                               ModelEvaluation<double>* keep) -> std::optional<Vec<double>> {
    try {
      const PhaseState p = PhaseState::from_vector(v);
      ModelEvaluation<double> e2 = model.evaluate(p, order);
      Vec<double> s = dvi_residual(e1, e2, ws.previous_x, z1.x(), p.x(), h);
      if (!all_finite(s)) return std::nullopt;
      if (keep != nullptr) *keep = std::move(e2);
      return s;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };

  ModelEvaluation<double> e2;
  std::optional<Vec<double>> s = residual_at(z, EvalOrder::Second, &e2);
  if (!s) return res;
  double norm = sup_norm(*s);
  int it = 0;
  while (norm > cfg.abs_tol && it < cfg.max_iter) {
    Vec<double> delta;
    try {
      const Vec<double> xs(z.begin(), z.begin() + d);
      delta = solve(dvi_del_jacobian(e2, z1.x(), xs, h), scaled(*s, -1.0));
    } catch (const std::exception&) {
      break;
    }
    ++it;
    double step = cfg.damping;
    Vec<double> trial;
    std::optional<Vec<double>> st;
    for (int k = 0; k <= cfg.max_halvings; ++k, step *= 0.5) {
      trial = z + scaled(delta, step);
      st = residual_at(trial, EvalOrder::First, nullptr);
      if (st && sup_norm(*st) < norm) break;
    }
    if (!st) break;
    z = trial;
    s = residual_at(z, EvalOrder::Second, &e2);
    if (!s) break;
    norm = sup_norm(*s);
  }

  res.iterations = it;
  if (!s) return res;
  res.residual = norm;
  res.converged = norm <= cfg.abs_tol;
  if (res.converged) {
    res.next = PhaseState::from_vector(z);
    res.workspace = DviStepWorkspace(z1.x(), res.next, h);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Trajectory composition.

enum class Scheme { RK4, DVI };

inline const char* to_string(Scheme s) { return s == Scheme::RK4 ? "rk4" : "dvi"; }

inline Scheme parse_scheme(const std::string& s) {
  if (s == "rk4") return Scheme::RK4;
  if (s == "dvi") return Scheme::DVI;
  throw ConfigError("unknown scheme '" + s + "'");
}

struct SimulationOptions {
  Scheme scheme = Scheme::DVI;
  NewtonConfig newton{};
  int record_every = 1;  // keep every k-th state; the last state is always kept
  std::function<double(const PhaseState&)> reference_energy;  // optional ground-truth H
};

/// Composes `n_steps` steps from z0. A failed step truncates the trajectory and
/// sets `diverged` instead of throwing.
inline Trajectory simulate(const DegenerateModel& model, const PhaseState& z0, double h,
                           long n_steps, const SimulationOptions& opt = {}) {
  if (!(h > 0.0)) throw ConfigError("time step must be positive");
  if (n_steps < 0) throw ConfigError("n_steps must be non-negative");
  if (opt.record_every < 1) throw ConfigError("record_every must be at least 1");
  Trajectory traj;
  const auto record = [&](long k, const PhaseState& z, int iters, double res) {
    double energy = std::numeric_limits<double>::quiet_NaN();
    try {
      energy = model.evaluate(z, EvalOrder::Value).hamiltonian;
    } catch (const std::exception&) {
    }
    traj.push(static_cast<double>(k) * h, z, iters, res, energy);
    if (opt.reference_energy) traj.reference_energy.push_back(opt.reference_energy(z));
  };
  record(0, z0, 0, 0.0);
  if (n_steps == 0) return traj;

  PhaseState z = z0;
  std::optional<DviStepWorkspace> ws;
  if (opt.scheme == Scheme::DVI) {
    try {
      ws = dvi_bootstrap(model, z0, h);
    } catch (const std::exception&) {
      traj.diverged = true;
      return traj;
    }
  }
  for (long k = 1; k <= n_steps; ++k) {
    int iters = 0;
    double res = 0.0;
    if (opt.scheme == Scheme::DVI) {
      const DviStepResult r = dvi_step(model, *ws, opt.newton);
      if (!r.converged) {
        traj.diverged = true;
        return traj;
      }
      z = r.next;
      ws = r.workspace;
      iters = r.iterations;
      res = r.residual;
    } else {
      try {
        z = rk4_step(model, z, h);
      } catch (const std::exception&) {
        traj.diverged = true;
        return traj;
      }
    }
    if (k % opt.record_every == 0 || k == n_steps) record(k, z, iters, res);
  }
  return traj;
}

/// RK4 composition of a bare vector field (models without Lagrangian structure).
inline Trajectory simulate_field(const VectorField& f, const PhaseState& z0, double h, long n_steps,
                                 const std::function<double(const PhaseState&)>& energy = {},
                                 int record_every = 1) {
  if (!(h > 0.0)) throw ConfigError("time step must be positive");
  Trajectory traj;
  const auto record = [&](long k, const PhaseState& z) {
    traj.push(static_cast<double>(k) * h, z, 0, 0.0,
              energy ? energy(z) : std::numeric_limits<double>::quiet_NaN());
  };
  record(0, z0);
  Vec<double> z = z0.to_vector();
  for (long k = 1; k <= n_steps; ++k) {
    try {
      z = rk4_step(f, z, h);
      if (!all_finite(z)) throw NumericalError("non-finite state");
      if (k % record_every == 0 || k == n_steps) record(k, PhaseState::from_vector(z));
    } catch (const std::exception&) {
      traj.diverged = true;
      return traj;
    }
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Local error coefficient.

/// Solves [[D_x theta + D_x theta^T, D_y theta], [D_y theta^T, 0]] r = M z_dot with
/// M = sum_j x_dot_j Hess(theta_j) - Hess(H), so that one bootstrapped DVI step
/// satisfies z(h) - z_h = (h^2 / 2) r + O(h^3).
template <class S>
Vec<S> local_error_estimate(const ModelEvaluation<S>& e, const Vec<S>& zdot) {
  using ad::solve;
  if (!e.has_second) throw ConfigError("local error estimate needs a second-order evaluation");
  const int d = e.d;
  const int n = 2 * d;
  Mat<S> m(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      S acc = -e.hess_h(a, b);
      for (int j = 0; j < d; ++j)
        acc = acc + zdot[static_cast<std::size_t>(j)] * e.hess_theta[static_cast<std::size_t>(j)](a, b);
      m(a, b) = acc;
    }
  const Vec<S> rhs = m * zdot;
  Mat<S> k(n, n);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      k(i, j) = e.jac_theta(i, j) + e.jac_theta(j, i);
      k(i, d + j) = e.jac_theta(i, d + j);
      k(d + i, j) = e.jac_theta(j, d + i);
    }
  if (!(condition_number(ad::values(k)) < kConditionThreshold))
    throw SingularMatrixError("local error system is singular",
                              condition_number(ad::values(k)));
  return solve(k, rhs);
}

inline Vec<double> local_error_estimate(const DegenerateModel& model, const PhaseState& z,
                                        const Vec<double>& zdot) {
  return local_error_estimate(model.evaluate(z, EvalOrder::Second), zdot);
}

}  // namespace degenlag
