#pragma once

// Datasets, Gram-informed norms, vector-field and scheme losses, Adam and the
// multi-phase training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "json.hpp"

#include "degenlag/autodiff.hpp"
#include "degenlag/core.hpp"
#include "degenlag/errors.hpp"
#include "degenlag/integrate.hpp"
#include "degenlag/models.hpp"
#include "degenlag/nn.hpp"

namespace degenlag {

inline constexpr const char* kLibraryVersion = "1.0.0";

/// Per-sample loss assigned when a required matrix is numerically singular.
inline constexpr double kSingularPenalty = 1e6;

// ---------------------------------------------------------------------------
// Datasets.

enum class Split { Train, Test, Validation };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Validation: return "validation";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "validation") return Split::Validation;
  throw ConfigError("unknown split '" + s + "'");
}

/// Random 80/15/5 assignment of `n` groups.
inline std::vector<Split> assign_splits(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.80 * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  std::vector<Split> out(n, Split::Validation);
  for (std::size_t k = 0; k < n; ++k) {
    if (k < n_train)
      out[order[k]] = Split::Train;
    else if (k < n_train + n_test)
      out[order[k]] = Split::Test;
  }
  return out;
}

/// Pairs (z, z_dot) with z_dot the reference vector field.
struct CollocationDataset {
  int d = 0;
  std::vector<Vec<double>> z;
  std::vector<Vec<double>> zdot;
  std::vector<Split> split;
  std::vector<int> source;  // trajectory or point of origin

  [[nodiscard]] std::size_t size() const noexcept { return z.size(); }
  [[nodiscard]] std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
  void push(Vec<double> zi, Vec<double> fi, Split s, int src) {
    z.push_back(std::move(zi));
    zdot.push_back(std::move(fi));
    split.push_back(s);
    source.push_back(src);
  }
};

/// Consecutive snapshots (z0, z1, z2) at spacing h.
struct TripleDataset {
  int d = 0;
  double h = 0.0;
  std::vector<Vec<double>> z0;
  std::vector<Vec<double>> z1;
  std::vector<Vec<double>> z2;
  std::vector<Split> split;
  std::vector<int> source;

  [[nodiscard]] std::size_t size() const noexcept { return z0.size(); }
  [[nodiscard]] std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
  void push(Vec<double> a, Vec<double> b, Vec<double> c, Split s, int src) {
    z0.push_back(std::move(a));
    z1.push_back(std::move(b));
    z2.push_back(std::move(c));
    split.push_back(s);
    source.push_back(src);
  }
};

/// Everything a generator produces, including the initial condition of each
/// trajectory (or sampled point) and its split.
struct DatasetBundle {
  std::string experiment;
  CollocationDataset pairs;
  TripleDataset triples;
  std::vector<Vec<double>> initial;
  std::vector<Split> initial_split;
  nlohmann::json metadata;

  [[nodiscard]] std::vector<Vec<double>> initial_states(Split s) const {
    std::vector<Vec<double>> out;
    for (std::size_t i = 0; i < initial.size(); ++i)
      if (initial_split[i] == s) out.push_back(initial[i]);
    return out;
  }
};

namespace detail {

inline void add_trajectory(DatasetBundle& b, const DegenerateModel& model, const Trajectory& tr,
                           Split s, int id) {
  for (const PhaseState& z : tr.states) b.pairs.push(z.to_vector(), vector_field(model, z), s, id);
  for (std::size_t k = 0; k + 2 < tr.states.size(); ++k)
    b.triples.push(tr.states[k].to_vector(), tr.states[k + 1].to_vector(),
                   tr.states[k + 2].to_vector(), s, id);
}

inline DatasetBundle trajectory_dataset(const std::string& name, const DegenerateModel& model,
                                        const std::vector<PhaseState>& starts, int steps, double h,
                                        std::mt19937_64& rng) {
  if (steps < 2) throw ConfigError("trajectory datasets need at least 2 steps");
  if (!(h > 0.0)) throw ConfigError("time step must be positive");
  DatasetBundle b;
  b.experiment = name;
  b.pairs.d = b.triples.d = model.dimension();
  b.triples.h = h;
  const std::vector<Split> splits = assign_splits(starts.size(), rng);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const Trajectory tr = reference_solve(model, starts[i], 0.0, steps * h, steps);
    add_trajectory(b, model, tr, splits[i], static_cast<int>(i));
    b.initial.push_back(starts[i].to_vector());
    b.initial_split.push_back(splits[i]);
  }
  b.metadata = {{"experiment", name},
                {"generator_version", kLibraryVersion},
                {"model", model.name()},
                {"trajectories", starts.size()},
                {"steps", steps},
                {"h", h},
                {"pairs", "every snapshot of every trajectory"},
                {"triples", "consecutive snapshots"},
                {"split", "80/15/5 by trajectory"}};
  return b;
}

}  // namespace detail

inline constexpr double kLvEnergyBound = 4.4;

/// Lotka-Volterra: initial conditions uniform in {H <= 4.4}, `steps` steps of size h.
inline DatasetBundle gen_dataset_lv(int n_traj = 2000, int steps = 5, double h = 0.1,
                                    std::uint64_t seed = 0) {
  if (n_traj < 1) throw ConfigError("need at least one trajectory");
  const LotkaVolterraModel model;
  std::mt19937_64 rng(seed);
  // {H <= 4.4} lies inside [0.1, 8] x [0.03, 6].
  std::uniform_real_distribution<double> ux(0.1, 8.0);
  std::uniform_real_distribution<double> uy(0.03, 6.0);
  std::vector<PhaseState> starts;
  const long budget = 1000L * n_traj + 100000L;
  long tries = 0;
  while (static_cast<int>(starts.size()) < n_traj) {
    if (++tries > budget) throw ConfigError("rejection sampling for H <= 4.4 stalled");
    const double x = ux(rng);
    const PhaseState z({x}, {uy(rng)});
    if (model.evaluate(z, EvalOrder::Value).hamiltonian <= kLvEnergyBound) starts.push_back(z);
  }
  DatasetBundle b = detail::trajectory_dataset("lv", model, starts, steps, h, rng);
  b.metadata["seed"] = seed;
  b.metadata["energy_bound"] = kLvEnergyBound;
  return b;
}

/// `n` points of [0, 1]^dims with exactly one point in each of the n strata
/// of every coordinate.
inline std::vector<Vec<double>> latin_hypercube(std::size_t n, int dims, std::mt19937_64& rng) {
  std::vector<Vec<double>> pts(n, Vec<double>(static_cast<std::size_t>(dims)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> perm(n);
  for (int c = 0; c < dims; ++c) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n; ++i)
      pts[i][static_cast<std::size_t>(c)] = (static_cast<double>(perm[i]) + u(rng)) / static_cast<double>(n);
  }
  return pts;
}

/// Massless charged particle: Latin hypercube over (radius^2, angle) in the
/// disc of radius pi around (0, pi/2), kept where the potential is <= 1.5;
/// each kept point also starts a three-snapshot trajectory at step h.
inline DatasetBundle gen_dataset_mcp(int n_points = 15000, std::uint64_t seed = 0, double h = 0.5,
                                     double potential_bound = 1.5) {
  if (n_points < 1) throw ConfigError("need at least one sample");
  const MasslessParticleModel model;
  std::mt19937_64 rng(seed);
  const double pi = std::numbers::pi;
  std::vector<PhaseState> kept;
  for (const Vec<double>& u : latin_hypercube(static_cast<std::size_t>(n_points), 2, rng)) {
    const double rho = pi * std::sqrt(u[0]);
    const double ang = 2.0 * pi * u[1];
    const PhaseState z({rho * std::cos(ang)}, {pi / 2 + rho * std::sin(ang)});
    if (model.evaluate(z, EvalOrder::Value).hamiltonian <= potential_bound) kept.push_back(z);
  }
  DatasetBundle b;
  b.experiment = "mcp";
  b.pairs.d = b.triples.d = 1;
  b.triples.h = h;
  const std::vector<Split> splits = assign_splits(kept.size(), rng);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const Trajectory tr = reference_solve(model, kept[i], 0.0, 2.0 * h, 2);
    const int id = static_cast<int>(i);
    b.pairs.push(kept[i].to_vector(), vector_field(model, kept[i]), splits[i], id);
    b.triples.push(tr.states[0].to_vector(), tr.states[1].to_vector(), tr.states[2].to_vector(),
                   splits[i], id);
    b.initial.push_back(kept[i].to_vector());
    b.initial_split.push_back(splits[i]);
  }
  b.metadata = {{"experiment", "mcp"},
                {"generator_version", kLibraryVersion},
                {"model", model.name()},
                {"seed", seed},
                {"samples", n_points},
                {"kept", kept.size()},
                {"potential_bound", potential_bound},
                {"h", h},
                {"pairs", "every kept sample"},
                {"triples", "three-snapshot trajectory from every kept sample"},
                {"split", "80/15/5 by sample"}};
  return b;
}

/// Guiding center: r^2 uniform in [0.03^2, 0.055^2], |theta| <= pi/10,
/// phi in [0, 2 pi], u in [-9e-4, -3e-4]; `steps` steps of T_DT / 20.
inline DatasetBundle gen_dataset_gc(int n_traj = 600, std::uint64_t seed = 0, int steps = 60,
                                    const GuidingCenterParams& params = {}) {
  if (n_traj < 1) throw ConfigError("need at least one trajectory");
  const GuidingCenterModel model(params);
  std::mt19937_64 rng(seed);
  const double pi = std::numbers::pi;
  std::uniform_real_distribution<double> r2(0.03 * 0.03, 0.055 * 0.055);
  std::uniform_real_distribution<double> th(-pi / 10, pi / 10);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * pi);
  std::uniform_real_distribution<double> uu(-9e-4, -3e-4);
  std::vector<PhaseState> starts;
  for (int i = 0; i < n_traj; ++i) {
    const double r = std::sqrt(r2(rng));
    const double t = th(rng);
    const double p = ph(rng);
    starts.emplace_back(Vec<double>{t, p}, Vec<double>{r, uu(rng)});
  }
  const double h = kGuidingCenterPeriodDT / 20.0;
  DatasetBundle b = detail::trajectory_dataset("gc", model, starts, steps, h, rng);
  b.metadata["seed"] = seed;
  b.metadata["period_dt"] = kGuidingCenterPeriodDT;
  b.metadata["params"] = {{"b0", params.b0}, {"r0", params.r0}, {"q0", params.q0},
                          {"mu", params.mu}, {"quadrature_points", params.quadrature_points}};
  return b;
}

// ---------------------------------------------------------------------------
// Gram-informed norms.

enum class GramMode { Full, Componentwise, Identity };

inline const char* to_string(GramMode m) {
  switch (m) {
    case GramMode::Full: return "full";
    case GramMode::Componentwise: return "componentwise";
    case GramMode::Identity: return "identity";
  }
  return "?";
}

inline GramMode parse_gram_mode(const std::string& s) {
  if (s == "full") return GramMode::Full;
  if (s == "componentwise") return GramMode::Componentwise;
  if (s == "identity" || s == "none") return GramMode::Identity;
  throw ConfigError("unknown Gram mode '" + s + "'");
}

/// ||u||^2 = u^T M^{-1} u evaluated as |M^{-1/2} u|^2.
struct GramNorm {
  Mat<double> m;
  Mat<double> inv_sqrt;
  double offset = 0.0;

  template <class S>
  [[nodiscard]] Vec<S> whiten(const Vec<S>& u) const {
    const int n = inv_sqrt.rows();
    if (static_cast<int>(u.size()) != n) throw ConfigError("Gram norm dimension mismatch");
    Vec<S> v(u.size());
    for (int i = 0; i < n; ++i) {
      S acc = S(inv_sqrt(i, 0)) * u[0];
      for (int j = 1; j < n; ++j) acc = acc + S(inv_sqrt(i, j)) * u[static_cast<std::size_t>(j)];
      v[static_cast<std::size_t>(i)] = acc;
    }
    return v;
  }

  template <class S>
  [[nodiscard]] S squared_norm(const Vec<S>& u) const {
    const Vec<S> v = whiten(u);
    S acc = v[0] * v[0];
    for (std::size_t i = 1; i < v.size(); ++i) acc = acc + v[i] * v[i];
    return acc;
  }
};

inline GramNorm identity_gram(int n) {
  return {Mat<double>::identity(n), Mat<double>::identity(n), 0.0};
}

/// M = mean(v v^T) + eps_M I with eps_M = 1e-12 trace(M) / n, and M^{-1/2} from
/// the symmetric eigendecomposition; the componentwise variant keeps diag(M).
inline GramNorm gram_inverse_sqrt(const std::vector<Vec<double>>& vectors,
                                  GramMode mode = GramMode::Full) {
  if (vectors.empty()) throw ConfigError("Gram matrix needs at least one vector");
  const int n = static_cast<int>(vectors.front().size());
  if (mode == GramMode::Identity) return identity_gram(n);
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (const auto& v : vectors) {
    const Eigen::Map<const Eigen::VectorXd> e(v.data(), n);
    m.noalias() += e * e.transpose();
  }
  m /= static_cast<double>(vectors.size());
  if (mode == GramMode::Componentwise) m = Eigen::MatrixXd(m.diagonal().asDiagonal());
  double offset = 1e-12 * m.trace() / n;
  if (!(offset > 0.0)) offset = std::numeric_limits<double>::min();
  m += offset * Eigen::MatrixXd::Identity(n, n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::MatrixXd w = es.eigenvectors() * es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() *
                            es.eigenvectors().transpose();
  GramNorm g;
  g.m = Mat<double>(n, n);
  g.inv_sqrt = Mat<double>(n, n);
  g.offset = offset;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      g.m(i, j) = m(i, j);
      g.inv_sqrt(i, j) = 0.5 * (w(i, j) + w(j, i));
    }
  return g;
}

// ---------------------------------------------------------------------------
// Per-sample loss terms, generic in the scalar type.

template <class S>
struct SampleTerms {
  S error{};
  S reg{};
  bool penalized = false;
};

namespace detail {

template <class S>
Vec<S> lift(const Vec<double>& v) {
  Vec<S> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = S(v[i]);
  return out;
}

template <class S>
SampleTerms<S> penalty(bool with_reg) {
  return {S(kSingularPenalty), S(with_reg ? kSingularPenalty : 0.0), true};
}

inline bool well_conditioned(const Mat<double>& a) {
  if (!all_finite(a.data())) return false;
  return condition_number(a) < kConditionThreshold;
}

}  // namespace detail

/// |z_dot - W^{-1} grad H|_M^2 and |r(z, z_dot)|_M^2 for one collocation point.
template <class S>
SampleTerms<S> vf_terms(const ModelEvaluation<S>& e, const Vec<double>& zdot, const GramNorm& g,
                        bool with_reg) {
  if (!detail::well_conditioned(ad::values(e.d_y_theta()))) return detail::penalty<S>(with_reg);
  const Vec<S> f = vector_field(e);
  Vec<S> diff(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) diff[i] = S(zdot[i]) - f[i];
  SampleTerms<S> t;
  t.error = g.squared_norm(diff);
  t.reg = S(0.0);
  if (with_reg) {
    try {
      t.reg = g.squared_norm(local_error_estimate(e, detail::lift<S>(zdot)));
    } catch (const SingularMatrixError&) {
      return detail::penalty<S>(with_reg);
    }
  }
  return t;
}

/// |J^{-1} S|_sch^2 and log10 cond(J) for one triple.
template <class S>
SampleTerms<S> scheme_terms(const ModelEvaluation<S>& e1, const ModelEvaluation<S>& e2,
                            const Vec<double>& z0, const Vec<double>& z1, const Vec<double>& z2,
                            double h, const GramNorm& g, bool with_reg) {
  using ad::log10_condition;
  using ad::solve;
  const int d = e1.d;
  const auto half = [d](const Vec<double>& z) {
    return detail::lift<S>(Vec<double>(z.begin(), z.begin() + d));
  };
  const Vec<S> x0 = half(z0);
  const Vec<S> x1 = half(z1);
  const Vec<S> x2 = half(z2);
  const Mat<S> j = dvi_del_jacobian(e2, x1, x2, h);
  if (!detail::well_conditioned(ad::values(j))) return detail::penalty<S>(with_reg);
  const Vec<S> r = dvi_residual(e1, e2, x0, x1, x2, h);
  SampleTerms<S> t;
  t.error = g.squared_norm(solve(j, r));
  t.reg = with_reg ? log10_condition(j) : S(0.0);
  return t;
}

/// Newton step of the one-step error linearised around z1: solves
/// [[D_x theta, D_y theta], [D_y theta^T, 0]] delta = S~ with S~ the residual
/// after replacing theta(z2) by its first-order expansion at z1. Needs only a
/// first-order evaluation at z1. Returns delta and the approximate Jacobian.
template <class S>
std::pair<Vec<S>, Mat<S>> approx_scheme_step(const ModelEvaluation<S>& e1, const Vec<double>& z0,
                                             const Vec<double>& z1, const Vec<double>& z2,
                                             double h) {
  using ad::solve;
  using ad::solve_transposed;
  const int d = e1.d;
  const Mat<S> dx = e1.d_x_theta();
  const Mat<S> dy = e1.d_y_theta();
  require_invertible(ad::values(dy), "D_y theta");
  Vec<S> dx1(static_cast<std::size_t>(d));
  Vec<S> dx2(static_cast<std::size_t>(d));
  Vec<S> dy2(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    dx1[ui] = S(z1[ui] - z0[ui]);
    dx2[ui] = S(z2[ui] - z1[ui]);
    dy2[ui] = S(z2[ui + static_cast<std::size_t>(d)] - z1[ui + static_cast<std::size_t>(d)]);
  }
  const Vec<S> v = scaled(solve_transposed(dy, e1.grad_y_h()), S(h));  // h x_dot
  const Vec<S> delta_x = dx2 - v;
  const Vec<S> rhs = dx * v - dx.transpose() * dx1 + scaled(e1.grad_x_h(), S(h));
  const Vec<S> delta_y = dy2 + solve(dy, rhs);
  Mat<S> j(2 * d, 2 * d);
  j.set_block(0, 0, dx);
  j.set_block(0, d, dy);
  j.set_block(d, 0, dy.transpose());
  return {concat(delta_x, delta_y), j};
}

template <class S>
Vec<S> approx_scheme_residual(const ModelEvaluation<S>& e1, const Vec<double>& z0,
                              const Vec<double>& z1, const Vec<double>& z2, double h) {
  return approx_scheme_step(e1, z0, z1, z2, h).first;
}

inline Vec<double> approx_scheme_residual(const DegenerateModel& model, const Vec<double>& z0,
                                          const Vec<double>& z1, const Vec<double>& z2, double h) {
  return approx_scheme_residual(model.evaluate(PhaseState::from_vector(z1), EvalOrder::First), z0,
                                z1, z2, h);
}

/// Exact J^{-1} S for a triple under a fixed model.
inline Vec<double> scheme_newton_step(const DegenerateModel& model, const Vec<double>& z0,
                                      const Vec<double>& z1, const Vec<double>& z2, double h) {
  const PhaseState s0 = PhaseState::from_vector(z0);
  const PhaseState s1 = PhaseState::from_vector(z1);
  const PhaseState s2 = PhaseState::from_vector(z2);
  return solve(dvi_del_jacobian(model, s1, s2, h), dvi_residual(model, s0, s1, s2, h));
}

template <class S>
SampleTerms<S> approx_scheme_terms(const ModelEvaluation<S>& e1, const Vec<double>& z0,
                                   const Vec<double>& z1, const Vec<double>& z2, double h,
                                   const GramNorm& g, bool with_reg) {
  using ad::log10_condition;
  if (!detail::well_conditioned(ad::values(e1.d_y_theta()))) return detail::penalty<S>(with_reg);
  const auto [delta, j] = approx_scheme_step(e1, z0, z1, z2, h);
  SampleTerms<S> t;
  t.error = g.squared_norm(delta);
  t.reg = with_reg ? log10_condition(j) : S(0.0);
  return t;
}

// ---------------------------------------------------------------------------
// Batched losses with reverse-mode gradients.

struct LossResult {
  double value = 0.0;  // mean of error + epsilon reg
  double error = 0.0;  // mean error term
  double reg = 0.0;    // mean regularisation term
  std::size_t penalized = 0;
  std::vector<double> gradient;
};

struct EvalOptions {
  bool gradient = true;
  bool monitor_reg = true;  // compute the regularisation term even when epsilon = 0
  int threads = 1;
};

/// Thread count from DEGENLAG_THREADS, defaulting to 1.
inline int default_threads() {
  if (const char* s = std::getenv("DEGENLAG_THREADS")) {
    const int n = std::atoi(s);
    if (n >= 1) return n;
  }
  return 1;
}

namespace detail {

inline constexpr std::size_t kChunk = 16;

/// Sums per-sample losses and gradients. Samples are processed in fixed chunks
/// whose partial gradients are added in chunk order, so the result does not
/// depend on the thread count.
template <class Fn>
LossResult evaluate_batch(std::size_t count, std::size_t n_params, double epsilon,
                          const EvalOptions& opt, Fn&& fn) {
  if (count == 0) throw ConfigError("empty batch");
  const std::size_t n_chunks = (count + kChunk - 1) / kChunk;
  struct Partial {
    double value = 0.0, error = 0.0, reg = 0.0;
    std::size_t penalized = 0;
    std::vector<double> grad;
  };
  std::vector<Partial> parts(n_chunks);
  const double weight = 1.0 / static_cast<double>(count);
  const auto run_chunk = [&](std::size_t c) {
    Partial& p = parts[c];
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ParameterTrace trace(n_params);
    const std::size_t end = std::min(count, (c + 1) * kChunk);
    for (std::size_t k = c * kChunk; k < end; ++k) {
      tape.clear();
      const SampleTerms<ad::Var> t = fn(k, trace);
      const double total = t.error.value + epsilon * t.reg.value;
      p.value += total;
      p.error += t.error.value;
      p.reg += t.reg.value;
      if (t.penalized) ++p.penalized;
      if (opt.gradient && !t.penalized) {
        const ad::Var l = epsilon > 0.0 ? t.error + ad::Var(epsilon) * t.reg : t.error;
        if (l.node != ad::kNoNode) {
          tape.backward(l.node, weight);
          trace.harvest(tape);
        }
      }
      trace.leaves.clear();
    }
    if (opt.gradient) p.grad = std::move(trace.grad);
  };
  const int threads = std::max(1, std::min<int>(opt.threads, static_cast<int>(n_chunks)));
  if (threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t c = static_cast<std::size_t>(w); c < n_chunks; c += static_cast<std::size_t>(threads))
          run_chunk(c);
      });
    for (auto& t : pool) t.join();
  }
  LossResult r;
  if (opt.gradient) r.gradient.assign(n_params, 0.0);
  for (const Partial& p : parts) {
    r.value += p.value;
    r.error += p.error;
    r.reg += p.reg;
    r.penalized += p.penalized;
    if (opt.gradient)
      for (std::size_t i = 0; i < n_params; ++i) r.gradient[i] += p.grad[i];
  }
  r.value *= weight;
  r.error *= weight;
  r.reg *= weight;
  return r;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace detail

/// Gram matrix of the targets z_dot over `idx`.
inline GramNorm vf_gram(const CollocationDataset& data, std::span<const std::size_t> idx,
                        GramMode mode = GramMode::Full) {
  return gram_inverse_sqrt(detail::gather(data.zdot, idx), mode);
}

/// Gram matrix of z2 - z1 over `idx`.
inline GramNorm scheme_gram(const TripleDataset& data, std::span<const std::size_t> idx,
                            GramMode mode = GramMode::Full) {
  std::vector<Vec<double>> v;
  v.reserve(idx.size());
  for (std::size_t i : idx) v.push_back(data.z2[i] - data.z1[i]);
  return gram_inverse_sqrt(v, mode);
}

/// Mean over the batch of |z_dot - W^{-1} grad H|_M^2 + epsilon |r|_M^2.
inline LossResult loss_vf(const TrainableModel& model, const CollocationDataset& data,
                          std::span<const std::size_t> batch, const GramNorm& gram, double epsilon,
                          const EvalOptions& opt = {}) {
  if (epsilon < 0.0) throw ConfigError("epsilon must be non-negative");
  const bool with_reg = epsilon > 0.0 || opt.monitor_reg;
  return detail::evaluate_batch(
      batch.size(), model.parameter_count(), epsilon, opt, [&](std::size_t k, ParameterTrace& tr) {
        const std::size_t i = batch[k];
        const auto e = model.evaluate_traced(PhaseState::from_vector(data.z[i]),
                                             with_reg ? EvalOrder::Second : EvalOrder::First, tr);
        return vf_terms(e, data.zdot[i], gram, with_reg);
      });
}

/// Mean over the batch of |J^{-1} S|_sch^2 + epsilon log10 cond(J); with
/// `approximate` the linearised one-evaluation residual replaces J^{-1} S.
inline LossResult loss_scheme(const TrainableModel& model, const TripleDataset& data,
                              std::span<const std::size_t> batch, const GramNorm& gram,
                              double epsilon, bool approximate = false, const EvalOptions& opt = {}) {
  if (epsilon < 0.0) throw ConfigError("epsilon must be non-negative");
  if (!(data.h > 0.0)) throw ConfigError("triple dataset has no step size");
  const bool with_reg = epsilon > 0.0 || opt.monitor_reg;
  return detail::evaluate_batch(
      batch.size(), model.parameter_count(), epsilon, opt, [&](std::size_t k, ParameterTrace& tr) {
        const std::size_t i = batch[k];
        const auto e1 = model.evaluate_traced(PhaseState::from_vector(data.z1[i]), EvalOrder::First, tr);
        if (approximate)
          return approx_scheme_terms(e1, data.z0[i], data.z1[i], data.z2[i], data.h, gram, with_reg);
        const auto e2 =
            model.evaluate_traced(PhaseState::from_vector(data.z2[i]), EvalOrder::Second, tr);
        return scheme_terms(e1, e2, data.z0[i], data.z1[i], data.z2[i], data.h, gram, with_reg);
      });
}

/// Mean over the batch of |z_dot - f(z)|_M^2 for an unstructured network.
inline LossResult loss_no_structure(const nn::NoStructureModel& model, const CollocationDataset& data,
                                    std::span<const std::size_t> batch, const GramNorm& gram,
                                    const EvalOptions& opt = {}) {
  return detail::evaluate_batch(
      batch.size(), model.parameters().size(), 0.0, opt, [&](std::size_t k, ParameterTrace& tr) {
        const std::size_t i = batch[k];
        const Vec<ad::Var> f = model.field_traced(data.z[i], tr);
        Vec<ad::Var> diff(f.size());
        for (std::size_t c = 0; c < f.size(); ++c) diff[c] = ad::Var(data.zdot[i][c]) - f[c];
        return SampleTerms<ad::Var>{gram.squared_norm(diff), ad::Var(0.0), false};
      });
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s,
                      double lr, const AdamParams& a = {}) {
  if (params.size() != grads.size()) throw ConfigError("Adam: gradient has the wrong length");
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size()) throw ConfigError("Adam: state has the wrong length");
  ++s.t;
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = a.beta1 * s.m[i] + (1.0 - a.beta1) * grads[i];
    s.v[i] = a.beta2 * s.v[i] + (1.0 - a.beta2) * grads[i] * grads[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + a.eps);
  }
}

// ---------------------------------------------------------------------------
// Training configuration and loop.

enum class LossVariant { VF, VFNoReg, Scheme, NoStructure };

inline const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::VF: return "vf";
    case LossVariant::VFNoReg: return "vf_no_reg";
    case LossVariant::Scheme: return "scheme";
    case LossVariant::NoStructure: return "no_structure";
  }
  return "?";
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "vf") return LossVariant::VF;
  if (s == "vf_no_reg") return LossVariant::VFNoReg;
  if (s == "scheme") return LossVariant::Scheme;
  if (s == "no_structure") return LossVariant::NoStructure;
  throw ConfigError("unknown loss variant '" + s + "'");
}

struct TrainPhase {
  int epochs = 1;
  double lr = 1e-3;
  bool approximate = false;  // linearised scheme residual
};

struct TrainConfig {
  LossVariant variant = LossVariant::VF;
  std::vector<TrainPhase> phases{{20, 1e-2, false}, {500, 1e-3, false}};
  int batch_size = 500;
  double epsilon = 1e-6;
  AdamParams adam;
  std::uint64_t seed = 0;
  GramMode gram = GramMode::Full;
  bool precompute_gram = false;
  bool monitor_reg = true;
  int threads = 1;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (phases.empty()) throw ConfigError("at least one training phase is required");
    for (const auto& p : phases) {
      if (p.epochs < 0) throw ConfigError("phase epochs must be non-negative");
      if (!(p.lr > 0.0)) throw ConfigError("learning rates must be positive");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
          adam.eps > 0.0))
      throw ConfigError("invalid Adam hyperparameters");
    if (threads < 1) throw ConfigError("threads must be at least 1");
  }

  [[nodiscard]] double effective_epsilon() const {
    return variant == LossVariant::VFNoReg ? 0.0 : epsilon;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : c.phases)
    phases.push_back({{"epochs", p.epochs}, {"lr", p.lr}, {"approximate", p.approximate}});
  return {{"variant", to_string(c.variant)},
          {"phases", phases},
          {"batch_size", c.batch_size},
          {"epsilon", c.epsilon},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"seed", c.seed},
          {"gram", to_string(c.gram)},
          {"precompute_gram", c.precompute_gram},
          {"monitor_reg", c.monitor_reg},
          {"threads", c.threads}};
}

/// Reads a TrainConfig; absent keys keep the values of `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("variant")) base.variant = parse_loss_variant(j.at("variant").get<std::string>());
    if (j.contains("phases")) {
      base.phases.clear();
      for (const auto& p : j.at("phases"))
        base.phases.push_back({p.at("epochs").get<int>(), p.at("lr").get<double>(),
                               p.value("approximate", false)});
    }
    if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<int>();
    if (j.contains("epsilon")) base.epsilon = j.at("epsilon").get<double>();
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      base.adam.beta1 = a.value("beta1", base.adam.beta1);
      base.adam.beta2 = a.value("beta2", base.adam.beta2);
      base.adam.eps = a.value("eps", base.adam.eps);
    }
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("gram")) base.gram = parse_gram_mode(j.at("gram").get<std::string>());
    if (j.contains("precompute_gram")) base.precompute_gram = j.at("precompute_gram").get<bool>();
    if (j.contains("monitor_reg")) base.monitor_reg = j.at("monitor_reg").get<bool>();
    if (j.contains("threads")) base.threads = j.at("threads").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  base.validate();
  return base;
}

/// Published schedules: LV 20@1e-2, 500@1e-3, 500@1e-4, 500@1e-4; MCP and GC
/// 20@1e-2, 500@1e-3, 500@1e-4. epsilon: 1e-6 (LV VF), 1 (GC VF), 1e-8 (scheme).
inline TrainConfig default_train_config(const std::string& experiment, LossVariant variant) {
  TrainConfig c;
  c.variant = variant;
  if (experiment == "lv") {
    c.phases = {{20, 1e-2}, {500, 1e-3}, {500, 1e-4}, {500, 1e-4}};
    c.epsilon = variant == LossVariant::Scheme ? 1e-8 : 1e-6;
  } else if (experiment == "mcp") {
    c.phases = {{20, 1e-2}, {500, 1e-3}, {500, 1e-4}};
    c.epsilon = variant == LossVariant::Scheme ? 1e-8 : 1e-6;
  } else if (experiment == "gc") {
    const bool approx = variant == LossVariant::Scheme;
    c.phases = {{20, 1e-2, approx}, {500, 1e-3, approx}, {500, 1e-4, false}};
    c.epsilon = variant == LossVariant::Scheme ? 1e-8 : 1.0;
  } else {
    throw ConfigError("unknown experiment '" + experiment + "'");
  }
  if (variant == LossVariant::NoStructure) c.epsilon = 0.0;
  return c;
}

struct EpochRecord {
  int epoch = 0;
  int phase = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double error_term = 0.0;  // on the test set
  double reg_term = 0.0;    // on the test set
};

struct TrainingRun {
  TrainConfig config;
  std::vector<EpochRecord> history;
  std::vector<double> parameters;  // last finite parameters
  bool aborted = false;
  std::string message;
  double seconds = 0.0;
};

inline void write_loss_csv(const std::string& path, const TrainingRun& run) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  os.precision(17);
  os << "epoch,train_loss,test_loss,error_term,reg_term\n";
  for (const auto& r : run.history)
    os << r.epoch << ',' << r.train_loss << ',' << r.test_loss << ',' << r.error_term << ','
       << r.reg_term << '\n';
}

/// Hook invoked after each phase with the phase index.
using PhaseCallback = std::function<void(const TrainingRun&, int)>;

namespace detail {

/// BatchLoss(idx, want_gradient) -> LossResult for the current parameters.
template <class Model, class BatchLoss>
TrainingRun train_loop(const TrainConfig& cfg, Model& model, std::vector<std::size_t> train,
                       const std::vector<std::size_t>& test, BatchLoss&& batch_loss,
                       const PhaseCallback& on_phase) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  TrainingRun run;
  run.config = cfg;
  std::vector<double> params(model.parameters().begin(), model.parameters().end());
  run.parameters = params;
  int epoch = 0;
  for (std::size_t ph = 0; ph < cfg.phases.size() && !run.aborted; ++ph) {
    const TrainPhase& phase = cfg.phases[ph];
    AdamState state;
    for (int e = 0; e < phase.epochs; ++e, ++epoch) {
      std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
      std::shuffle(train.begin(), train.end(), rng);
      double train_sum = 0.0;
      std::size_t batches = 0;
      bool finite = true;
      for (std::size_t b = 0; b < train.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(train.size(), b + static_cast<std::size_t>(cfg.batch_size));
        const std::span<const std::size_t> idx(train.data() + b, end - b);
        const LossResult r = batch_loss(idx, true, phase);
        bool ok = std::isfinite(r.value);
        for (double g : r.gradient) ok = ok && std::isfinite(g);
        if (!ok) {
          finite = false;
          break;
        }
        adam_step(params, r.gradient, state, phase.lr, cfg.adam);
        model.set_parameters(params);
        train_sum += r.value;
        ++batches;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.phase = static_cast<int>(ph);
      rec.lr = phase.lr;
      rec.train_loss = batches > 0 ? train_sum / static_cast<double>(batches) : 0.0;
      if (finite && !test.empty()) {
        const LossResult t = batch_loss(std::span<const std::size_t>(test), false, phase);
        rec.test_loss = t.value;
        rec.error_term = t.error;
        rec.reg_term = t.reg;
        finite = std::isfinite(t.value);
      }
      if (!finite) {
        params = run.parameters;
        model.set_parameters(params);
        run.aborted = true;
        run.message = "non-finite loss in phase " + std::to_string(ph) + " epoch " +
                      std::to_string(epoch) + "; kept the last finite parameters";
        break;
      }
      run.history.push_back(rec);
      run.parameters = params;
    }
    if (on_phase) on_phase(run, static_cast<int>(ph));
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

}  // namespace detail

/// Trains a structured model on pairs (VF variants) or triples (Scheme).
inline TrainingRun run_training(const TrainConfig& cfg, const DatasetBundle& data,
                                TrainableModel& model, const PhaseCallback& on_phase = {}) {
  cfg.validate();
  EvalOptions opt;
  opt.threads = cfg.threads;
  opt.monitor_reg = cfg.monitor_reg;
  const double eps = cfg.effective_epsilon();
  if (cfg.variant == LossVariant::NoStructure)
    throw ConfigError("the no-structure variant trains a NoStructureModel");
  if (cfg.variant == LossVariant::Scheme) {
    if (data.triples.size() == 0) throw ConfigError("scheme learning needs triples");
    if (data.triples.d != model.dimension()) throw ConfigError("dataset and model dimensions differ");
    const auto train = data.triples.indices(Split::Train);
    const auto test = data.triples.indices(Split::Test);
    std::optional<GramNorm> fixed;
    if (cfg.precompute_gram) fixed = scheme_gram(data.triples, train, cfg.gram);
    return detail::train_loop(
        cfg, model, train, test,
        [&](std::span<const std::size_t> idx, bool grad, const TrainPhase& ph) {
          EvalOptions o = opt;
          o.gradient = grad;
          const GramNorm g = fixed ? *fixed : scheme_gram(data.triples, idx, cfg.gram);
          return loss_scheme(model, data.triples, idx, g, eps, ph.approximate, o);
        },
        on_phase);
  }
  if (data.pairs.size() == 0) throw ConfigError("vector-field learning needs pairs");
  if (data.pairs.d != model.dimension()) throw ConfigError("dataset and model dimensions differ");
  const auto train = data.pairs.indices(Split::Train);
  const auto test = data.pairs.indices(Split::Test);
  std::optional<GramNorm> fixed;
  if (cfg.precompute_gram) fixed = vf_gram(data.pairs, train, cfg.gram);
  return detail::train_loop(
      cfg, model, train, test,
      [&](std::span<const std::size_t> idx, bool grad, const TrainPhase&) {
        EvalOptions o = opt;
        o.gradient = grad;
        // Training batches skip the second-order evaluation when it is not needed.
        o.monitor_reg = grad ? eps > 0.0 : cfg.monitor_reg;
        const GramNorm g = fixed ? *fixed : vf_gram(data.pairs, idx, cfg.gram);
        return loss_vf(model, data.pairs, idx, g, eps, o);
      },
      on_phase);
}

/// Trains the unstructured baseline on pairs.
inline TrainingRun run_training(const TrainConfig& cfg, const DatasetBundle& data,
                                nn::NoStructureModel& model, const PhaseCallback& on_phase = {}) {
  cfg.validate();
  if (data.pairs.size() == 0) throw ConfigError("the baseline trains on pairs");
  EvalOptions opt;
  opt.threads = cfg.threads;
  const auto train = data.pairs.indices(Split::Train);
  const auto test = data.pairs.indices(Split::Test);
  return detail::train_loop(
      cfg, model, train, test,
      [&](std::span<const std::size_t> idx, bool grad, const TrainPhase&) {
        EvalOptions o = opt;
        o.gradient = grad;
        return loss_no_structure(model, data.pairs, idx, vf_gram(data.pairs, idx, cfg.gram), o);
      },
      on_phase);
}

// ---------------------------------------------------------------------------
// Model factories with the published architectures.

/// LV: 3 x 30, MCP: 2 x 50, GC: 3 x 48 with angular features, no final bias
/// and H rescaled to the range of |z_dot| (or |z2 - z1| / h for scheme learning).
inline nn::NeuralModelConfig default_model_config(const std::string& experiment,
                                                  nn::Structure structure) {
  nn::NeuralModelConfig c;
  c.structure = structure;
  if (experiment == "lv") {
    c.d = 1;
    c.theta_hidden = c.h_hidden = {30, 30, 30};
  } else if (experiment == "mcp") {
    c.d = 1;
    c.theta_hidden = c.h_hidden = {50, 50};
  } else if (experiment == "gc") {
    c.d = 2;
    c.theta_hidden = c.h_hidden = {48, 48, 48};
    c.final_bias = false;
  } else {
    throw ConfigError("unknown experiment '" + experiment + "'");
  }
  return c;
}

inline nn::Preprocessor default_preprocessor(const std::string& experiment,
                                             const DatasetBundle& data) {
  std::vector<Vec<double>> pts;
  for (std::size_t i : data.pairs.indices(Split::Train)) pts.push_back(data.pairs.z[i]);
  if (pts.empty())
    for (std::size_t i : data.triples.indices(Split::Train)) pts.push_back(data.triples.z1[i]);
  nn::InputNormalizer n = nn::InputNormalizer::fit(pts);
  return experiment == "gc" ? nn::Preprocessor::angular(std::move(n), 6)
                            : nn::Preprocessor::affine(std::move(n));
}

inline std::unique_ptr<nn::NeuralDegenerateModel> make_neural_model(
    const std::string& experiment, nn::Structure structure, const DatasetBundle& data,
    LossVariant variant, std::uint64_t seed, std::optional<nn::NeuralModelConfig> cfg = {}) {
  nn::NeuralModelConfig c = cfg ? *cfg : default_model_config(experiment, structure);
  c.structure = structure;
  if (experiment == "gc" && !c.h_rescale) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    if (variant == LossVariant::Scheme) {
      for (std::size_t i : data.triples.indices(Split::Train)) {
        const double s = std::sqrt(squared_norm(data.triples.z2[i] - data.triples.z1[i])) / data.triples.h;
        lo = std::min(lo, s);
        hi = std::max(hi, s);
      }
    } else {
      for (std::size_t i : data.pairs.indices(Split::Train)) {
        const double s = std::sqrt(squared_norm(data.pairs.zdot[i]));
        lo = std::min(lo, s);
        hi = std::max(hi, s);
      }
    }
    if (std::isfinite(lo) && hi > lo) c.h_rescale = std::make_pair(lo, hi);
  }
  return std::make_unique<nn::NeuralDegenerateModel>(c, default_preprocessor(experiment, data), seed);
}

}  // namespace degenlag
