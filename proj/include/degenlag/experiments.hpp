#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "degenlag/core.hpp"
#include "degenlag/errors.hpp"
#include "degenlag/integrate.hpp"
#include "degenlag/models.hpp"
#include "degenlag/nn.hpp"
#include "degenlag/train.hpp"

namespace degenlag {

/// Runs fn(i) for i in [0, n) on `threads` workers; each index is handled once.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Linear-interpolation percentile, q in [0, 1]; infinite entries sort last.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || v[lo] == v[hi]) return v[lo];
  if (std::isinf(v[hi])) return v[hi];
  return v[lo] + frac * (v[hi] - v[lo]);
}

// ---------------------------------------------------------------------------
// Reference models and experiment defaults.

inline void check_experiment(const std::string& e) {
  if (e != "lv" && e != "mcp" && e != "gc") throw ConfigError("unknown experiment '" + e + "'");
}

/// Reference model with parameters from `params` (MCP: A0, E0; GC: B0, R0, q0, mu).
/// An optional "gauge": {"amplitude", "frequency"} adds a cosine gauge for d = 1.
inline ModelPtr reference_model(const std::string& experiment,
                                const nlohmann::json& params = nlohmann::json::object()) {
  check_experiment(experiment);
  ModelPtr m;
  try {
    if (experiment == "lv") {
      m = std::make_shared<LotkaVolterraModel>();
    } else if (experiment == "mcp") {
      m = std::make_shared<MasslessParticleModel>(params.value("A0", 1.0), params.value("E0", 1.0));
    } else {
      GuidingCenterParams p;
      p.b0 = params.value("B0", p.b0);
      p.r0 = params.value("R0", p.r0);
      p.q0 = params.value("q0", p.q0);
      p.mu = params.value("mu", p.mu);
      p.quadrature_points = params.value("quadrature_points", p.quadrature_points);
      m = std::make_shared<GuidingCenterModel>(p);
    }
    if (params.contains("gauge")) {
      if (m->dimension() != 1) throw ConfigError("the cosine gauge is defined for d = 1 only");
      const auto& g = params.at("gauge");
      m = gauge_perturb(m, cosine_gauge(g.value("amplitude", 0.5), g.value("frequency", 2.0)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model parameters: ") + e.what());
  }
  return m;
}

/// Dataset with the published protocol; `data` may override sizes and steps.
inline DatasetBundle generate_dataset(const std::string& experiment, std::uint64_t seed,
                                      const nlohmann::json& data = nlohmann::json::object(),
                                      const nlohmann::json& params = nlohmann::json::object()) {
  check_experiment(experiment);
  try {
    if (experiment == "lv")
      return gen_dataset_lv(data.value("trajectories", 2000), data.value("steps", 5),
                            data.value("h", 0.1), seed);
    if (experiment == "mcp")
      return gen_dataset_mcp(data.value("points", 15000), seed, data.value("h", 0.5),
                             data.value("potential_bound", 1.5));
    GuidingCenterParams p;
    p.b0 = params.value("B0", p.b0);
    p.r0 = params.value("R0", p.r0);
    p.q0 = params.value("q0", p.q0);
    p.mu = params.value("mu", p.mu);
    return gen_dataset_gc(data.value("trajectories", 600), seed, data.value("steps", 60), p);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid dataset settings: ") + e.what());
  }
}

/// Step sizes used by the published experiments.
inline double default_step(const std::string& experiment) {
  check_experiment(experiment);
  if (experiment == "lv") return 0.1;
  if (experiment == "mcp") return 0.5;
  return kGuidingCenterPeriodDT / 20.0;
}

// ---------------------------------------------------------------------------
// Simulators: a structured model (DVI or RK4) or a bare learned field (RK4 only).

struct Simulator {
  std::string label;
  ModelPtr model;
  std::shared_ptr<const nn::NoStructureModel> field;

  [[nodiscard]] bool supports(Scheme s) const { return model != nullptr || s == Scheme::RK4; }
  [[nodiscard]] int dimension() const { return model ? model->dimension() : field->dimension(); }

  /// `energy` is the ground-truth H recorded alongside the states.
  [[nodiscard]] Trajectory run(const PhaseState& z0, double h, long steps, Scheme scheme,
                               const std::function<double(const PhaseState&)>& energy = {},
                               int record_every = 1) const {
    if (!supports(scheme))
      throw ConfigError("model '" + label + "' has no Lagrangian structure and cannot use the DVI");
    std::function<double(const PhaseState&)> safe;
    if (energy)
      safe = [&energy](const PhaseState& z) {
        try {
          return energy(z);
        } catch (const std::exception&) {
          return std::numeric_limits<double>::quiet_NaN();
        }
      };
    Trajectory tr;
    if (model) {
      SimulationOptions o;
      o.scheme = scheme;
      o.record_every = record_every;
      o.reference_energy = safe;
      tr = simulate(*model, z0, h, steps, o);
    } else {
      tr = simulate_field(field->as_field(), z0, h, steps, {}, record_every);
      if (safe)
        for (const auto& z : tr.states) tr.reference_energy.push_back(safe(z));
    }
    for (const auto& z : tr.states)
      if (!all_finite(z.to_vector())) tr.diverged = true;
    return tr;
  }
};

inline Simulator simulator_for(std::string label, ModelPtr m) {
  return {std::move(label), std::move(m), nullptr};
}

/// Loads a structured or no-structure checkpoint by its manifest type.
inline Simulator load_simulator(const std::string& path) {
  const nlohmann::json j = nn::read_manifest(path);
  std::string label = path;
  if (const auto slash = label.find_last_of('/'); slash != std::string::npos)
    label = label.substr(slash + 1);
  if (label.ends_with(".json")) label.resize(label.size() - 5);
  if (j.value("type", std::string("degenerate")) == "no_structure")
    return {label, nullptr, std::shared_ptr<const nn::NoStructureModel>(nn::load_no_structure_checkpoint(path))};
  return {label, ModelPtr(nn::load_checkpoint(path)), nullptr};
}

// ---------------------------------------------------------------------------
// Convergence studies.

struct ConvergenceRecord {
  double h = 0.0;
  Scheme scheme = Scheme::DVI;
  std::size_t run = 0;
  double error = 0.0;  // infinite for divergent runs
};

struct ConvergenceSummary {
  double h = 0.0;
  Scheme scheme = Scheme::DVI;
  double median = 0.0;
  double p05 = 0.0;
  double p95 = 0.0;
  std::size_t runs = 0;
  std::size_t diverged = 0;
};

struct ConvergenceStudy {
  std::vector<ConvergenceRecord> records;
  std::vector<ConvergenceSummary> summary;

  [[nodiscard]] bool all_divergent() const {
    return std::all_of(records.begin(), records.end(),
                       [](const ConvergenceRecord& r) { return std::isinf(r.error); });
  }
  [[nodiscard]] const ConvergenceSummary& at(double h, Scheme s) const {
    for (const auto& r : summary)
      if (r.scheme == s && std::abs(r.h - h) <= 1e-12 * h) return r;
    throw ConfigError("no convergence entry for this step and scheme");
  }
};

inline long steps_for(double t_final, double h) {
  const double n = t_final / h;
  const long k = std::lround(n);
  if (k < 1 || std::abs(n - static_cast<double>(k)) > 1e-9 * n)
    throw ConfigError("t_final must be a multiple of every step size");
  return k;
}

/// Errors |z_h(t_final) - z(t_final)| (Euclidean) against the exact flow of `truth`.
inline ConvergenceStudy convergence_study(const Simulator& sim, const DegenerateModel& truth,
                                          const std::vector<PhaseState>& initial,
                                          const std::vector<double>& steps,
                                          const std::vector<Scheme>& schemes, double t_final,
                                          int threads, const ReferenceOptions& ref = {}) {
  if (initial.empty()) throw ConfigError("convergence study needs initial conditions");
  std::vector<Vec<double>> exact(initial.size());
  parallel_for(initial.size(), threads, [&](std::size_t i) {
    exact[i] = reference_solve(truth, initial[i], 0.0, t_final, 1, ref).states.back().to_vector();
  });
  ConvergenceStudy out;
  for (Scheme s : schemes) {
    if (!sim.supports(s)) continue;
    for (double h : steps) {
      const long n = steps_for(t_final, h);
      std::vector<double> err(initial.size());
      parallel_for(initial.size(), threads, [&](std::size_t i) {
        const Trajectory tr = sim.run(initial[i], h, n, s, {}, static_cast<int>(std::min<long>(n, 1 << 30)));
        err[i] = tr.diverged ? std::numeric_limits<double>::infinity()
                             : std::sqrt(squared_norm(tr.states.back().to_vector() - exact[i]));
      });
      ConvergenceSummary row{h, s, percentile(err, 0.5), percentile(err, 0.05), percentile(err, 0.95),
                             err.size(), 0};
      for (std::size_t i = 0; i < err.size(); ++i) {
        out.records.push_back({h, s, i, err[i]});
        if (std::isinf(err[i])) ++row.diverged;
      }
      out.summary.push_back(row);
    }
  }
  return out;
}

/// Least-squares slope of log(error) against log(h).
inline double log_log_slope(const std::vector<double>& h, const std::vector<double>& err) {
  if (h.size() != err.size() || h.size() < 2) throw ConfigError("slope needs matching samples");
  double mx = 0.0, my = 0.0;
  const auto n = static_cast<double>(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    mx += std::log(h[i]) / n;
    my += std::log(err[i]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double dx = std::log(h[i]) - mx;
    sxy += dx * (std::log(err[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Trajectory metrics.

/// max_k |a_k - b_k|_inf over the common prefix; infinite if either diverged early.
inline double sup_error(const Trajectory& a, const Trajectory& b) {
  if ((a.diverged && a.size() < b.size()) || (b.diverged && b.size() < a.size()))
    return std::numeric_limits<double>::infinity();
  double e = 0.0;
  for (std::size_t k = 0; k < std::min(a.size(), b.size()); ++k)
    e = std::max(e, sup_norm(a.states[k].to_vector() - b.states[k].to_vector()));
  return e;
}

/// (H_k - H_0) / |H_0| for the recorded ground-truth energy (the model's own if none).
inline std::vector<double> relative_energy_drift(const Trajectory& tr) {
  const auto& e = tr.reference_energy.size() == tr.size() ? tr.reference_energy : tr.energy;
  std::vector<double> out;
  if (e.empty()) return out;
  const double h0 = e.front();
  for (double v : e) out.push_back((v - h0) / std::abs(h0));
  return out;
}

// ---------------------------------------------------------------------------
// Guiding-center orbit classification.

struct OrbitReport {
  std::string name;
  double u0 = 0.0;
  OrbitClass numerical = OrbitClass::Passing;
  OrbitClass exact = OrbitClass::Passing;
  bool diverged = false;
  Trajectory trajectory;
};

/// Runs the named orbits for `steps` steps of size h and classifies them; the
/// exact class comes from the reference flow of `truth` over the same time.
inline std::vector<OrbitReport> classify_named_orbits(const Simulator& sim, const DegenerateModel& truth,
                                                      Scheme scheme, double h, long steps, int threads) {
  if (sim.dimension() != 2) throw ConfigError("orbit classification needs the guiding-center model");
  std::vector<OrbitReport> out(std::size(kGuidingCenterOrbits));
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const NamedOrbit& o = kGuidingCenterOrbits[i];
    const PhaseState z0 = gc_initial_state(o.u0);
    OrbitReport& r = out[i];
    r.name = o.name;
    r.u0 = o.u0;
    r.trajectory = sim.run(z0, h, steps, scheme, [&truth](const PhaseState& z) {
      return truth.evaluate(z, EvalOrder::Value).hamiltonian;
    });
    r.diverged = r.trajectory.diverged;
    r.numerical = r.trajectory.size() >= 2 ? gc_classify_trajectory(r.trajectory) : OrbitClass::Passing;
    const int n_out = static_cast<int>(std::max<long>(400, 20 * steps));
    r.exact = gc_classify_trajectory(reference_solve(truth, z0, 0.0, h * static_cast<double>(steps), n_out));
  });
  return out;
}

}  // namespace degenlag
