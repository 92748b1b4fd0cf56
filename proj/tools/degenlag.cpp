// degenlag <action> --experiment {lv|mcp|gc} [--config <path>] --out <dir> [--seed <n>]
//          [--checkpoint <path>] [--scheme {dvi|rk4}] [--h <real>] [--steps <n>]
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 anything else.
// DEGENLAG_THREADS sets the worker count.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "degenlag/experiments.hpp"
#include "degenlag/io.hpp"
#include "degenlag/nn.hpp"
#include "degenlag/train.hpp"

namespace {

using namespace degenlag;
using nlohmann::json;

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Options {
  std::string action;
  std::string experiment;
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::string> checkpoints;
  std::optional<std::string> scheme;
  std::optional<double> h;
  std::optional<long> steps;
};

struct Context {
  Options opt;
  json config = json::object();  // file contents
  json effective;  // config plus flags, hashed into every sidecar
  int threads = 1;

  [[nodiscard]] json section(const char* key) const {
    return config.contains(key) ? config.at(key) : json::object();
  }
  [[nodiscard]] std::string path(const std::string& name) const { return opt.out + "/" + name; }
  void sidecar(const std::string& file, json meta) const {
    meta["action"] = opt.action;
    meta["experiment"] = opt.experiment;
    meta["seed"] = opt.seed;
    meta["config"] = effective;
    io::write_sidecar(file, std::move(meta), effective);
  }
};

json number_or_inf(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? json("nan") : json(v > 0 ? "inf" : "-inf");
}

std::vector<Scheme> schemes_of(const Context& c, const json& section) {
  if (c.opt.scheme) return {parse_scheme(*c.opt.scheme)};
  std::vector<Scheme> out;
  for (const auto& s : section.value("schemes", std::vector<std::string>{"dvi", "rk4"}))
    out.push_back(parse_scheme(s));
  return out;
}

DatasetBundle load_or_generate(const Context& c) {
  if (c.config.contains("dataset")) return io::read_dataset(c.config.at("dataset").get<std::string>());
  return generate_dataset(c.opt.experiment, c.opt.seed, c.section("data"), c.section("model"));
}

std::vector<PhaseState> validation_initial_states(const Context& c, std::size_t n) {
  const DatasetBundle b = load_or_generate(c);
  std::vector<PhaseState> out;
  for (const auto& v : b.initial_states(Split::Validation)) {
    if (out.size() == n) break;
    out.push_back(PhaseState::from_vector(v));
  }
  if (out.empty()) throw ConfigError("the dataset has no validation initial conditions");
  return out;
}

std::vector<PhaseState> initial_states_from(const json& section, int d) {
  std::vector<PhaseState> out;
  if (!section.contains("initial")) return out;
  for (const auto& v : section.at("initial")) {
    const auto z = v.get<std::vector<double>>();
    if (static_cast<int>(z.size()) != 2 * d) throw ConfigError("initial states need 2d entries");
    out.push_back(PhaseState::from_vector(z));
  }
  return out;
}

Simulator model_under_test(const Context& c, const ModelPtr& reference) {
  if (c.opt.checkpoints.size() > 1) throw ConfigError("this action takes a single --checkpoint");
  return c.opt.checkpoints.empty() ? simulator_for("reference", reference)
                                   : load_simulator(c.opt.checkpoints.front());
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Context& c) {
  const DatasetBundle b = generate_dataset(c.opt.experiment, c.opt.seed, c.section("data"), c.section("model"));
  DatasetBundle out = b;
  out.metadata["seed"] = c.opt.seed;
  out.metadata["model_parameters"] = c.section("model");
  io::write_dataset(c.opt.out, out, c.effective);
  std::printf("wrote %zu pairs, %zu triples, %zu initial states to %s\n", b.pairs.size(),
              b.triples.size(), b.initial.size(), c.opt.out.c_str());
  return 0;
}

int cmd_train(const Context& c) {
  const json t = c.section("train");
  const LossVariant variant = parse_loss_variant(t.value("variant", std::string("vf")));
  TrainConfig cfg = train_config_from_json(t, default_train_config(c.opt.experiment, variant));
  cfg.seed = c.opt.seed;
  if (!t.contains("threads")) cfg.threads = c.threads;
  const DatasetBundle data = load_or_generate(c);
  if (data.experiment != c.opt.experiment)
    throw ConfigError("dataset was generated for '" + data.experiment + "'");

  TrainingRun run;
  const std::string stem = c.path("model");
  if (variant == LossVariant::NoStructure) {
    const auto hidden = t.value("hidden", std::vector<int>{40, 40});
    nn::NoStructureModel m(data.pairs.d, hidden, default_preprocessor(c.opt.experiment, data), c.opt.seed);
    run = run_training(cfg, data, m);
    nn::save_checkpoint(stem, m, c.opt.seed);
  } else {
    const std::string structure = t.value("structure", std::string("noncanonical"));
    if (structure != "noncanonical" && structure != "canonical")
      throw ConfigError("structure must be 'noncanonical' or 'canonical'");
    const auto s = structure == "canonical" ? nn::Structure::Canonical : nn::Structure::NonCanonical;
    auto m = make_neural_model(c.opt.experiment, s, data, variant, c.opt.seed);
    run = run_training(cfg, data, *m);
    nn::save_checkpoint(stem, *m, c.opt.seed);
  }
  write_loss_csv(c.path("loss.csv"), run);
  c.sidecar(c.path("loss.csv"), {{"variant", to_string(variant)},
                                 {"epochs", run.history.size()},
                                 {"aborted", run.aborted},
                                 {"message", run.message},
                                 {"checkpoint", "model.json"}});
  io::write_json(c.path("train_config.json"), to_json(cfg));
  std::printf("trained %s for %zu epochs in %.1f s%s\n", to_string(variant), run.history.size(),
              run.seconds, run.aborted ? " (aborted)" : "");
  if (run.aborted) {
    std::fprintf(stderr, "%s\n", run.message.c_str());
    return kExitNumerical;
  }
  return 0;
}

/// Defaults: LV (1, 1) at h = 0.2 for 100k DVI or 250k RK4 steps; MCP (0.5, 1) at
/// h = 0.5; GC the barely trapped orbit at h = T_DT / 20 over 5 T_DT.
int cmd_simulate(const Context& c) {
  const json s = c.section("simulate");
  const ModelPtr reference = reference_model(c.opt.experiment, c.section("model"));
  const Simulator sim = model_under_test(c, reference);
  const Scheme scheme = c.opt.scheme ? parse_scheme(*c.opt.scheme)
                                     : parse_scheme(s.value("scheme", std::string("dvi")));
  PhaseState z0 = c.opt.experiment == "gc" ? gc_initial_state(-7.610e-4)
                  : c.opt.experiment == "lv" ? PhaseState({1.0}, {1.0})
                                             : PhaseState({0.5}, {1.0});
  if (const auto given = initial_states_from(s, sim.dimension()); !given.empty()) z0 = given.front();
  const double h = c.opt.h.value_or(s.value("h", c.opt.experiment == "lv" ? 0.2 : default_step(c.opt.experiment)));
  const long lv_steps = scheme == Scheme::DVI ? 100'000 : 250'000;
  const long steps = c.opt.steps.value_or(
      s.value("steps", c.opt.experiment == "lv" ? lv_steps : c.opt.experiment == "gc" ? 100L : 1000L));
  const int every = s.value("record_every", 1);
  const Trajectory tr = sim.run(z0, h, steps, scheme, [&reference](const PhaseState& z) {
    return reference->evaluate(z, EvalOrder::Value).hamiltonian;
  }, every);
  const std::string file = c.path("trajectory.csv");
  io::write_trajectory_csv(file, tr);
  c.sidecar(file, {{"model", sim.label},
                   {"scheme", to_string(scheme)},
                   {"h", h},
                   {"steps", steps},
                   {"record_every", every},
                   {"diverged", tr.diverged}});
  std::printf("%s %s: %zu states, %s\n", sim.label.c_str(), to_string(scheme), tr.size(),
              tr.diverged ? "diverged" : "completed");
  return tr.diverged ? kExitNumerical : 0;
}

/// Errors at t_final (default 10) from validation initial conditions against the
/// reference model's exact flow, on a dyadic ladder starting at the published h.
int cmd_convergence(const Context& c) {
  const json s = c.section("convergence");
  const ModelPtr reference = reference_model(c.opt.experiment, c.section("model"));
  const Simulator sim = model_under_test(c, reference);
  std::vector<double> steps;
  if (s.contains("h") && !c.opt.h) {
    steps = s.at("h").get<std::vector<double>>();
  } else {
    double h = c.opt.h.value_or(default_step(c.opt.experiment));
    for (int k = 0; k < s.value("levels", 5); ++k, h /= 2) steps.push_back(h);
  }
  const double t_final = s.value("t_final", c.opt.experiment == "gc" ? kGuidingCenterPeriodDT : 10.0);
  auto initial = initial_states_from(s, sim.dimension());
  if (initial.empty()) initial = validation_initial_states(c, s.value("initial_conditions", 20));
  const ConvergenceStudy study =
      convergence_study(sim, *reference, initial, steps, schemes_of(c, s), t_final, c.threads);

  {
    auto os = io::open_output(c.path("convergence_runs.csv"));
    os << "h,scheme,run,global_error\n";
    for (const auto& r : study.records)
      os << io::format_double(r.h) << ',' << to_string(r.scheme) << ',' << r.run << ','
         << io::format_double(r.error) << '\n';
  }
  {
    auto os = io::open_output(c.path("convergence.csv"));
    os << "h,scheme,global_error,p05,p95,runs,diverged\n";
    for (const auto& r : study.summary) {
      os << io::format_double(r.h) << ',' << to_string(r.scheme) << ',' << io::format_double(r.median)
         << ',' << io::format_double(r.p05) << ',' << io::format_double(r.p95) << ',' << r.runs << ','
         << r.diverged << '\n';
      std::printf("%-4s h=%-10g median %-12.4e p05 %-12.4e p95 %-12.4e diverged %zu/%zu\n",
                  to_string(r.scheme), r.h, r.median, r.p05, r.p95, r.diverged, r.runs);
    }
  }
  const json meta = {{"model", sim.label}, {"t_final", t_final}, {"initial_conditions", initial.size()},
                     {"global_error", "median Euclidean error at t_final; p05 and p95 percentiles"}};
  c.sidecar(c.path("convergence.csv"), meta);
  c.sidecar(c.path("convergence_runs.csv"), meta);
  return study.all_divergent() ? kExitNumerical : 0;
}

json orbit_json(const std::vector<OrbitReport>& orbits) {
  json out = json::array();
  for (const auto& o : orbits)
    out.push_back({{"name", o.name},
                   {"u0", o.u0},
                   {"classification", to_string(o.numerical)},
                   {"exact_classification", to_string(o.exact)},
                   {"diverged", o.diverged}});
  return out;
}

/// Runs the (model x scheme x initial condition) grid against the reference flow.
int cmd_compare(const Context& c) {
  const json s = c.section("compare");
  const ModelPtr reference = reference_model(c.opt.experiment, c.section("model"));
  std::vector<Simulator> sims{simulator_for("reference", reference)};
  std::vector<std::string> paths = c.opt.checkpoints;
  for (const auto& p : s.value("checkpoints", std::vector<std::string>{})) paths.push_back(p);
  for (const auto& p : paths) sims.push_back(load_simulator(p));

  const bool gc = c.opt.experiment == "gc";
  const double h = c.opt.h.value_or(s.value("h", default_step(c.opt.experiment)));
  const long steps = c.opt.steps.value_or(s.value("steps", gc ? 100L : std::lround(10.0 / h)));
  std::vector<PhaseState> initial = initial_states_from(s, reference->dimension());
  std::vector<std::string> names;
  if (gc && initial.empty())
    for (const auto& o : kGuidingCenterOrbits) {
      initial.push_back(gc_initial_state(o.u0));
      names.emplace_back(o.name);
    }
  if (initial.empty()) initial = validation_initial_states(c, s.value("initial_conditions", 5));
  for (std::size_t i = names.size(); i < initial.size(); ++i) names.push_back("ic" + std::to_string(i));

  const auto energy = [&reference](const PhaseState& z) {
    return reference->evaluate(z, EvalOrder::Value).hamiltonian;
  };
  std::vector<Trajectory> exact(initial.size());
  parallel_for(initial.size(), c.threads, [&](std::size_t i) {
    exact[i] = reference_solve(*reference, initial[i], 0.0, h * static_cast<double>(steps),
                               static_cast<int>(steps));
  });

  json runs = json::array();
  json classification = json::array();
  std::size_t total = 0, diverged = 0;
  std::filesystem::create_directories(c.path("runs"));
  for (const auto& sim : sims) {
    for (Scheme scheme : schemes_of(c, s)) {
      if (!sim.supports(scheme)) continue;
      std::vector<Trajectory> tr(initial.size());
      parallel_for(initial.size(), c.threads,
                   [&](std::size_t i) { tr[i] = sim.run(initial[i], h, steps, scheme, energy); });
      for (std::size_t i = 0; i < initial.size(); ++i) {
        const std::string file = "runs/" + sim.label + "_" + to_string(scheme) + "_" + names[i] + ".csv";
        io::write_trajectory_csv(c.path(file), tr[i]);
        const auto drift = relative_energy_drift(tr[i]);
        double max_drift = 0.0;
        for (double d : drift) max_drift = std::max(max_drift, std::abs(d));
        runs.push_back({{"model", sim.label},
                        {"scheme", to_string(scheme)},
                        {"initial", names[i]},
                        {"diverged", tr[i].diverged},
                        {"sup_error", number_or_inf(sup_error(tr[i], exact[i]))},
                        {"max_relative_energy_drift", number_or_inf(max_drift)},
                        {"final_relative_energy_drift", number_or_inf(drift.empty() ? 0.0 : drift.back())},
                        {"trajectory", file}});
        ++total;
        if (tr[i].diverged) ++diverged;
      }
      if (gc) {
        const auto orbits = classify_named_orbits(sim, *reference, scheme, h, steps, c.threads);
        classification.push_back({{"model", sim.label}, {"scheme", to_string(scheme)}, {"orbits", orbit_json(orbits)}});
        for (const auto& o : orbits)
          std::printf("%-12s %-4s %s: %s (exact %s)\n", sim.label.c_str(), to_string(scheme),
                      o.name.c_str(), to_string(o.numerical), to_string(o.exact));
      }
    }
  }
  json metrics = {{"h", h}, {"steps", steps}, {"runs", runs}};
  if (gc) metrics["classification"] = classification;
  io::write_json(c.path("metrics.json"), metrics);
  c.sidecar(c.path("metrics.json"), {{"models", paths}, {"runs", total}, {"diverged", diverged}});
  std::printf("%zu runs, %zu diverged\n", total, diverged);
  return total > 0 && diverged == total ? kExitNumerical : 0;
}

/// Guiding-center BP/BT/WT/DT classification, default h = T_DT / 20 over 5 T_DT.
int cmd_classify(const Context& c) {
  if (c.opt.experiment != "gc") throw ConfigError("classify applies to the guiding-center experiment");
  const json s = c.section("classify");
  const ModelPtr reference = reference_model(c.opt.experiment, c.section("model"));
  const Simulator sim = model_under_test(c, reference);
  const Scheme scheme = c.opt.scheme ? parse_scheme(*c.opt.scheme)
                                     : parse_scheme(s.value("scheme", std::string("dvi")));
  const double h = c.opt.h.value_or(s.value("h", default_step("gc")));
  const long steps = c.opt.steps.value_or(s.value("steps", 100L));
  const auto orbits = classify_named_orbits(sim, *reference, scheme, h, steps, c.threads);
  for (const auto& o : orbits) {
    io::write_trajectory_csv(c.path("orbit_" + o.name + ".csv"), o.trajectory);
    std::printf("%s: %s (exact %s)%s\n", o.name.c_str(), to_string(o.numerical), to_string(o.exact),
                o.diverged ? ", diverged" : "");
  }
  io::write_json(c.path("classification.json"),
                 {{"model", sim.label}, {"scheme", to_string(scheme)}, {"h", h}, {"steps", steps},
                  {"orbits", orbit_json(orbits)}});
  c.sidecar(c.path("classification.json"), {{"model", sim.label}});
  bool all = true;
  for (const auto& o : orbits) all = all && o.diverged;
  return all ? kExitNumerical : 0;
}

int dispatch(Context& c) {
  check_experiment(c.opt.experiment);
  if (!c.opt.config_path.empty()) c.config = io::read_json(c.opt.config_path);
  if (!c.config.is_object()) throw ConfigError("the configuration must be a JSON object");
  c.threads = default_threads();
  c.effective = c.config;
  c.effective["flags"] = {{"experiment", c.opt.experiment}, {"seed", c.opt.seed},
                          {"checkpoints", c.opt.checkpoints}};
  if (c.opt.scheme) c.effective["flags"]["scheme"] = *c.opt.scheme;
  if (c.opt.h) c.effective["flags"]["h"] = *c.opt.h;
  if (c.opt.steps) c.effective["flags"]["steps"] = *c.opt.steps;
  std::filesystem::create_directories(c.opt.out);
  try {
    if (c.opt.action == "gen-data") return cmd_gen_data(c);
    if (c.opt.action == "train") return cmd_train(c);
    if (c.opt.action == "simulate") return cmd_simulate(c);
    if (c.opt.action == "convergence") return cmd_convergence(c);
    if (c.opt.action == "compare") return cmd_compare(c);
    if (c.opt.action == "classify") return cmd_classify(c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  throw ConfigError("unknown action '" + c.opt.action + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Degenerate variational integration and structure-preserving learning"};
  app.set_help_flag("--help", "print this help and exit");
  Context c;
  Options& o = c.opt;
  app.add_option("action", o.action, "gen-data | train | simulate | convergence | compare | classify")
      ->required()
      ->check(CLI::IsMember({"gen-data", "train", "simulate", "convergence", "compare", "classify"}));
  app.add_option("--experiment", o.experiment, "lv | mcp | gc")
      ->required()
      ->check(CLI::IsMember({"lv", "mcp", "gc"}));
  app.add_option("--config", o.config_path, "JSON configuration")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "output directory")->required();
  app.add_option("--seed", o.seed, "random seed");
  app.add_option("--checkpoint", o.checkpoints, "model checkpoint (repeatable for compare)");
  app.add_option("--scheme", o.scheme, "dvi | rk4")->check(CLI::IsMember({"dvi", "rk4"}));
  app.add_option("--h", o.h, "time step")->check(CLI::PositiveNumber);
  app.add_option("--steps", o.steps, "number of steps")->check(CLI::NonNegativeNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  try {
    return dispatch(c);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
