#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "degenlag/integrate.hpp"
#include "degenlag/io.hpp"
#include "degenlag/models.hpp"

using namespace degenlag;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("degenlag_test_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(FormatDouble, RoundTripsRandomValues) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> expo(-300, 300);
  for (int k = 0; k < 2000; ++k) {
    const double v = std::ldexp(mant(rng), expo(rng));
    EXPECT_EQ(io::parse_double(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(0.1), "0.1");
}

TEST(FormatDouble, NonFiniteValues) {
  EXPECT_EQ(io::format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(io::format_double(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_EQ(io::format_double(std::nan("")), "nan");
  EXPECT_TRUE(std::isnan(io::parse_double("nan")));
  EXPECT_EQ(io::parse_double("-inf"), -std::numeric_limits<double>::infinity());
}

TEST(ParseDouble, RejectsMalformedText) {
  EXPECT_THROW((void)io::parse_double(""), ConfigError);
  EXPECT_THROW((void)io::parse_double("1.5x"), ConfigError);
  EXPECT_THROW((void)io::parse_double("abc"), ConfigError);
}

TEST(SplitCsvLine, KeepsEmptyTrailingCell) {
  EXPECT_EQ(io::split_csv_line("a,b,"), (std::vector<std::string>{"a", "b", ""}));
  EXPECT_EQ(io::split_csv_line("1,,3"), (std::vector<std::string>{"1", "", "3"}));
}

TEST(ReadCsv, MissingFileIsConfigError) {
  EXPECT_THROW((void)io::read_csv("/nonexistent/degenlag.csv"), ConfigError);
}

TEST(ConfigHash, StableAndSensitive) {
  const nlohmann::json a = {{"train", {{"epsilon", 1e-6}, {"variant", "vf"}}}};
  const nlohmann::json b = {{"train", {{"variant", "vf"}, {"epsilon", 1e-6}}}};
  const nlohmann::json c = {{"train", {{"variant", "vf"}, {"epsilon", 1e-5}}}};
  EXPECT_EQ(io::config_hash(a), io::config_hash(b));
  EXPECT_NE(io::config_hash(a), io::config_hash(c));
  EXPECT_EQ(io::config_hash(a).size(), 16u);
}

TEST(Sidecar, RecordsVersionHashAndFile) {
  const fs::path dir = scratch("sidecar");
  const std::string path = (dir / "out.csv").string();
  const nlohmann::json config = {{"seed", 3}};
  io::write_sidecar(path, {{"experiment", "lv"}}, config);
  const nlohmann::json j = io::read_json(path + ".json");
  EXPECT_EQ(j.at("library_version"), kLibraryVersion);
  EXPECT_EQ(j.at("config_hash"), io::config_hash(config));
  EXPECT_EQ(j.at("file"), "out.csv");
  EXPECT_EQ(j.at("experiment"), "lv");
  fs::remove_all(dir);
}

TEST(TrajectoryCsv, RoundTripIsExact) {
  const LotkaVolterraModel m;
  SimulationOptions o;
  o.reference_energy = [&m](const PhaseState& z) { return m.evaluate(z, EvalOrder::Value).hamiltonian; };
  const Trajectory a = simulate(m, PhaseState({1.3}, {0.7}), 0.1, 25, o);
  const fs::path dir = scratch("trajectory");
  const std::string path = (dir / "sub" / "t.csv").string();
  io::write_trajectory_csv(path, a);
  const Trajectory b = io::read_trajectory_csv(path);
  ASSERT_EQ(b.size(), a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(b.times[k], a.times[k]);
    EXPECT_EQ(b.states[k].to_vector(), a.states[k].to_vector());
    EXPECT_EQ(b.energy[k], a.energy[k]);
    EXPECT_EQ(b.reference_energy[k], a.reference_energy[k]);
    EXPECT_EQ(b.newton_iterations[k], a.newton_iterations[k]);
    EXPECT_EQ(b.residuals[k], a.residuals[k]);
  }
  EXPECT_FALSE(b.diverged);
  fs::remove_all(dir);
}

TEST(TrajectoryCsv, DivergedFlagSurvives) {
  Trajectory t;
  t.push(0.0, PhaseState({1.0, 2.0}, {3.0, 4.0}), 0, 0.0, 1.0);
  t.diverged = true;
  const fs::path dir = scratch("diverged");
  const std::string path = (dir / "t.csv").string();
  io::write_trajectory_csv(path, t);
  const Trajectory b = io::read_trajectory_csv(path);
  EXPECT_TRUE(b.diverged);
  EXPECT_EQ(b.states[0].dim(), 2);
  EXPECT_TRUE(b.reference_energy.empty());
  EXPECT_THROW(io::write_trajectory_csv(path, Trajectory{}), ConfigError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, RoundTripIsExact) {
  const DatasetBundle a = gen_dataset_lv(12, 5, 0.1, 3);
  const fs::path dir = scratch("dataset");
  io::write_dataset(dir.string(), a, {{"seed", 3}});
  for (const char* f : {"pairs.csv", "triples.csv", "initial.csv", "metadata.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const DatasetBundle b = io::read_dataset(dir.string());
  EXPECT_EQ(b.experiment, a.experiment);
  EXPECT_EQ(b.pairs.d, a.pairs.d);
  EXPECT_EQ(b.pairs.z, a.pairs.z);
  EXPECT_EQ(b.pairs.zdot, a.pairs.zdot);
  EXPECT_EQ(b.pairs.split, a.pairs.split);
  EXPECT_EQ(b.pairs.source, a.pairs.source);
  EXPECT_EQ(b.triples.h, a.triples.h);
  EXPECT_EQ(b.triples.z0, a.triples.z0);
  EXPECT_EQ(b.triples.z1, a.triples.z1);
  EXPECT_EQ(b.triples.z2, a.triples.z2);
  EXPECT_EQ(b.triples.split, a.triples.split);
  EXPECT_EQ(b.initial, a.initial);
  EXPECT_EQ(b.initial_split, a.initial_split);
  const nlohmann::json meta = io::read_json((dir / "metadata.json").string());
  EXPECT_EQ(meta.at("config_hash"), io::config_hash({{"seed", 3}}));
  fs::remove_all(dir);
}

TEST(DatasetFiles, RewritingGivesIdenticalBytes) {
  const DatasetBundle a = gen_dataset_lv(6, 5, 0.1, 4);
  const fs::path d1 = scratch("bytes1");
  const fs::path d2 = scratch("bytes2");
  io::write_dataset(d1.string(), a, {});
  io::write_dataset(d2.string(), gen_dataset_lv(6, 5, 0.1, 4), {});
  for (const char* f : {"pairs.csv", "triples.csv", "initial.csv", "metadata.json"})
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(DatasetFiles, MissingDirectoryIsConfigError) {
  EXPECT_THROW((void)io::read_dataset("/nonexistent/degenlag"), ConfigError);
}
