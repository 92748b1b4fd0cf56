#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "degenlag/errors.hpp"
#include "degenlag/train.hpp"
#include "degenlag/trajectory.hpp"

namespace degenlag::io {

// ---------------------------------------------------------------------------
// Text helpers.

/// Shortest round-trip text for a double; inf and nan spelled as such.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Header plus rows of a comma-separated file without quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  [[nodiscard]] int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
  [[nodiscard]] int require(const std::string& name, const std::string& path) const {
    const int c = column(name);
    if (c < 0) throw ConfigError("'" + path + "' has no column '" + name + "'");
    return c;
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("'" + path + "' is empty");
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size())
      throw ConfigError("'" + path + "': row " + std::to_string(t.rows.size() + 1) + " has " +
                        std::to_string(row.size()) + " cells, expected " +
                        std::to_string(t.header.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::ofstream open_output(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  return os;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  auto os = open_output(path);
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  try {
    nlohmann::json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metadata sidecars.

/// FNV-1a of the compact dump, which nlohmann writes with sorted keys.
inline std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// `<path>.json` next to an output file, carrying the config hash and library version.
inline void write_sidecar(const std::string& path, nlohmann::json meta, const nlohmann::json& config) {
  meta["library_version"] = kLibraryVersion;
  meta["config_hash"] = config_hash(config);
  meta["file"] = std::filesystem::path(path).filename().string();
  write_json(path + ".json", meta);
}

// ---------------------------------------------------------------------------
// Trajectories.

/// Columns t, x_1..x_d, y_1..y_d, H, newton_iters, residual, diverged and,
/// when a ground-truth energy was recorded, H_ref. The diverged flag is the
/// trajectory's and repeats on every row.
inline void write_trajectory_csv(const std::string& path, const Trajectory& tr) {
  if (tr.size() == 0) throw ConfigError("cannot write an empty trajectory");
  const int d = tr.states.front().dim();
  const bool ref = tr.reference_energy.size() == tr.size();
  auto os = open_output(path);
  os << 't';
  for (int i = 1; i <= d; ++i) os << ",x_" << i;
  for (int i = 1; i <= d; ++i) os << ",y_" << i;
  os << ",H,newton_iters,residual,diverged";
  if (ref) os << ",H_ref";
  os << '\n';
  for (std::size_t k = 0; k < tr.size(); ++k) {
    os << format_double(tr.times[k]);
    for (double v : tr.states[k].x()) os << ',' << format_double(v);
    for (double v : tr.states[k].y()) os << ',' << format_double(v);
    os << ',' << format_double(tr.energy[k]) << ',' << tr.newton_iterations[k] << ','
       << format_double(tr.residuals[k]) << ',' << (tr.diverged ? 1 : 0);
    if (ref) os << ',' << format_double(tr.reference_energy[k]);
    os << '\n';
  }
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  int d = 0;
  while (t.column("x_" + std::to_string(d + 1)) >= 0) ++d;
  if (d == 0) throw ConfigError("'" + path + "' has no column 'x_1'");
  const int ct = t.require("t", path);
  const int ch = t.require("H", path);
  const int cn = t.require("newton_iters", path);
  const int cr = t.require("residual", path);
  const int cd = t.require("diverged", path);
  const int cref = t.column("H_ref");
  Trajectory tr;
  for (const auto& row : t.rows) {
    Vec<double> x(static_cast<std::size_t>(d)), y(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      x[static_cast<std::size_t>(i)] =
          parse_double(row[static_cast<std::size_t>(t.require("x_" + std::to_string(i + 1), path))]);
      y[static_cast<std::size_t>(i)] =
          parse_double(row[static_cast<std::size_t>(t.require("y_" + std::to_string(i + 1), path))]);
    }
    tr.push(parse_double(row[static_cast<std::size_t>(ct)]), PhaseState(x, y),
            std::stoi(row[static_cast<std::size_t>(cn)]), parse_double(row[static_cast<std::size_t>(cr)]),
            parse_double(row[static_cast<std::size_t>(ch)]));
    if (cref >= 0) tr.reference_energy.push_back(parse_double(row[static_cast<std::size_t>(cref)]));
    if (row[static_cast<std::size_t>(cd)] == "1") tr.diverged = true;
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Datasets: pairs.csv, triples.csv, initial.csv and metadata.json in one directory.

namespace detail {

inline void coordinate_header(std::ostream& os, const std::string& prefix, int d) {
  for (int i = 1; i <= d; ++i) os << ',' << prefix << "x_" << i;
  for (int i = 1; i <= d; ++i) os << ',' << prefix << "y_" << i;
}

inline void write_values(std::ostream& os, const Vec<double>& v) {
  for (double a : v) os << ',' << format_double(a);
}

inline Vec<double> read_block(const CsvTable& t, const std::vector<std::string>& row,
                              const std::string& prefix, int d, const std::string& path) {
  Vec<double> v;
  for (const char* part : {"x_", "y_"})
    for (int i = 1; i <= d; ++i)
      v.push_back(parse_double(
          row[static_cast<std::size_t>(t.require(prefix + part + std::to_string(i), path))]));
  return v;
}

}  // namespace detail

inline void write_dataset(const std::string& dir, const DatasetBundle& b, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  const int d = b.pairs.d;
  {
    auto os = open_output(dir + "/pairs.csv");
    os << "source,split";
    detail::coordinate_header(os, "", d);
    detail::coordinate_header(os, "d", d);
    os << '\n';
    for (std::size_t i = 0; i < b.pairs.size(); ++i) {
      os << b.pairs.source[i] << ',' << to_string(b.pairs.split[i]);
      detail::write_values(os, b.pairs.z[i]);
      detail::write_values(os, b.pairs.zdot[i]);
      os << '\n';
    }
  }
  {
    auto os = open_output(dir + "/triples.csv");
    os << "source,split";
    for (const char* p : {"z0_", "z1_", "z2_"}) detail::coordinate_header(os, p, d);
    os << '\n';
    for (std::size_t i = 0; i < b.triples.size(); ++i) {
      os << b.triples.source[i] << ',' << to_string(b.triples.split[i]);
      detail::write_values(os, b.triples.z0[i]);
      detail::write_values(os, b.triples.z1[i]);
      detail::write_values(os, b.triples.z2[i]);
      os << '\n';
    }
  }
  {
    auto os = open_output(dir + "/initial.csv");
    os << "source,split";
    detail::coordinate_header(os, "", d);
    os << '\n';
    for (std::size_t i = 0; i < b.initial.size(); ++i) {
      os << i << ',' << to_string(b.initial_split[i]);
      detail::write_values(os, b.initial[i]);
      os << '\n';
    }
  }
  nlohmann::json meta = b.metadata;
  meta["experiment"] = b.experiment;
  meta["d"] = d;
  meta["triple_h"] = b.triples.h;
  meta["files"] = {"pairs.csv", "triples.csv", "initial.csv"};
  meta["library_version"] = kLibraryVersion;
  meta["config_hash"] = config_hash(config);
  write_json(dir + "/metadata.json", meta);
}

inline DatasetBundle read_dataset(const std::string& dir) {
  DatasetBundle b;
  b.metadata = read_json(dir + "/metadata.json");
  try {
    b.experiment = b.metadata.at("experiment").get<std::string>();
    b.pairs.d = b.triples.d = b.metadata.at("d").get<int>();
    b.triples.h = b.metadata.at("triple_h").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("incomplete dataset metadata in '" + dir + "': " + e.what());
  }
  const int d = b.pairs.d;
  const auto source = [](const CsvTable& t, const std::vector<std::string>& row, const std::string& p) {
    return std::stoi(row[static_cast<std::size_t>(t.require("source", p))]);
  };
  const auto split = [](const CsvTable& t, const std::vector<std::string>& row, const std::string& p) {
    return parse_split(row[static_cast<std::size_t>(t.require("split", p))]);
  };
  {
    const std::string p = dir + "/pairs.csv";
    const CsvTable t = read_csv(p);
    for (const auto& row : t.rows)
      b.pairs.push(detail::read_block(t, row, "", d, p), detail::read_block(t, row, "d", d, p),
                   split(t, row, p), source(t, row, p));
  }
  {
    const std::string p = dir + "/triples.csv";
    const CsvTable t = read_csv(p);
    for (const auto& row : t.rows)
      b.triples.push(detail::read_block(t, row, "z0_", d, p), detail::read_block(t, row, "z1_", d, p),
                     detail::read_block(t, row, "z2_", d, p), split(t, row, p), source(t, row, p));
  }
  {
    const std::string p = dir + "/initial.csv";
    const CsvTable t = read_csv(p);
    for (const auto& row : t.rows) {
      b.initial.push_back(detail::read_block(t, row, "", d, p));
      b.initial_split.push_back(split(t, row, p));
    }
  }
  return b;
}

}  // namespace degenlag::io
