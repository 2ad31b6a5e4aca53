#pragma once

// CSV and JSON artifacts: trajectories, ensemble snapshots, residual
// records, check reports and the collision-scaling table.

#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "liouville/dynamics.hpp"
#include "liouville/transport.hpp"
#include "liouville/verification.hpp"

namespace liouville {

/// Shortest round-trip decimal form of x.
inline std::string format_number(double x) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

/// x_1_1..x_n_d, v_1_1..v_n_d
inline std::vector<std::string> phase_column_names(int d, int n) {
  std::vector<std::string> out;
  for (const char* prefix : {"x", "v"})
    for (int i = 1; i <= n; ++i)
      for (int k = 1; k <= d; ++k) out.push_back(std::string(prefix) + "_" + std::to_string(i) + "_" + std::to_string(k));
  return out;
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  os << "t";
  for (const auto& c : phase_column_names(traj.d, traj.n)) os << ',' << c;
  os << ",E,dmin\n";
  for (std::size_t r = 0; r < traj.size(); ++r) {
    os << format_number(traj.times[r]);
    for (double y : traj.states[r].phase()) os << ',' << format_number(y);
    os << ',' << format_number(traj.energy_series[r]) << ',' << format_number(traj.min_distance_series[r]) << '\n';
  }
}

inline void write_ensemble_csv(std::ostream& os, const Ensemble& e) {
  os << "sample_id,t";
  for (const auto& c : phase_column_names(e.d, e.n)) os << ',' << c;
  os << ",weight,f0_value,flags\n";
  for (std::size_t i = 0; i < e.size(); ++i) {
    os << i << ',' << format_number(e.time);
    for (double y : e.point(i)) os << ',' << format_number(y);
    os << ',' << format_number(e.weights[i]) << ',' << format_number(e.values[i]) << ',' << e.flags[i] << '\n';
  }
}

inline nlohmann::ordered_json residual_record(const std::string& operation, const std::string& potential,
                                              std::uint64_t seed, const ResidualEstimate& est,
                                              double tolerance = 0.0) {
  nlohmann::ordered_json j;
  j["operation"] = operation;
  j["potential"] = potential;
  j["seed"] = seed;
  j["N"] = est.samples;
  j["estimate"] = est.estimate;
  j["std_error"] = est.std_error;
  j["bias_bound"] = est.bias_bound();
  j["pass"] = est.passes(tolerance);
  return j;
}

inline nlohmann::ordered_json to_json(const CheckReport& r) {
  nlohmann::ordered_json j;
  j["check_name"] = r.check_name;
  j["potential"] = r.potential;
  j["seed"] = r.seed;
  j["N"] = r.N;
  j["statistic"] = r.statistic;
  j["std_error"] = r.std_error;
  j["bias_bound"] = r.bias_bound;
  j["tolerance"] = r.tolerance;
  j["pass"] = r.pass;
  j["runtime_seconds"] = r.runtime_seconds;
  j["flagged_samples"] = r.flagged_samples;
  j["excluded_samples"] = r.excluded_samples;
  if (r.energy_truncation) j["energy_truncation"] = *r.energy_truncation;
  else j["energy_truncation"] = nullptr;
  j["series"] = r.series;
  j["note"] = r.note;
  return j;
}

inline CheckReport report_from_json(const nlohmann::json& j) {
  CheckReport r;
  r.check_name = j.at("check_name").get<std::string>();
  r.potential = j.at("potential").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.N = j.at("N").get<std::size_t>();
  r.statistic = j.at("statistic").get<double>();
  r.std_error = j.at("std_error").get<double>();
  r.bias_bound = j.at("bias_bound").get<double>();
  r.tolerance = j.at("tolerance").get<double>();
  r.pass = j.at("pass").get<bool>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  r.flagged_samples = j.at("flagged_samples").get<std::size_t>();
  r.excluded_samples = j.value("excluded_samples", std::size_t{0});
  if (j.contains("energy_truncation") && !j["energy_truncation"].is_null())
    r.energy_truncation = j["energy_truncation"].get<double>();
  r.series = j.value("series", std::vector<double>{});
  r.note = j.value("note", std::string{});
  return r;
}

/// One JSON object per line.
inline void write_reports_jsonl(std::ostream& os, std::span<const CheckReport> reports) {
  for (const auto& r : reports) os << to_json(r).dump() << '\n';
}

inline void write_summary_csv(std::ostream& os, std::span<const CheckReport> reports) {
  os << "check_name,potential,N,statistic,tolerance,pass\n";
  for (const auto& r : reports) {
    std::string potential = r.potential;
    for (char& c : potential)
      if (c == ',') c = ';';
    os << r.check_name << ',' << potential << ',' << r.N << ',' << format_number(r.statistic) << ','
       << format_number(r.tolerance) << ',' << (r.pass ? "true" : "false") << '\n';
  }
}

/// mu,term,std_error,fitted_slope rows, then a footer row carrying the
/// log-log slope. No rows gives the header alone.
inline void emit_scaling_table(std::ostream& os, std::span<const ScalingRow> rows) {
  os << "mu,term,std_error,fitted_slope\n";
  if (rows.empty()) return;
  for (const auto& r : rows)
    os << format_number(r.mu) << ',' << format_number(r.term) << ',' << format_number(r.std_error) << ",\n";
  std::size_t positive = 0;
  for (const auto& r : rows) positive += r.term > 0.0 && r.mu > 0.0;
  if (positive >= 2) os << "slope,,," << format_number(fit_loglog(rows).slope) << '\n';
  else os << "slope,,,nan\n";
}

}  // namespace liouville
