#pragma once

// Config-driven experiment runner. A config is a JSON object with the
// sections potential, dynamics, ensemble, checks and output plus the
// top-level keys experiment, seed, d and n. Every key has a default; unknown
// keys are rejected, and the fully materialized config is written next to
// the artifacts as resolved_config.json.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "liouville/dynamics.hpp"
#include "liouville/errors.hpp"
#include "liouville/io.hpp"
#include "liouville/potentials.hpp"
#include "liouville/seeding.hpp"
#include "liouville/transport.hpp"
#include "liouville/verification.hpp"

namespace liouville {

using Json = nlohmann::ordered_json;

enum class ExperimentKind { simulate, verify, converge, residual, scaling };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::simulate: return "simulate";
    case ExperimentKind::verify: return "verify";
    case ExperimentKind::converge: return "converge";
    case ExperimentKind::residual: return "residual";
    case ExperimentKind::scaling: return "scaling";
  }
  return "unknown";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::simulate, ExperimentKind::verify, ExperimentKind::converge, ExperimentKind::residual,
                 ExperimentKind::scaling})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment '" + s + "'");
}

inline const std::vector<std::string>& verify_check_names() {
  static const std::vector<std::string> names = {"measure_preservation", "group_property", "energy_invariance",
                                                 "weak_ode", "time_continuity"};
  return names;
}

namespace detail {

inline Json potential_param_defaults(const std::string& kind) {
  if (kind == "free") return Json::object();
  if (kind == "harmonic") return {{"stiffness", 1.0}};
  if (kind == "repulsive_power") return {{"exponent", 1.0}, {"strength", 1.0}};
  if (kind == "attractive_well") return {{"depth", 1.0}, {"width", 1.0}};
  if (kind == "piecewise_linear_gradient") return {{"radius", 1.0}, {"inner_stiffness", 1.0}, {"outer_stiffness", 2.0}};
  throw ConfigError("potential.kind: unknown kind '" + kind + "'");
}

inline std::string default_class(const std::string& kind) {
  return kind == "repulsive_power" ? "confining_at_zero" : "smooth";
}

}  // namespace detail

/// Every recognized key with its default. Null marks values derived from
/// other keys during resolution.
inline Json default_config() {
  Json c;
  c["experiment"] = "verify";
  c["seed"] = 1;
  c["d"] = 2;
  c["n"] = 2;
  c["potential"] = {{"kind", "harmonic"},
                    {"singularity_class", nullptr},
                    {"params", detail::potential_param_defaults("harmonic")},
                    {"mollification", {{"level", 0}, {"kernel_exponent", 3}}}};
  c["dynamics"] = {{"scheme", "velocity_verlet"},
                   {"dt", 1e-3},
                   {"adaptive", false},
                   {"d_min_factor", 1.0},
                   {"reference_distance", 0.5},
                   {"max_substeps", 1000000},
                   {"t_final", 1.0},
                   {"initial", {{"positions", nullptr}, {"velocities", nullptr}}}};
  c["ensemble"] = {{"N", 1000},
                   {"box", {{"x", {-3.0, 3.0}}, {"v", {-1.0, 1.0}}}},
                   {"f0",
                    {{"kind", "bump"},
                     {"amplitude", 1.0},
                     {"center", nullptr},
                     {"width", nullptr},
                     {"radius", 1.0},
                     {"offset", 0.0},
                     {"scale", 1.0},
                     {"cap", 1.0}}}};
  c["checks"] = {{"list", verify_check_names()},
                 {"s", 0.5},
                 {"energy_quantile", 0.9},
                 {"test_region_fraction", 0.5},
                 {"time_intervals", 200},
                 {"test_functions", 5},
                 {"betas", {"smoothed_clamp", "arctan", "tanh", "rational"}},
                 {"clamp_level", 0.5},
                 {"levels", {3, 4, 5, 6, 7}},
                 {"kernel_exponents", {3, 2}},
                 {"kernel_level", 6},
                 {"annulus", {0.5, 2.0}},
                 {"annulus_samples", 2000},
                 {"cutoff", {{"R", 1.0}, {"T", 1.0}, {"C", 1.0}}},
                 {"uniqueness_times", 10},
                 {"mus", {0.4, 0.2, 0.1, 0.05}},
                 {"negative_controls", false},
                 {"tolerances",
                  {{"measure_preservation", 0.0},
                   {"group_property", 1e-6},
                   {"energy_invariance", 1e-4},
                   {"weak_ode", 0.0},
                   {"time_continuity", 2.0},
                   {"mollification_cauchy", 0.0},
                   {"kernel_independence_factor", 2.0},
                   {"uniqueness", 1e-6},
                   {"residual", 0.0},
                   {"collision_scaling", 0.3}}}};
  c["output"] = {{"dir", "out"}, {"stride", 1}, {"threads", 1}};
  return c;
}

namespace detail {

inline bool same_json_kind(const Json& a, const nlohmann::json& b) {
  if (a.is_number()) return b.is_number();
  if (a.is_string()) return b.is_string();
  if (a.is_boolean()) return b.is_boolean();
  if (a.is_array()) return b.is_array();
  if (a.is_object()) return b.is_object();
  return true;
}

/// Overlays `user` onto `base`, rejecting keys `base` does not have.
inline void overlay(Json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown key '" + where + "'");
    Json& slot = base[key];
    if (slot.is_object() && !slot.empty()) {
      overlay(slot, value, where);
      continue;
    }
    if (!slot.is_null() && !value.is_null() && !same_json_kind(slot, value))
      throw ConfigError(where + ": wrong type");
    if (slot.is_object() && !value.is_object()) throw ConfigError(where + ": expected an object");
    if (slot.is_object() && !value.empty()) throw ConfigError("unknown key '" + where + "." + value.begin().key() + "'");
    slot = Json::parse(value.dump());
  }
}

template <class T>
T get(const Json& j, const std::string& key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key + ": invalid value");
  }
}

inline std::vector<double> get_vector(const Json& j, const std::string& key, const std::string& path) {
  return get<std::vector<double>>(j, key, path);
}

}  // namespace detail

struct OutputSpec {
  std::filesystem::path dir = "out";
  int stride = 1;
  int threads = 1;
};

struct ChecksSpec {
  std::vector<std::string> list;
  double s = 0.5;
  double energy_quantile = 0.9;
  double test_region_fraction = 0.5;
  int time_intervals = 200;
  int test_functions = 5;
  std::vector<Beta> betas;
  std::vector<int> levels;
  std::vector<int> kernel_exponents;
  int kernel_level = 6;
  Annulus annulus{0.5, 2.0};
  std::size_t annulus_samples = 2000;
  EnergyCutoff cutoff{};
  int uniqueness_times = 10;
  std::vector<double> mus;
  bool negative_controls = false;
  std::map<std::string, double> tolerances;
};

struct ExperimentSetup {
  ExperimentKind kind = ExperimentKind::verify;
  std::uint64_t seed = 1;
  int d = 2;
  int n = 2;
  PairPotential base = PairPotential::harmonic(2);
  int mollification_level = 0;
  int kernel_exponent = 3;
  IntegratorConfig integrator{};
  double t_final = 1.0;
  std::vector<double> initial_positions;
  std::vector<double> initial_velocities;
  std::size_t N = 1000;
  PhaseBox box;
  InitialDatum f0;
  ChecksSpec checks;
  OutputSpec output;
  Json resolved;

  SamplingSpec sampling(std::string_view label) const {
    SamplingSpec s;
    s.d = d;
    s.n = n;
    s.box = box;
    s.N = N;
    s.seed = derive_seed(seed, label);
    s.parallelism.threads = output.threads;
    s.energy_quantile = checks.energy_quantile;
    return s;
  }
};

/// Command-line overrides applied on top of the file.
struct RunOverrides {
  std::optional<ExperimentKind> experiment;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

namespace detail {

inline Beta parse_beta(const std::string& name, double clamp_level) {
  if (name == "smoothed_clamp") return Beta::smoothed_clamp(clamp_level);
  if (name == "arctan") return {BetaKind::arctan, 1.0};
  if (name == "tanh") return {BetaKind::tanh, 1.0};
  if (name == "rational") return {BetaKind::rational, 1.0};
  throw ConfigError("checks.betas: unknown beta '" + name + "'");
}

inline SingularityClass parse_class(const std::string& s) {
  for (auto c : {SingularityClass::smooth, SingularityClass::l1_singular_gradient, SingularityClass::confining_at_zero})
    if (to_string(c) == s) return c;
  throw ConfigError("potential.singularity_class: unknown class '" + s + "'");
}

inline DatumKind parse_datum(const std::string& s) {
  if (s == "constant") return DatumKind::constant;
  if (s == "bump") return DatumKind::bump;
  if (s == "smoothed_indicator") return DatumKind::smoothed_indicator;
  if (s == "clipped_polynomial") return DatumKind::clipped_polynomial;
  throw ConfigError("ensemble.f0.kind: unknown kind '" + s + "'");
}

inline PairPotential build_potential(int d, const std::string& kind, SingularityClass cls, const Json& params) {
  const auto p = [&](const char* key) { return get<double>(params, key, "potential.params"); };
  if (kind != "repulsive_power" && cls != SingularityClass::smooth)
    throw ConfigError("potential.singularity_class: " + kind + " is smooth");
  if (kind == "free") return PairPotential::free(d);
  if (kind == "harmonic") return PairPotential::harmonic(d, p("stiffness"));
  if (kind == "repulsive_power") return PairPotential::repulsive_power(d, p("exponent"), p("strength"), cls);
  if (kind == "attractive_well") return PairPotential::attractive_well(d, p("depth"), p("width"));
  return PairPotential::piecewise_linear_gradient(d, p("radius"), p("inner_stiffness"), p("outer_stiffness"));
}

}  // namespace detail

/// Resolves `user` against the defaults and validates the result. Throws
/// ConfigError on any schema or range violation.
inline ExperimentSetup resolve_config(const nlohmann::json& user, const RunOverrides& ov = {}) {
  using detail::get;
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  Json c = default_config();
  // params defaults depend on the kind, so settle the kind first
  std::string kind = "harmonic";
  if (user.contains("potential") && user["potential"].is_object() && user["potential"].contains("kind")) {
    if (!user["potential"]["kind"].is_string()) throw ConfigError("potential.kind: expected a string");
    kind = user["potential"]["kind"].get<std::string>();
  }
  c["potential"]["params"] = detail::potential_param_defaults(kind);
  detail::overlay(c, user, "");

  if (ov.experiment) {
    const auto file_kind = get<std::string>(c, "experiment", "config");
    if (user.contains("experiment") && file_kind != to_string(*ov.experiment))
      throw ConfigError("config declares experiment '" + file_kind + "' but '" + to_string(*ov.experiment) +
                        "' was requested");
    c["experiment"] = to_string(*ov.experiment);
  }
  if (ov.seed) c["seed"] = *ov.seed;
  if (ov.threads) c["output"]["threads"] = *ov.threads;
  if (ov.out) c["output"]["dir"] = ov.out->string();

  ExperimentSetup s;
  s.kind = parse_experiment_kind(get<std::string>(c, "experiment", "config"));
  s.seed = get<std::uint64_t>(c, "seed", "config");
  s.d = get<int>(c, "d", "config");
  s.n = get<int>(c, "n", "config");
  if (s.d < 1) throw ConfigError("d must be >= 1");
  if (s.n < 2) throw ConfigError("n must be >= 2");
  const std::size_t dn = static_cast<std::size_t>(s.d * s.n), m = 2 * dn;

  auto& pot = c["potential"];
  if (pot["singularity_class"].is_null()) pot["singularity_class"] = detail::default_class(kind);
  const auto cls = detail::parse_class(get<std::string>(pot, "singularity_class", "potential"));
  auto& moll = pot["mollification"];
  s.mollification_level = get<int>(moll, "level", "potential.mollification");
  s.kernel_exponent = get<int>(moll, "kernel_exponent", "potential.mollification");
  if (s.mollification_level < 0) throw ConfigError("potential.mollification.level must be >= 0");
  if (s.kernel_exponent < 1) throw ConfigError("potential.mollification.kernel_exponent must be >= 1");

  const auto& dyn = c["dynamics"];
  const auto scheme = get<std::string>(dyn, "scheme", "dynamics");
  if (scheme == "velocity_verlet") s.integrator.scheme = Scheme::velocity_verlet;
  else if (scheme == "rk4_reference") s.integrator.scheme = Scheme::rk4_reference;
  else throw ConfigError("dynamics.scheme: unknown scheme '" + scheme + "'");
  s.integrator.dt = get<double>(dyn, "dt", "dynamics");
  s.integrator.adaptive = get<bool>(dyn, "adaptive", "dynamics");
  s.integrator.d_min_factor = get<double>(dyn, "d_min_factor", "dynamics");
  s.integrator.reference_distance = get<double>(dyn, "reference_distance", "dynamics");
  s.integrator.max_substeps = get<long>(dyn, "max_substeps", "dynamics");
  s.t_final = get<double>(dyn, "t_final", "dynamics");
  if (!std::isfinite(s.t_final)) throw ConfigError("dynamics.t_final must be finite");

  const auto& ens = c["ensemble"];
  const auto N = get<long long>(ens, "N", "ensemble");
  if (N < 1) throw ConfigError("ensemble.N must be >= 1");
  s.N = static_cast<std::size_t>(N);
  const auto bx = detail::get_vector(ens["box"], "x", "ensemble.box");
  const auto bv = detail::get_vector(ens["box"], "v", "ensemble.box");
  if (bx.size() != 2 || bv.size() != 2) throw ConfigError("ensemble.box.x and .v must be [lo, hi]");
  s.box = PhaseBox::uniform(s.d, s.n, bx[0], bx[1], bv[0], bv[1]);

  auto& f0 = c["ensemble"]["f0"];
  s.f0.kind = detail::parse_datum(get<std::string>(f0, "kind", "ensemble.f0"));
  if (f0["center"].is_null()) {
    std::vector<double> centre(m);
    for (std::size_t k = 0; k < m; ++k) centre[k] = 0.5 * (s.box.lower[k] + s.box.upper[k]);
    f0["center"] = centre;
  }
  if (f0["width"].is_null()) {
    std::vector<double> width(m);
    for (std::size_t k = 0; k < m; ++k) width[k] = 0.25 * (s.box.upper[k] - s.box.lower[k]);
    f0["width"] = width;
  }
  s.f0.amplitude = get<double>(f0, "amplitude", "ensemble.f0");
  s.f0.center = detail::get_vector(f0, "center", "ensemble.f0");
  s.f0.width = detail::get_vector(f0, "width", "ensemble.f0");
  s.f0.radius = get<double>(f0, "radius", "ensemble.f0");
  s.f0.offset = get<double>(f0, "offset", "ensemble.f0");
  s.f0.scale = get<double>(f0, "scale", "ensemble.f0");
  s.f0.cap = get<double>(f0, "cap", "ensemble.f0");

  auto& init = c["dynamics"]["initial"];
  if (init["positions"].is_null() != init["velocities"].is_null())
    throw ConfigError("dynamics.initial: give both positions and velocities or neither");
  if (init["positions"].is_null()) {
    // first ensemble sample
    Rng rng(derive_seed(s.seed, "initial_configuration"));
    std::vector<double> y(m);
    for (std::size_t k = 0; k < m; ++k) y[k] = rng.uniform(s.box.lower[k], s.box.upper[k]);
    init["positions"] = std::vector<double>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(dn));
    init["velocities"] = std::vector<double>(y.begin() + static_cast<std::ptrdiff_t>(dn), y.end());
  }
  s.initial_positions = detail::get_vector(init, "positions", "dynamics.initial");
  s.initial_velocities = detail::get_vector(init, "velocities", "dynamics.initial");
  if (s.initial_positions.size() != dn || s.initial_velocities.size() != dn)
    throw ConfigError("dynamics.initial: expected " + std::to_string(dn) + " positions and velocities");

  const auto& ch = c["checks"];
  auto& cs = s.checks;
  cs.list = get<std::vector<std::string>>(ch, "list", "checks");
  for (const auto& name : cs.list)
    if (std::find(verify_check_names().begin(), verify_check_names().end(), name) == verify_check_names().end())
      throw ConfigError("checks.list: unknown check '" + name + "'");
  cs.s = get<double>(ch, "s", "checks");
  cs.energy_quantile = get<double>(ch, "energy_quantile", "checks");
  if (!(cs.energy_quantile > 0.0) || cs.energy_quantile > 1.0) throw ConfigError("checks.energy_quantile must lie in (0, 1]");
  cs.test_region_fraction = get<double>(ch, "test_region_fraction", "checks");
  if (!(cs.test_region_fraction > 0.0) || cs.test_region_fraction > 1.0)
    throw ConfigError("checks.test_region_fraction must lie in (0, 1]");
  cs.time_intervals = get<int>(ch, "time_intervals", "checks");
  if (cs.time_intervals < 2 || cs.time_intervals % 2) throw ConfigError("checks.time_intervals must be even and >= 2");
  cs.test_functions = get<int>(ch, "test_functions", "checks");
  if (cs.test_functions < 1) throw ConfigError("checks.test_functions must be >= 1");
  const double clamp_level = get<double>(ch, "clamp_level", "checks");
  if (!(clamp_level > 0.0)) throw ConfigError("checks.clamp_level must be positive");
  for (const auto& b : get<std::vector<std::string>>(ch, "betas", "checks")) cs.betas.push_back(detail::parse_beta(b, clamp_level));
  cs.levels = get<std::vector<int>>(ch, "levels", "checks");
  for (std::size_t k = 0; k < cs.levels.size(); ++k)
    if (cs.levels[k] < 0 || (k && cs.levels[k] <= cs.levels[k - 1]))
      throw ConfigError("checks.levels must be increasing and nonnegative");
  cs.kernel_exponents = get<std::vector<int>>(ch, "kernel_exponents", "checks");
  if (cs.kernel_exponents.size() != 2) throw ConfigError("checks.kernel_exponents must hold two exponents");
  cs.kernel_level = get<int>(ch, "kernel_level", "checks");
  const auto ann = detail::get_vector(ch, "annulus", "checks");
  if (ann.size() != 2 || !(ann[0] > 0.0) || !(ann[1] > ann[0])) throw ConfigError("checks.annulus must be [r_in, r_out] with 0 < r_in < r_out");
  cs.annulus = {ann[0], ann[1]};
  cs.annulus_samples = get<std::size_t>(ch, "annulus_samples", "checks");
  const auto& cut = ch.at("cutoff");
  cs.cutoff = {get<double>(cut, "R", "checks.cutoff"), get<double>(cut, "T", "checks.cutoff"),
               get<double>(cut, "C", "checks.cutoff"), s.n};
  try {
    cs.cutoff.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("checks.cutoff: ") + e.what());
  }
  cs.uniqueness_times = get<int>(ch, "uniqueness_times", "checks");
  if (cs.uniqueness_times < 2) throw ConfigError("checks.uniqueness_times must be >= 2");
  cs.mus = detail::get_vector(ch, "mus", "checks");
  for (double mu : cs.mus)
    if (!(mu > 0.0)) throw ConfigError("checks.mus must be positive");
  cs.negative_controls = get<bool>(ch, "negative_controls", "checks");
  for (const auto& [k, v] : ch.at("tolerances").items()) {
    if (!v.is_number()) throw ConfigError("checks.tolerances." + k + ": expected a number");
    cs.tolerances[k] = v.get<double>();
  }

  const auto& out = c["output"];
  s.output.dir = get<std::string>(out, "dir", "output");
  s.output.stride = get<int>(out, "stride", "output");
  s.output.threads = get<int>(out, "threads", "output");
  if (s.output.stride < 1) throw ConfigError("output.stride must be >= 1");
  if (s.output.threads < 1) throw ConfigError("output.threads must be >= 1");

  // constructions that can reject parameter combinations
  try {
    s.base = detail::build_potential(s.d, kind, cls, pot["params"]);
    s.integrator.validate();
    s.box.validate(m);
    s.f0.validate(m);
    if (s.mollification_level > 0 || s.kind == ExperimentKind::converge) {
      MollifierKernel k1(s.d, s.kernel_exponent);
      MollifierKernel k2(s.d, cs.kernel_exponents[0]);
      MollifierKernel k3(s.d, cs.kernel_exponents[1]);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (s.kind == ExperimentKind::converge && !s.base.is_singular())
    throw ConfigError("converge needs a singular potential");
  if (s.kind == ExperimentKind::converge && cs.levels.size() < 2)
    throw ConfigError("converge needs at least two levels");
  if (s.kind == ExperimentKind::scaling && cs.mus.size() < 2)
    throw ConfigError("scaling needs at least two mu values");
  if (s.kind != ExperimentKind::simulate && s.kind != ExperimentKind::scaling && !(s.t_final > 0.0))
    throw ConfigError("dynamics.t_final must be positive");
  s.resolved = c;
  return s;
}

/// Calls f with the configured interaction: the base potential or its
/// mollification at the configured level.
template <class F>
decltype(auto) with_potential(const ExperimentSetup& s, F&& f) {
  if (s.mollification_level > 0)
    return f(MollifiedPotential(s.base, MollifierKernel(s.d, s.kernel_exponent), s.mollification_level));
  return f(s.base);
}

namespace detail {

inline double tolerance(const ExperimentSetup& s, const std::string& key) {
  const auto it = s.checks.tolerances.find(key);
  return it == s.checks.tolerances.end() ? 0.0 : it->second;
}

/// Box shrunk about its centre by `fraction`.
inline PhaseBox inner_region(const PhaseBox& box, double fraction) {
  PhaseBox r = box;
  for (std::size_t k = 0; k < box.size(); ++k) {
    const double c = 0.5 * (box.lower[k] + box.upper[k]), h = 0.5 * (box.upper[k] - box.lower[k]);
    r.lower[k] = c - fraction * h;
    r.upper[k] = c + fraction * h;
  }
  return r;
}

/// Space-only bump filling the inner region.
inline TestFunction region_test_function(const PhaseBox& region) {
  std::vector<double> c(region.size()), w(region.size());
  for (std::size_t k = 0; k < region.size(); ++k) {
    c[k] = 0.5 * (region.lower[k] + region.upper[k]);
    w[k] = 0.5 * (region.upper[k] - region.lower[k]);
  }
  return TestFunction::space_only(std::move(c), std::move(w));
}

struct Artifacts {
  std::vector<CheckReport> reports;
  std::vector<CheckReport> controls;  // expected to fail
  std::vector<Json> residuals;
};

inline void open_or_throw(std::ofstream& os, const std::filesystem::path& path) {
  os.open(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
}

template <PairInteraction P>
void run_simulate(const ExperimentSetup& s, const P& p, Artifacts&) {
  const Configuration y0(s.d, s.n, s.initial_positions, s.initial_velocities);
  const auto traj = integrate(y0, p, s.t_final, s.integrator, s.output.stride);
  std::ofstream os;
  open_or_throw(os, s.output.dir / "trajectory.csv");
  write_trajectory_csv(os, traj);
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, s.f0, derive_seed(s.seed, "ensemble"));
  std::ofstream a, b;
  open_or_throw(a, s.output.dir / "ensemble_initial.csv");
  write_ensemble_csv(a, e);
  Parallelism par{s.output.threads};
  open_or_throw(b, s.output.dir / "ensemble_final.csv");
  write_ensemble_csv(b, push_forward(e, p, s.t_final, s.integrator, par));
}

template <PairInteraction P>
CheckReport run_verify_check(const ExperimentSetup& s, const P& p, const std::string& name,
                             const IntegratorConfig& icfg) {
  const auto spec = s.sampling("verify:" + name);
  const auto phi = region_test_function(inner_region(s.box, s.checks.test_region_fraction));
  const double t = s.t_final;
  if (name == "measure_preservation")
    return check_measure_preservation(p, t, phi, spec, icfg, tolerance(s, name));
  if (name == "group_property") return check_group_property(p, s.checks.s, t, spec, icfg, tolerance(s, name));
  if (name == "energy_invariance") return check_energy_invariance(p, t, spec, icfg, tolerance(s, name));
  if (name == "weak_ode")
    return check_weak_ode(p, std::nullopt, phi, TimeProfile{0.1 * t, t}, spec, icfg, s.checks.time_intervals,
                          tolerance(s, name));
  return check_time_continuity(p, t, s.checks.time_intervals, spec, icfg, tolerance(s, name));
}

/// The perturbation each verification check must detect.
inline IntegratorConfig control_for(const std::string& name, IntegratorConfig icfg, double t) {
  if (name == "group_property") {
    icfg.perturbation = FlowPerturbation::clock_drift;
    icfg.perturbation_strength = 0.5;
  } else if (name == "time_continuity" || name == "weak_ode") {
    // a jump in position is invisible to the vector field but not to the trajectory
    icfg.perturbation = FlowPerturbation::position_jump;
    icfg.perturbation_strength = 0.5;
    icfg.perturbation_period = 0.25 * t;
  } else {
    // velocities shrink by exp(-0.4) over the run
    icfg.perturbation = FlowPerturbation::velocity_damping;
    icfg.perturbation_strength = 0.4 / t;
  }
  return icfg;
}

template <PairInteraction P>
void run_verify(const ExperimentSetup& s, const P& p, Artifacts& art) {
  for (const auto& name : s.checks.list) {
    art.reports.push_back(run_verify_check(s, p, name, s.integrator));
    if (s.checks.negative_controls) {
      auto c = run_verify_check(s, p, name, control_for(name, s.integrator, s.t_final));
      c.check_name += ":negative_control";
      art.controls.push_back(std::move(c));
    }
  }
}

template <PairInteraction P>
void run_residual(const ExperimentSetup& s, const P& p, Artifacts& art) {
  const auto spec = s.sampling("residual");
  const double T = s.t_final;
  const auto phis = test_function_family(inner_region(s.box, s.checks.test_region_fraction),
                                         static_cast<std::size_t>(s.checks.test_functions),
                                         derive_seed(s.seed, "test_functions"), -T, T, 0.5, 0.9);
  ResidualSuiteSpec rs;
  rs.grid = {T, s.checks.time_intervals};
  rs.options.mode = whole_space_admissible(p.singularity_class()) ? ResidualMode::whole_space
                                                                   : ResidualMode::off_collision_set;
  rs.options.parallelism = spec.parallelism;
  const double tol = tolerance(s, "residual");

  auto e = sample_ensemble(s.d, s.n, s.box, s.N, s.f0, derive_seed(spec.seed, "renormalization"));
  const auto ci = characteristic_integrals(e, p, s.integrator, rs.grid, phis, rs.options);
  const auto fine = characteristic_integrals(e, p, s.integrator.halved(), rs.grid, phis, rs.options);
  for (std::size_t j = 0; j < phis.size(); ++j) {
    const auto est = weak_residual(e, ci, j, e.values, e.values, &fine);
    auto r = residual_report("weak_residual", p.describe(), s.seed, est, tol);
    r.note = "phi=" + std::to_string(j);
    art.reports.push_back(r);
    art.residuals.push_back(residual_record("weak_residual", p.describe(), s.seed, est, tol));
    for (const auto& beta : s.checks.betas) {
      const auto rest = renormalized_residual(beta, e, ci, j, e.values, e.values, &fine);
      auto rr = residual_report("renormalized_residual", p.describe(), s.seed, rest, tol);
      rr.note = "beta=" + beta.name() + " phi=" + std::to_string(j);
      art.reports.push_back(rr);
      art.residuals.push_back(residual_record("renormalized_residual", p.describe(), s.seed, rest, tol));
    }
    // product of the solution with the transported smoothed indicator
    InitialDatum g0;
    g0.kind = DatumKind::smoothed_indicator;
    g0.center = s.f0.center;
    g0.radius = 0.5 * std::min(s.box.upper[0] - s.box.lower[0], s.box.upper.back() - s.box.lower.back());
    Ensemble g = e;
    for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = g0(g.point(i));
    const auto fg = combine_solutions(Combiner{CombineKind::polarized_product}, e, g);
    const auto pest = weak_residual(e, ci, j, fg.values, fg.values, &fine);
    auto pr = residual_report("product_residual", p.describe(), s.seed, pest, tol);
    pr.note = "phi=" + std::to_string(j);
    art.reports.push_back(pr);
    art.residuals.push_back(residual_record("product_residual", p.describe(), s.seed, pest, tol));
  }
}

inline void run_converge(const ExperimentSetup& s, Artifacts& art) {
  const auto& cs = s.checks;
  const MollifierKernel kernel(s.d, cs.kernel_exponents[0]);
  const MollifierKernel other(s.d, cs.kernel_exponents[1]);
  const ShrinkFunction alpha;
  std::vector<MonteCarloEstimate> l1;
  for (int level : cs.levels)
    l1.push_back(gradient_l1_error(s.base, kernel, alpha, level, cs.annulus, static_cast<int>(cs.annulus_samples),
                                   derive_seed(s.seed, "gradient_l1_error"), GradientMethod::analytic));
  const auto spec = s.sampling("converge");
  const auto cauchy = check_mollification_cauchy(s.base, kernel, cs.levels, s.t_final, spec, s.integrator,
                                                 tolerance(s, "mollification_cauchy"));
  art.reports.push_back(cauchy.report);
  art.reports.push_back(check_kernel_independence(s.base, kernel, other, cs.kernel_level, s.t_final, spec,
                                                  s.integrator, tolerance(s, "kernel_independence_factor")));
  CheckReport mono;
  mono.check_name = "gradient_l1_monotonicity";
  mono.potential = s.base.describe();
  mono.seed = s.seed;
  mono.N = cs.annulus_samples;
  mono.tolerance = 0.0;
  for (std::size_t k = 0; k < l1.size(); ++k) {
    mono.series.push_back(l1[k].value);
    if (k) mono.statistic = std::max(mono.statistic, l1[k].value - 1.05 * l1[k - 1].value);
  }
  mono.finalize();
  art.reports.push_back(mono);

  // uniqueness functional between two adjacent levels
  UniquenessSpec us;
  us.cut = cs.cutoff;
  us.tolerance = tolerance(s, "uniqueness");
  for (int k = 0; k < cs.uniqueness_times; ++k)
    us.times.push_back(cs.cutoff.T * k / (cs.uniqueness_times - 1));
  const MollifiedPotential lo(s.base, kernel, cs.kernel_level), hi(s.base, kernel, cs.kernel_level + 1);
  auto u = check_uniqueness(lo, s.f0, hi, s.f0, us, s.sampling("uniqueness"), s.integrator);
  art.reports.push_back(u.report);

  std::ofstream os;
  open_or_throw(os, s.output.dir / "converge.csv");
  os << "level,gradient_l1_error,std_error,cauchy_gap\n";
  for (std::size_t k = 0; k < cs.levels.size(); ++k) {
    os << cs.levels[k] << ',' << format_number(l1[k].value) << ',' << format_number(l1[k].std_error) << ',';
    if (k < cauchy.gaps.size()) os << format_number(cauchy.gaps[k]);
    os << '\n';
  }
}

inline void run_scaling(const ExperimentSetup& s, Artifacts& art) {
  const auto r = check_collision_scaling(s.d, s.checks.mus, s.N, derive_seed(s.seed, "scaling"),
                                         tolerance(s, "collision_scaling"));
  art.reports.push_back(r.report);
  std::ofstream os;
  open_or_throw(os, s.output.dir / "scaling.csv");
  emit_scaling_table(os, r.rows);
}

}  // namespace detail

struct RunOptions {
  std::filesystem::path config;
  RunOverrides overrides;
  bool quiet = false;
};

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfigError = 2, kExitRuntimeError = 3 };

/// Loads, resolves and executes one experiment. Writes resolved_config.json,
/// reports.jsonl and summary.csv plus the experiment's own tables into the
/// output directory. Nothing is written when the config is rejected.
inline int run(const RunOptions& opts, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  ExperimentSetup s;
  try {
    std::ifstream is(opts.config);
    if (!is) throw ConfigError("cannot read " + opts.config.string());
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("malformed JSON: ") + e.what());
    }
    s = resolve_config(user, opts.overrides);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  }

  detail::Artifacts art;
  try {
    std::filesystem::create_directories(s.output.dir);
    {
      std::ofstream os;
      detail::open_or_throw(os, s.output.dir / "resolved_config.json");
      os << s.resolved.dump(2) << '\n';
    }
    switch (s.kind) {
      case ExperimentKind::simulate:
        with_potential(s, [&](const auto& p) { detail::run_simulate(s, p, art); });
        break;
      case ExperimentKind::verify:
        with_potential(s, [&](const auto& p) { detail::run_verify(s, p, art); });
        break;
      case ExperimentKind::residual:
        with_potential(s, [&](const auto& p) { detail::run_residual(s, p, art); });
        break;
      case ExperimentKind::converge: detail::run_converge(s, art); break;
      case ExperimentKind::scaling: detail::run_scaling(s, art); break;
    }
    std::vector<CheckReport> all = art.reports;
    all.insert(all.end(), art.controls.begin(), art.controls.end());
    std::ofstream reports, summary;
    detail::open_or_throw(reports, s.output.dir / "reports.jsonl");
    write_reports_jsonl(reports, all);
    detail::open_or_throw(summary, s.output.dir / "summary.csv");
    write_summary_csv(summary, all);
    if (!art.residuals.empty()) {
      std::ofstream res;
      detail::open_or_throw(res, s.output.dir / "residuals.jsonl");
      for (const auto& r : art.residuals) res << r.dump() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntimeError;
  }

  bool ok = all_pass(art.reports);
  for (const auto& c : art.controls) ok = ok && !c.pass;
  if (!opts.quiet) {
    for (const auto& r : art.reports)
      log << (r.pass ? "PASS " : "FAIL ") << r.check_name << " statistic=" << format_number(r.statistic)
          << " threshold=" << format_number(r.tolerance + 3.0 * r.std_error + r.bias_bound)
          << (r.note.empty() ? "" : " (" + r.note + ")") << '\n';
    for (const auto& c : art.controls)
      log << (c.pass ? "UNDETECTED " : "DETECTED ") << c.check_name << " statistic=" << format_number(c.statistic)
          << '\n';
  }
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace liouville
