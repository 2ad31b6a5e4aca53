#pragma once

// Property checks for the a.e.-flow axioms and the structural consequences
// of the renormalization theory. Every check returns a CheckReport whose
// verdict is statistic <= tolerance + 3 std_error + bias_bound, and which
// fails outright when more than 1% of its samples were lost to integrator
// failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "liouville/dynamics.hpp"
#include "liouville/errors.hpp"
#include "liouville/parallel.hpp"
#include "liouville/potentials.hpp"
#include "liouville/seeding.hpp"
#include "liouville/transport.hpp"

namespace liouville {

struct CheckReport {
  std::string check_name;
  std::string potential;
  std::uint64_t seed = 0;
  std::size_t N = 0;
  double statistic = 0.0;
  double std_error = 0.0;
  double bias_bound = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  double runtime_seconds = 0.0;
  std::size_t flagged_samples = 0;
  /// Samples left out by the energy truncation E < m.
  std::size_t excluded_samples = 0;
  std::optional<double> energy_truncation;
  /// Per-level or per-time values for sequence-valued checks.
  std::vector<double> series;
  std::string note;

  static constexpr double kMaxFlaggedFraction = 0.01;

  bool threshold_met() const { return statistic <= tolerance + 3.0 * std_error + bias_bound; }
  bool flagged_ok() const { return static_cast<double>(flagged_samples) <= kMaxFlaggedFraction * static_cast<double>(N); }

  /// Sets `pass` from the threshold and the flagged-sample rule.
  void finalize() { pass = threshold_met() && flagged_ok(); }
};

/// How a check draws its initial configurations.
struct SamplingSpec {
  int d = 2;
  int n = 2;
  PhaseBox box;
  std::size_t N = 1000;
  std::uint64_t seed = 0;
  Parallelism parallelism{};
  /// Quantile of initial energies used as the truncation level m.
  double energy_quantile = 0.9;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline double sample_sd(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / (n - 1.0));
}

/// Standard error of a sum of N per-sample contributions.
inline double sum_std_error(std::span<const double> contrib) {
  return std::sqrt(static_cast<double>(contrib.size())) * sample_sd(contrib);
}

inline double phase_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline Ensemble subset(const Ensemble& e, std::span<const std::size_t> keep) {
  Ensemble out;
  out.d = e.d;
  out.n = e.n;
  out.time = e.time;
  out.seed = e.seed;
  out.box = e.box;
  const std::size_t m = e.coords();
  out.phase.reserve(keep.size() * m);
  for (std::size_t i : keep) {
    const auto y = e.point(i);
    out.phase.insert(out.phase.end(), y.begin(), y.end());
    out.weights.push_back(e.weights[i]);
    out.values.push_back(e.values[i]);
    out.flags.push_back(e.flags[i]);
  }
  return out;
}

template <PairInteraction P>
std::vector<double> initial_energies(const Ensemble& e, const P& p) {
  std::vector<double> out(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = energy(e.point(i), e.d, e.n, p);
  return out;
}

}  // namespace detail

/// q-quantile (nearest rank) of the given energies.
inline double energy_truncation_level(std::vector<double> energies, double q) {
  if (energies.empty()) throw DomainError("energy_truncation_level: no samples");
  if (!(q > 0.0) || q > 1.0) throw DomainError("energy_truncation_level: quantile must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(energies.size()))) - 1;
  std::nth_element(energies.begin(), energies.begin() + static_cast<std::ptrdiff_t>(k), energies.end());
  return energies[k];
}

namespace detail {

struct Truncated {
  Ensemble kept;
  double m = 0.0;
  std::size_t excluded = 0;
};

/// Samples with E < m, where m defaults to the configured energy quantile.
template <PairInteraction P>
Truncated truncate_by_energy(const Ensemble& e, const P& p, double quantile, std::optional<double> m) {
  const auto E = initial_energies(e, p);
  Truncated t;
  t.m = m ? *m : energy_truncation_level(E, quantile);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < E.size(); ++i)
    if (E[i] < t.m) keep.push_back(i);
  t.excluded = e.size() - keep.size();
  t.kept = subset(e, keep);
  return t;
}

inline void check_sampling(const SamplingSpec& s) {
  if (s.N < 1) throw DomainError("check: N must be >= 1");
  s.box.validate(static_cast<std::size_t>(2 * s.d * s.n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Measure preservation: int phi(Y(t, .)) = int phi
//
// Change of variables gives int phi(Y(-t, .)) - int phi = int phi (J_t - 1)
// with J_t = det DY(t, .). J_t is taken from central differences of the
// computed flow; the forward-difference value bounds the differencing error
// and a halved-dt run bounds the integrator error.

namespace detail {

inline double determinant(const std::vector<double>& a, std::size_t m) {
  const auto n = static_cast<Eigen::Index>(m);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(a.data(), n, n)
      .partialPivLu()
      .determinant();
}

struct FlowJacobian {
  double central = 0.0;
  double forward = 0.0;
};

template <PairInteraction P>
FlowJacobian flow_jacobian(const P& p, const IntegratorConfig& icfg, int d, int n, std::span<const double> y0,
                           double t) {
  const std::size_t m = y0.size();
  auto flow = [&](std::vector<double> y) {
    FlowIntegrator<P> integrator(p, icfg, d, n);
    integrator.advance(y, t);
    return y;
  };
  const auto base = flow(std::vector<double>(y0.begin(), y0.end()));
  std::vector<double> central(m * m), forward(m * m);
  for (std::size_t c = 0; c < m; ++c) {
    const double h = 1e-6 * (1.0 + std::abs(y0[c]));
    std::vector<double> up(y0.begin(), y0.end()), down = up;
    up[c] += h;
    down[c] -= h;
    const auto yu = flow(std::move(up)), yd = flow(std::move(down));
    for (std::size_t r = 0; r < m; ++r) {
      central[r * m + c] = (yu[r] - yd[r]) / (2.0 * h);
      forward[r * m + c] = (yu[r] - base[r]) / h;
    }
  }
  return {determinant(central, m), determinant(forward, m)};
}

}  // namespace detail

template <PairInteraction P>
CheckReport check_measure_preservation(const P& p, double t, const TestFunction& phi, const SamplingSpec& s,
                                       const IntegratorConfig& icfg, double tolerance = 0.0) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  if (phi.coords() != s.box.size()) throw DomainError("check_measure_preservation: test function dimension");
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "measure_preservation"));
  std::vector<double> contrib(e.size(), 0.0), bias(e.size(), 0.0), moved(e.size(), 0.0), mass(e.size(), 0.0);
  std::vector<std::uint8_t> failed(e.size(), 0);
  parallel_for(e.size(), s.parallelism, [&](std::size_t i) {
    const double a = e.weights[i] * phi.space(e.point(i));
    if (a == 0.0) return;
    try {
      const auto J = detail::flow_jacobian(p, icfg, e.d, e.n, e.point(i), t);
      const auto Jf = detail::flow_jacobian(p, icfg.halved(), e.d, e.n, e.point(i), t);
      mass[i] = a;
      moved[i] = a * J.central;
      contrib[i] = a * (J.central - 1.0);
      bias[i] = std::abs(a) * (std::abs(J.central - J.forward) + 2.0 * std::abs(J.central - Jf.central));
    } catch (const SubstepLimitError&) {
      failed[i] = 1;
    } catch (const SingularityError&) {
      failed[i] = 1;
    }
  });
  CheckReport r;
  r.check_name = "measure_preservation";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.statistic = std::abs(std::accumulate(contrib.begin(), contrib.end(), 0.0));
  r.std_error = detail::sum_std_error(contrib);
  r.bias_bound = std::accumulate(bias.begin(), bias.end(), 0.0);
  r.tolerance = tolerance;
  for (auto f : failed) r.flagged_samples += f;
  r.series = {std::accumulate(moved.begin(), moved.end(), 0.0), std::accumulate(mass.begin(), mass.end(), 0.0)};
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Group property: Y(t + s, Y') = Y(t, Y(s, Y')) on E < m

template <PairInteraction P>
CheckReport check_group_property(const P& p, double s_time, double t_time, const SamplingSpec& s,
                                 const IntegratorConfig& icfg, double tolerance,
                                 std::optional<double> m = std::nullopt) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "group_property"));
  const auto tr = detail::truncate_by_energy(e, p, s.energy_quantile, m);
  const Ensemble& k = tr.kept;
  const std::size_t M = k.size();
  std::vector<double> dist(M, 0.0), rich(M, 0.0);
  std::vector<std::uint8_t> failed(M, 0);
  const bool exact = s_time == 0.0 || t_time == 0.0;
  parallel_for(M, s.parallelism, [&](std::size_t i) {
    std::vector<double> whole(k.point(i).begin(), k.point(i).end()), split = whole, fine = whole;
    try {
      FlowIntegrator<P> a(p, icfg, k.d, k.n);
      a.advance(whole, s_time + t_time);
      a.advance(split, s_time);
      a.advance(split, t_time);
      if (!exact) {
        FlowIntegrator<P> b(p, icfg.halved(), k.d, k.n);
        b.advance(fine, s_time + t_time);
        rich[i] = 3.0 * detail::phase_distance(whole, fine);
      }
      dist[i] = detail::phase_distance(whole, split);
    } catch (const SubstepLimitError&) {
      failed[i] = 1;
    } catch (const SingularityError&) {
      failed[i] = 1;
    }
  });
  CheckReport r;
  r.check_name = "group_property";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.tolerance = tolerance;
  std::vector<double> used, used_bias;
  for (std::size_t i = 0; i < M; ++i) {
    if (failed[i]) {
      ++r.flagged_samples;
      continue;
    }
    used.push_back(dist[i]);
    used_bias.push_back(rich[i]);
  }
  if (!used.empty()) {
    const double c = static_cast<double>(used.size());
    r.statistic = std::accumulate(used.begin(), used.end(), 0.0) / c;
    r.std_error = detail::sample_sd(used) / std::sqrt(c);
    r.bias_bound = std::accumulate(used_bias.begin(), used_bias.end(), 0.0) / c;
  }
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Energy invariance: max |E(Y(t, Y')) - E(Y')| / (1 + |E(Y')|) on E < m

template <PairInteraction P>
CheckReport check_energy_invariance(const P& p, double t, const SamplingSpec& s, const IntegratorConfig& icfg,
                                    double tolerance, std::optional<double> m = std::nullopt) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "energy_invariance"));
  const auto tr = detail::truncate_by_energy(e, p, s.energy_quantile, m);
  const auto moved = push_forward(tr.kept, p, t, icfg, s.parallelism);
  CheckReport r;
  r.check_name = "energy_invariance";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < moved.size(); ++i) {
    if (moved.flags[i] != 0) {
      ++r.flagged_samples;
      continue;
    }
    const double e0 = detail::energy(tr.kept.point(i), s.d, s.n, p);
    const double e1 = detail::energy(moved.point(i), s.d, s.n, p);
    r.statistic = std::max(r.statistic, std::abs(e1 - e0) / (1.0 + std::abs(e0)));
  }
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Weak ODE: int int psi(t) phi(Y') chi_{E<m}(Y') [Y(t, Y') - Y' - int_0^t B(Y(s, Y')) ds] = 0

/// Time profile psi(t) = b((t - centre) / half) on [t_begin, t_end].
struct TimeProfile {
  double t_begin = 0.25;
  double t_end = 1.75;

  double center() const { return 0.5 * (t_begin + t_end); }
  double half() const { return 0.5 * (t_end - t_begin); }
  double operator()(double t) const { return bump((t - center()) / half()); }
  /// int_t^inf psi
  double tail(double t) const {
    return half() * (detail::bump_integral() - detail::bump_primitive((t - center()) / half()));
  }
};

namespace detail {

/// Per-sample weak defects A_c for every phase component c, on the fine
/// Simpson grid (a) and the grid of every other node (a2).
template <PairInteraction P>
bool weak_ode_defects(const P& p, const IntegratorConfig& icfg, int d, int n, std::span<const double> y0,
                      const TimeProfile& psi, int intervals, std::vector<double>& a, std::vector<double>& a2) {
  const std::size_t m = y0.size();
  const double T = psi.t_end;
  const double h = T / intervals;
  std::vector<double> times(static_cast<std::size_t>(intervals));
  for (int k = 1; k <= intervals; ++k) times[static_cast<std::size_t>(k - 1)] = k == intervals ? T : k * h;
  a.assign(m, 0.0);
  a2.assign(m, 0.0);
  std::vector<double> b(m), scratch(static_cast<std::size_t>(2 * d));
  auto node = [&](int k, double t, std::span<const double> y) {
    std::copy(y.begin() + static_cast<std::ptrdiff_t>(m / 2), y.end(), b.begin());
    accelerations(y, d, n, p, std::span<double>(b).subspan(m / 2), scratch);
    const double w1 = (k == 0 || k == intervals) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    const int kc = k / 2, Kc = intervals / 2;
    const double w2 = k % 2 ? 0.0 : ((kc == 0 || kc == Kc) ? 1.0 : (kc % 2 ? 4.0 : 2.0));
    const double ps = psi(t), tail = psi.tail(t);
    for (std::size_t c = 0; c < m; ++c) {
      const double g = ps * (y[c] - y0[c]) - tail * b[c];
      a[c] += w1 * g;
      a2[c] += w2 * g;
    }
  };
  std::vector<double> y(y0.begin(), y0.end());
  try {
    node(0, 0.0, y);
    FlowIntegrator<P> integrator(p, icfg, d, n);
    integrator.advance_through(std::span<double>(y), times, [&](std::size_t k, std::span<const double> state) {
      node(static_cast<int>(k) + 1, times[k], state);
    });
  } catch (const SubstepLimitError&) {
    return false;
  } catch (const SingularityError&) {
    return false;
  }
  for (std::size_t c = 0; c < m; ++c) {
    a[c] *= h / 3.0;
    a2[c] *= 2.0 * h / 3.0;
  }
  return true;
}

}  // namespace detail

template <PairInteraction P>
CheckReport check_weak_ode(const P& p, std::optional<double> m, const TestFunction& phi, const TimeProfile& psi,
                           const SamplingSpec& s, const IntegratorConfig& icfg, int intervals = 200,
                           double tolerance = 0.0) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  if (phi.coords() != s.box.size()) throw DomainError("check_weak_ode: test function dimension");
  if (!(psi.t_end > psi.t_begin) || psi.t_begin < 0.0) throw DomainError("check_weak_ode: invalid time profile");
  if (intervals < 2 || intervals % 2) throw DomainError("check_weak_ode: intervals must be even");
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "weak_ode"));
  const auto tr = detail::truncate_by_energy(e, p, s.energy_quantile, m);
  const Ensemble& k = tr.kept;
  const std::size_t M = k.size(), dim = k.coords();
  std::vector<double> contrib(M * dim, 0.0), quad(M * dim, 0.0), integ(M * dim, 0.0);
  std::vector<std::uint8_t> failed(M, 0);
  parallel_for(M, s.parallelism, [&](std::size_t i) {
    const double weight = k.weights[i] * phi.space(k.point(i));
    if (weight == 0.0) return;
    std::vector<double> a, a2, af, af2;
    if (!detail::weak_ode_defects(p, icfg, k.d, k.n, k.point(i), psi, intervals, a, a2) ||
        !detail::weak_ode_defects(p, icfg.halved(), k.d, k.n, k.point(i), psi, intervals, af, af2)) {
      failed[i] = 1;
      return;
    }
    for (std::size_t c = 0; c < dim; ++c) {
      contrib[i * dim + c] = weight * a[c];
      quad[i * dim + c] = std::abs(weight) * std::abs(a[c] - a2[c]);
      integ[i * dim + c] = 2.0 * std::abs(weight) * std::abs(a[c] - af[c]);
    }
  });
  CheckReport r;
  r.check_name = "weak_ode";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < M; ++i) r.flagged_samples += failed[i];
  double worst = -std::numeric_limits<double>::infinity();
  std::vector<double> column(M);
  for (std::size_t c = 0; c < dim; ++c) {
    double sum = 0.0, bias = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      column[i] = contrib[i * dim + c];
      sum += column[i];
      bias += quad[i * dim + c] + integ[i * dim + c];
    }
    const double se = detail::sum_std_error(column);
    r.series.push_back(sum);
    const double margin = std::abs(sum) - 3.0 * se - bias;
    if (margin > worst) {
      worst = margin;
      r.statistic = std::abs(sum);
      r.std_error = se;
      r.bias_bound = bias;
      r.note = "component " + std::to_string(c);
    }
  }
  if (M == 0) r.note = "no samples below the energy truncation";
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Continuity in time (smoke level): |Y(t_{k+1}) - Y(t_k)| against h (1 + |B|)

template <PairInteraction P>
CheckReport check_time_continuity(const P& p, double t, int intervals, const SamplingSpec& s,
                                  const IntegratorConfig& icfg, double tolerance = 2.0,
                                  std::optional<double> m = std::nullopt) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  if (intervals < 1 || !(t > 0.0)) throw DomainError("check_time_continuity: need t > 0 and intervals >= 1");
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "time_continuity"));
  const auto tr = detail::truncate_by_energy(e, p, s.energy_quantile, m);
  const Ensemble& k = tr.kept;
  const std::size_t M = k.size();
  const double h = t / intervals;
  std::vector<double> times(static_cast<std::size_t>(intervals));
  for (int j = 1; j <= intervals; ++j) times[static_cast<std::size_t>(j - 1)] = j == intervals ? t : j * h;
  std::vector<double> worst(M, 0.0);
  std::vector<std::uint8_t> failed(M, 0);
  parallel_for(M, s.parallelism, [&](std::size_t i) {
    std::vector<double> y(k.point(i).begin(), k.point(i).end()), prev = y;
    auto speed = [&](std::span<const double> state) {
      const auto cfg = Configuration::from_phase(k.d, k.n, state);
      return detail::norm(vector_field(cfg, p));
    };
    double prev_speed = speed(prev);
    try {
      FlowIntegrator<P> integrator(p, icfg, k.d, k.n);
      integrator.advance_through(std::span<double>(y), times, [&](std::size_t, std::span<const double> state) {
        const double sp = speed(state);
        const double ratio = detail::phase_distance(state, prev) / (h * (1.0 + std::max(sp, prev_speed)));
        worst[i] = std::max(worst[i], ratio);
        std::copy(state.begin(), state.end(), prev.begin());
        prev_speed = sp;
      });
    } catch (const SubstepLimitError&) {
      failed[i] = 1;
    } catch (const SingularityError&) {
      failed[i] = 1;
    }
  });
  CheckReport r;
  r.check_name = "time_continuity";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < M; ++i) {
    r.flagged_samples += failed[i];
    if (!failed[i]) r.statistic = std::max(r.statistic, worst[i]);
  }
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Mollification levels: Cauchy gaps and kernel independence

struct CauchyResult {
  CheckReport report;
  std::vector<int> levels;
  /// gaps[k] = mean |Y_{levels[k]}(t) - Y_{levels[k+1]}(t)| on E < m
  std::vector<double> gaps;
  std::vector<double> gap_std_errors;
};

namespace detail {

/// Endpoints of the flow of `p` from every sample; flags failures.
template <PairInteraction P>
std::vector<std::vector<double>> endpoints(const Ensemble& e, const P& p, double t, const IntegratorConfig& icfg,
                                           Parallelism par, std::vector<std::uint8_t>& failed) {
  std::vector<std::vector<double>> out(e.size());
  parallel_for(e.size(), par, [&](std::size_t i) {
    out[i].assign(e.point(i).begin(), e.point(i).end());
    try {
      FlowIntegrator<P> integrator(p, icfg, e.d, e.n);
      integrator.advance(out[i], t);
    } catch (const SubstepLimitError&) {
      failed[i] = 1;
    } catch (const SingularityError&) {
      failed[i] = 1;
    }
  });
  return out;
}

inline void mean_gap(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                     const std::vector<std::uint8_t>& failed, double& mean, double& se) {
  std::vector<double> dist;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!failed[i]) dist.push_back(phase_distance(a[i], b[i]));
  mean = se = 0.0;
  if (dist.empty()) return;
  mean = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(dist.size());
  se = sample_sd(dist) / std::sqrt(static_cast<double>(dist.size()));
}

}  // namespace detail

/// Flows of V_n for each level in `levels` (increasing) from one truncated
/// ensemble. The statistic is the largest increase between consecutive gaps;
/// the check passes when the gap sequence is non-increasing within
/// `tolerance` + 3 std_error.
inline CauchyResult check_mollification_cauchy(const PairPotential& base, const MollifierKernel& kernel,
                                               std::span<const int> levels, double t, const SamplingSpec& s,
                                               const IntegratorConfig& icfg, double tolerance = 0.0,
                                               std::optional<double> m = std::nullopt,
                                               const QuadratureSettings& qs = {}) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  if (levels.size() < 2) throw DomainError("check_mollification_cauchy: need at least two levels");
  for (std::size_t k = 1; k < levels.size(); ++k)
    if (levels[k] <= levels[k - 1]) throw DomainError("check_mollification_cauchy: levels must increase");
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "mollification_cauchy"));
  const auto tr = detail::truncate_by_energy(e, base, s.energy_quantile, m);
  std::vector<std::uint8_t> failed(tr.kept.size(), 0);
  std::vector<std::vector<std::vector<double>>> ends;
  for (int level : levels) {
    MollifiedPotential mp(base, kernel, level, qs);
    ends.push_back(detail::endpoints(tr.kept, mp, t, icfg, s.parallelism, failed));
  }
  CauchyResult out;
  out.levels.assign(levels.begin(), levels.end());
  for (std::size_t k = 0; k + 1 < ends.size(); ++k) {
    double g, se;
    detail::mean_gap(ends[k], ends[k + 1], failed, g, se);
    out.gaps.push_back(g);
    out.gap_std_errors.push_back(se);
  }
  CheckReport& r = out.report;
  r.check_name = "mollification_cauchy";
  r.potential = "mollified[kernel_exponent=" + std::to_string(kernel.exponent()) + "](" + base.describe() + ")";
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.tolerance = tolerance;
  r.series = out.gaps;
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < out.gaps.size(); ++k) {
    const double rise = out.gaps[k] - out.gaps[k - 1];
    if (rise > worst) {
      worst = rise;
      r.statistic = std::max(0.0, rise);
      r.std_error = std::hypot(out.gap_std_errors[k], out.gap_std_errors[k - 1]);
    }
  }
  for (auto f : failed) r.flagged_samples += f;
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return out;
}

/// Mean distance between the level-`level` flows built with two kernels,
/// compared against `factor` times the Cauchy gap between levels `level` and
/// `level + 1` of the first kernel.
inline CheckReport check_kernel_independence(const PairPotential& base, const MollifierKernel& kernel,
                                             const MollifierKernel& other, int level, double t,
                                             const SamplingSpec& s, const IntegratorConfig& icfg,
                                             double factor = 2.0, std::optional<double> m = std::nullopt,
                                             const QuadratureSettings& qs = {}) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  const auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                 derive_seed(s.seed, "mollification_cauchy"));
  const auto tr = detail::truncate_by_energy(e, base, s.energy_quantile, m);
  std::vector<std::uint8_t> failed(tr.kept.size(), 0);
  const auto a = detail::endpoints(tr.kept, MollifiedPotential(base, kernel, level, qs), t, icfg, s.parallelism, failed);
  const auto b = detail::endpoints(tr.kept, MollifiedPotential(base, kernel, level + 1, qs), t, icfg, s.parallelism, failed);
  const auto c = detail::endpoints(tr.kept, MollifiedPotential(base, other, level, qs), t, icfg, s.parallelism, failed);
  double gap, gap_se, cross, cross_se;
  detail::mean_gap(a, b, failed, gap, gap_se);
  detail::mean_gap(a, c, failed, cross, cross_se);
  CheckReport r;
  r.check_name = "kernel_independence";
  r.potential = base.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.excluded_samples = tr.excluded;
  r.energy_truncation = tr.m;
  r.statistic = cross;
  r.tolerance = factor * gap;
  r.std_error = std::hypot(cross_se, factor * gap_se);
  r.series = {cross, gap};
  r.note = "kernel exponents " + std::to_string(kernel.exponent()) + " and " + std::to_string(other.exponent()) +
           " at level " + std::to_string(level);
  for (auto f : failed) r.flagged_samples += f;
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Weak-form residual suites

inline CheckReport residual_report(std::string name, std::string potential, std::uint64_t seed,
                                   const ResidualEstimate& est, double tolerance = 0.0) {
  CheckReport r;
  r.check_name = std::move(name);
  r.potential = std::move(potential);
  r.seed = seed;
  r.N = est.samples;
  r.statistic = est.defect();
  r.std_error = est.std_error;
  r.bias_bound = est.bias_bound();
  r.tolerance = tolerance;
  r.flagged_samples = est.flagged;
  r.finalize();
  return r;
}

struct ResidualSuiteSpec {
  TimeGrid grid{};
  ResidualOptions options{};
  /// Estimate the integrator bias with a halved-dt companion run.
  bool integrator_bias = true;
};

/// One report per (beta, f0, phi): weak residual of beta(f) where f is the
/// push-forward of f0. Characteristics are shared across all triples.
template <PairInteraction P>
std::vector<CheckReport> check_renormalization_suite(const P& p, std::span<const Beta> betas,
                                                     std::span<const InitialDatum> data,
                                                     std::span<const TestFunction> phis, const SamplingSpec& s,
                                                     const IntegratorConfig& icfg, const ResidualSuiteSpec& spec = {}) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  auto opts = spec.options;
  opts.parallelism = s.parallelism;
  auto e = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                           derive_seed(s.seed, "renormalization"));
  const auto ci = characteristic_integrals(e, p, icfg, spec.grid, phis, opts);
  std::optional<CharacteristicIntegrals> fine;
  if (spec.integrator_bias) fine = characteristic_integrals(e, p, icfg.halved(), spec.grid, phis, opts);
  std::vector<CheckReport> out;
  for (std::size_t a = 0; a < data.size(); ++a) {
    std::vector<double> values(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) values[i] = data[a](e.point(i));
    for (const auto& beta : betas)
      for (std::size_t j = 0; j < phis.size(); ++j) {
        const auto est = renormalized_residual(beta, e, ci, j, values, values, fine ? &*fine : nullptr);
        auto r = residual_report("renormalized_residual", p.describe(), s.seed, est);
        r.note = "beta=" + beta.name() + " f0=" + std::to_string(a) + " phi=" + std::to_string(j);
        out.push_back(std::move(r));
      }
  }
  const double elapsed = clock.seconds();
  for (auto& r : out) r.runtime_seconds = elapsed;
  return out;
}

inline bool all_pass(std::span<const CheckReport> reports) {
  return std::all_of(reports.begin(), reports.end(), [](const CheckReport& r) { return r.pass; });
}

// ---------------------------------------------------------------------------
// Collision-cutoff scaling

struct ScalingRow {
  double mu = 0.0;
  double term = 0.0;
  double std_error = 0.0;
};

struct ScalingFit {
  double slope = 0.0;
  double intercept = 0.0;  // log of the envelope constant
  double slope_std_error = 0.0;
};

/// Weighted least squares of log(term) on log(mu), weights (term / se)^2.
inline ScalingFit fit_loglog(std::span<const ScalingRow> rows) {
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t used = 0;
  for (const auto& row : rows) {
    if (!(row.term > 0.0) || !(row.mu > 0.0)) continue;
    const double rel = row.std_error > 0.0 ? row.std_error / row.term : 1.0;
    const double w = 1.0 / (rel * rel);
    const double x = std::log(row.mu), y = std::log(row.term);
    sw += w;
    sx += w * x;
    sy += w * y;
    sxx += w * x * x;
    sxy += w * x * y;
    ++used;
  }
  if (used < 2) throw DomainError("fit_loglog: need two rows with positive terms");
  const double den = sw * sxx - sx * sx;
  ScalingFit f;
  f.slope = (sw * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / sw;
  f.slope_std_error = std::sqrt(sw / den);
  return f;
}

struct ScalingResult {
  CheckReport report;
  std::vector<ScalingRow> rows;
  ScalingFit fit;
};

/// Two-particle ensemble with x1 and both velocities uniform in [-1, 1]^d,
/// x2 = x1 - r with r uniform in the ball of radius max(mus), f0 = 1, and a
/// product-bump weight Psi of half-width 2 in position and 1 in velocity.
/// The fitted slope must lie within `tolerance` of d - 1.
inline ScalingResult check_collision_scaling(int d, std::span<const double> mus, std::size_t N, std::uint64_t seed,
                                             double tolerance = 0.3) {
  detail::Stopwatch clock;
  if (d < 1) throw DomainError("check_collision_scaling: d must be >= 1");
  if (mus.size() < 2) throw DomainError("check_collision_scaling: need at least two mu values");
  for (double mu : mus)
    if (!(mu > 0.0)) throw DomainError("check_collision_scaling: mu must be positive");
  const int n = 2;
  const auto m = static_cast<std::size_t>(2 * d * n);
  const auto dd = static_cast<std::size_t>(d);
  const auto box = PhaseBox::uniform(d, n, -1.0, 1.0, -1.0, 1.0);
  auto e = sample_ensemble(d, n, box, N, InitialDatum::constant_value(1.0), derive_seed(seed, "collision_scaling"));
  const double R = *std::max_element(mus.begin(), mus.end());
  const double ball = std::pow(std::numbers::pi, 0.5 * d) / std::tgamma(0.5 * d + 1.0) * std::pow(R, d);
  Rng rng(derive_seed(seed, "collision_offsets"));
  std::vector<double> dir(dd);
  for (std::size_t i = 0; i < e.size(); ++i) {
    double norm = 0.0;
    for (auto& c : dir) {
      c = rng.normal();
      norm += c * c;
    }
    const double radius = R * std::pow(rng.uniform(), 1.0 / d) / std::sqrt(norm);
    auto y = e.point(i);
    for (std::size_t k = 0; k < dd; ++k) y[dd + k] = y[k] - radius * dir[k];
    e.weights[i] *= ball / std::pow(2.0, d);
  }
  std::vector<double> width(m, 1.0);
  std::fill(width.begin(), width.begin() + static_cast<std::ptrdiff_t>(m / 2), 2.0);
  const auto psi = TestFunction::space_only(std::vector<double>(m, 0.0), width);
  ScalingResult out;
  for (double mu : mus) {
    const auto est = collision_boundary_term(e, psi, mu);
    out.rows.push_back({mu, est.value, est.std_error});
  }
  out.fit = fit_loglog(out.rows);
  CheckReport& r = out.report;
  r.check_name = "collision_scaling";
  r.potential = "uniform ensemble d=" + std::to_string(d);
  r.seed = seed;
  r.N = N;
  r.statistic = std::abs(out.fit.slope - (d - 1));
  r.tolerance = tolerance;
  r.series = {out.fit.slope};
  r.note = "fitted slope " + std::to_string(out.fit.slope) + ", intercept " + std::to_string(out.fit.intercept);
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return out;
}

// ---------------------------------------------------------------------------
// Uniqueness functional over two transport solutions

struct UniquenessSpec {
  EnergyCutoff cut{};
  std::vector<double> times;  // increasing, in [0, T]
  /// h = beta(f - g) with beta(x) = x^2 / (1 + x^2): nonnegative, zero only at 0.
  double tolerance = 1e-6;
};

inline double uniqueness_beta(double x) { return x * x / (1.0 + x * x); }

struct UniquenessResult {
  CheckReport report;
  std::vector<FunctionalPoint> functional;
};

/// f and g are the push-forwards of f0 and g0 under the flows of p and q.
/// The functional is evaluated at fixed Eulerian points by backward
/// characteristics. Statistic: largest increase between consecutive times.
template <PairInteraction P, PairInteraction Q>
UniquenessResult check_uniqueness(const P& p, const InitialDatum& f0, const Q& q, const InitialDatum& g0,
                                  const UniquenessSpec& spec, const SamplingSpec& s, const IntegratorConfig& icfg) {
  detail::Stopwatch clock;
  detail::check_sampling(s);
  spec.cut.validate();
  if (spec.times.size() < 2) throw DomainError("check_uniqueness: need at least two times");
  auto points = sample_ensemble(s.d, s.n, s.box, s.N, InitialDatum::constant_value(1.0),
                                derive_seed(s.seed, "uniqueness"));
  auto points_g = points;
  const auto f = backward_values(points, p, f0, spec.times, icfg, s.parallelism);
  const auto g = backward_values(points_g, q, g0, spec.times, icfg, s.parallelism);
  for (std::size_t i = 0; i < points.size(); ++i) points.flags[i] |= points_g.flags[i];
  std::vector<std::vector<double>> h(spec.times.size(), std::vector<double>(points.size(), 0.0));
  for (std::size_t k = 0; k < h.size(); ++k)
    for (std::size_t i = 0; i < points.size(); ++i)
      if (points.flags[i] == 0) h[k][i] = uniqueness_beta(f[k][i] - g[k][i]);
  UniquenessResult out;
  out.functional = uniqueness_functional(points, h, spec.cut, p, spec.times);
  CheckReport& r = out.report;
  r.check_name = "uniqueness_monotonicity";
  r.potential = p.describe();
  r.seed = s.seed;
  r.N = s.N;
  r.tolerance = spec.tolerance;
  r.flagged_samples = points.flagged();
  for (const auto& fp : out.functional) r.series.push_back(fp.value);
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < out.functional.size(); ++k) {
    const double rise = out.functional[k].value - out.functional[k - 1].value;
    if (rise > worst) {
      worst = rise;
      r.statistic = std::max(0.0, rise);
      r.std_error = out.functional[k].increment_std_error;
    }
  }
  r.finalize();
  r.runtime_seconds = clock.seconds();
  return out;
}

}  // namespace liouville
