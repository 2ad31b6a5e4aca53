#pragma once

// Renormalized solutions of the Liouville equation represented by
// characteristics over Monte Carlo ensembles: f(t, Y(t, Y')) = f0(Y').
// Weak-form residuals, the truncation ladder, the collision-cutoff boundary
// term and the energy-cutoff uniqueness functional all live here.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "liouville/dynamics.hpp"
#include "liouville/errors.hpp"
#include "liouville/parallel.hpp"
#include "liouville/potentials.hpp"
#include "liouville/seeding.hpp"

namespace liouville {

// ---------------------------------------------------------------------------
// Bump profile and smooth step

/// b(u) = exp(1 - 1/(1 - u^2)) on |u| < 1, else 0.
inline double bump(double u) {
  const double s = 1.0 - u * u;
  return s > 0.0 ? std::exp(1.0 - 1.0 / s) : 0.0;
}

/// b'(u) / b(u) on |u| < 1.
inline double bump_log_derivative(double u) {
  const double s = 1.0 - u * u;
  return -2.0 * u / (s * s);
}

namespace detail {

/// Cumulative integrals of b over a uniform partition of [-1, 1], from the
/// left and from the right; partial cells use a 15-point Gauss rule.
class BumpTable {
 public:
  static constexpr int kCells = 512;

  static const BumpTable& instance() {
    static const BumpTable table;
    return table;
  }

  /// integral of b over [-1, u]
  double lower(double u) const {
    if (u <= -1.0) return 0.0;
    if (u >= 1.0) return total_;
    const int k = cell(u);
    return left_[static_cast<std::size_t>(k)] + piece(node(k), u);
  }

  /// integral of b over [u, 1]
  double upper(double u) const {
    if (u >= 1.0) return 0.0;
    if (u <= -1.0) return total_;
    const int k = cell(u);
    return right_[static_cast<std::size_t>(k + 1)] + piece(u, node(k + 1));
  }

  double total() const { return total_; }

 private:
  using Rule = boost::math::quadrature::gauss<double, 15>;

  BumpTable() : left_(kCells + 1, 0.0), right_(kCells + 1, 0.0) {
    std::vector<double> cells(kCells);
    for (int k = 0; k < kCells; ++k) cells[static_cast<std::size_t>(k)] = piece(node(k), node(k + 1));
    for (int k = 0; k < kCells; ++k)
      left_[static_cast<std::size_t>(k + 1)] = left_[static_cast<std::size_t>(k)] + cells[static_cast<std::size_t>(k)];
    for (int k = kCells; k > 0; --k)
      right_[static_cast<std::size_t>(k - 1)] = right_[static_cast<std::size_t>(k)] + cells[static_cast<std::size_t>(k - 1)];
    total_ = 0.5 * (left_.back() + right_.front());
  }

  static double node(int k) { return -1.0 + 2.0 * k / kCells; }
  static int cell(double u) { return std::clamp(static_cast<int>((u + 1.0) * 0.5 * kCells), 0, kCells - 1); }
  static double piece(double a, double b) {
    return b > a ? Rule::integrate([](double x) { return bump(x); }, a, b) : 0.0;
  }

  std::vector<double> left_, right_;
  double total_ = 0.0;
};

/// integral of b over [-1, u]
inline double bump_primitive(double u) { return BumpTable::instance().lower(u); }

inline double bump_integral() { return BumpTable::instance().total(); }

}  // namespace detail

/// psi = 1 on (-inf, 1], 0 on [2, inf), with a monotone C-infinity bridge
/// given by the normalized primitive of the bump.
inline double smooth_step(double s) {
  if (s <= 1.0) return 1.0;
  if (s >= 2.0) return 0.0;
  const auto& table = detail::BumpTable::instance();
  const double u = 2.0 * s - 3.0;
  if (u <= 0.0) return 1.0 - table.lower(u) / table.total();
  // upper tail directly, so the bridge stays positive up to s = 2
  return std::clamp(table.upper(u) / table.total(), std::numeric_limits<double>::denorm_min(), 1.0);
}

inline double smooth_step_derivative(double s) {
  if (s <= 1.0 || s >= 2.0) return 0.0;
  return -2.0 * bump(2.0 * s - 3.0) / detail::bump_integral();
}

// ---------------------------------------------------------------------------
// Phase-space boxes and initial data

/// Axis-aligned box in R^{2dn}, ordered like a phase vector.
struct PhaseBox {
  std::vector<double> lower;
  std::vector<double> upper;

  /// Positions in [x_lo, x_hi]^{dn}, velocities in [v_lo, v_hi]^{dn}.
  static PhaseBox uniform(int d, int n, double x_lo, double x_hi, double v_lo, double v_hi) {
    const auto dn = static_cast<std::size_t>(d * n);
    PhaseBox b;
    b.lower.assign(dn, x_lo);
    b.upper.assign(dn, x_hi);
    b.lower.insert(b.lower.end(), dn, v_lo);
    b.upper.insert(b.upper.end(), dn, v_hi);
    return b;
  }

  std::size_t size() const { return lower.size(); }

  double volume() const {
    double v = 1.0;
    for (std::size_t k = 0; k < lower.size(); ++k) v *= upper[k] - lower[k];
    return v;
  }

  bool contains(std::span<const double> y) const {
    for (std::size_t k = 0; k < lower.size(); ++k)
      if (y[k] < lower[k] || y[k] > upper[k]) return false;
    return true;
  }

  /// True when y lies within `fraction` of the box width of some face.
  bool near_boundary(std::span<const double> y, double fraction) const {
    for (std::size_t k = 0; k < lower.size(); ++k) {
      const double margin = fraction * (upper[k] - lower[k]);
      if (y[k] < lower[k] + margin || y[k] > upper[k] - margin) return true;
    }
    return false;
  }

  bool operator==(const PhaseBox&) const = default;

  void validate(std::size_t expected) const {
    if (lower.size() != expected || upper.size() != expected)
      throw DomainError("phase box has " + std::to_string(lower.size()) + " coordinates, expected " +
                        std::to_string(expected));
    for (std::size_t k = 0; k < lower.size(); ++k)
      if (!(upper[k] > lower[k])) throw DomainError("degenerate phase box");
  }
};

enum class DatumKind {
  constant,            // f0 = amplitude
  bump,                // amplitude * prod_k b((y_k - c_k) / w_k)
  smoothed_indicator,  // amplitude * psi(|y - c| / radius)
  clipped_polynomial,  // clamp(offset + scale |y - c|^2, -cap, cap)
};

/// Initial datum f0 on phase space.
struct InitialDatum {
  DatumKind kind = DatumKind::constant;
  double amplitude = 1.0;
  std::vector<double> center;  // bump, indicator, polynomial
  std::vector<double> width;   // bump
  double radius = 1.0;         // indicator
  double offset = 0.0;         // polynomial
  double scale = 1.0;          // polynomial
  double cap = 1.0;            // polynomial clipping level

  static InitialDatum constant_value(double value) {
    InitialDatum f;
    f.kind = DatumKind::constant;
    f.amplitude = value;
    return f;
  }

  static InitialDatum bump_datum(std::vector<double> center, std::vector<double> width,
                                 double amplitude = 1.0) {
    InitialDatum f;
    f.kind = DatumKind::bump;
    f.center = std::move(center);
    f.width = std::move(width);
    f.amplitude = amplitude;
    return f;
  }

  double operator()(std::span<const double> y) const {
    switch (kind) {
      case DatumKind::constant: return amplitude;
      case DatumKind::bump: {
        double v = amplitude;
        for (std::size_t k = 0; k < y.size() && v != 0.0; ++k) v *= bump((y[k] - center[k]) / width[k]);
        return v;
      }
      case DatumKind::smoothed_indicator: {
        double s = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k) s += (y[k] - center[k]) * (y[k] - center[k]);
        return amplitude * smooth_step(std::sqrt(s) / radius);
      }
      case DatumKind::clipped_polynomial: {
        double s = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k) s += (y[k] - center[k]) * (y[k] - center[k]);
        return std::clamp(offset + scale * s, -cap, cap);
      }
    }
    return 0.0;
  }

  /// Closed-form integral over R^{2dn}; only the bump has one.
  double bump_mass() const {
    if (kind != DatumKind::bump) throw DomainError("bump_mass: datum is not a bump");
    double m = amplitude;
    for (double w : width) m *= w * detail::bump_integral();
    return m;
  }

  void validate(std::size_t coords) const {
    if (kind == DatumKind::constant) return;
    if (center.size() != coords) throw DomainError("initial datum: center has wrong length");
    if (kind == DatumKind::bump) {
      if (width.size() != coords) throw DomainError("initial datum: width has wrong length");
      for (double w : width)
        if (!(w > 0.0)) throw DomainError("initial datum: widths must be positive");
    }
    if (kind == DatumKind::smoothed_indicator && !(radius > 0.0))
      throw DomainError("initial datum: radius must be positive");
    if (kind == DatumKind::clipped_polynomial && !(cap > 0.0))
      throw DomainError("initial datum: cap must be positive");
  }
};

// ---------------------------------------------------------------------------
// Ensembles

enum SampleFlag : std::uint32_t {
  kSampleOk = 0,
  kIntegrationFailed = 1u << 0,  // substep budget exhausted
  kHitSingularity = 1u << 1,     // force evaluated at a coincidence
};

/// Weighted Monte Carlo sample of phase space. Storage is flat: sample i
/// occupies phase[i*m, (i+1)*m) with m = 2dn.
struct Ensemble {
  int d = 0;
  int n = 0;
  double time = 0.0;
  std::uint64_t seed = 0;
  PhaseBox box;
  std::vector<double> phase;
  std::vector<double> weights;
  std::vector<double> values;
  std::vector<std::uint32_t> flags;

  std::size_t coords() const { return static_cast<std::size_t>(2 * d * n); }
  std::size_t size() const { return weights.size(); }

  std::span<const double> point(std::size_t i) const { return {phase.data() + i * coords(), coords()}; }
  std::span<double> point(std::size_t i) { return {phase.data() + i * coords(), coords()}; }

  Configuration configuration(std::size_t i) const { return Configuration::from_phase(d, n, point(i)); }

  std::size_t flagged() const {
    return static_cast<std::size_t>(std::count_if(flags.begin(), flags.end(), [](auto f) { return f != 0; }));
  }

  bool operator==(const Ensemble&) const = default;
};

/// N uniform samples of `box`, each with weight vol(box)/N and value f0(Y).
inline Ensemble sample_ensemble(int d, int n, const PhaseBox& box, std::size_t N, const InitialDatum& f0,
                                std::uint64_t seed) {
  if (d < 1 || n < 2) throw DomainError("sample_ensemble: need d >= 1 and n >= 2");
  if (N < 1) throw DomainError("sample_ensemble: N must be >= 1");
  const auto m = static_cast<std::size_t>(2 * d * n);
  box.validate(m);
  f0.validate(m);
  Ensemble e;
  e.d = d;
  e.n = n;
  e.seed = seed;
  e.box = box;
  e.phase.resize(N * m);
  e.weights.assign(N, box.volume() / static_cast<double>(N));
  e.values.resize(N);
  e.flags.assign(N, kSampleOk);
  Rng rng(seed);
  for (std::size_t i = 0; i < N; ++i) {
    auto y = e.point(i);
    for (std::size_t k = 0; k < m; ++k) y[k] = rng.uniform(box.lower[k], box.upper[k]);
    e.values[i] = f0(y);
  }
  return e;
}

/// Advances every sample by flow_map(., t); weights and values are carried
/// unchanged. Samples whose integration fails keep their state and are flagged.
template <PairInteraction P>
Ensemble push_forward(const Ensemble& e, const P& p, double t, const IntegratorConfig& icfg,
                      Parallelism par = {}) {
  Ensemble out = e;
  out.time = e.time + t;
  if (t == 0.0) return out;
  const std::size_t m = e.coords();
  const std::size_t workers = static_cast<std::size_t>(std::max(1, par.threads));
  std::vector<std::vector<double>> buffers(workers, std::vector<double>(m));
  parallel_for(e.size(), par, [&](std::size_t i) {
    if (out.flags[i] != 0) return;
    FlowIntegrator<P> integrator(p, icfg, e.d, e.n);
    std::vector<double> y(e.point(i).begin(), e.point(i).end());
    try {
      integrator.advance(y, t);
      std::copy(y.begin(), y.end(), out.point(i).begin());
    } catch (const SubstepLimitError&) {
      out.flags[i] |= kIntegrationFailed;
    } catch (const SingularityError&) {
      out.flags[i] |= kHitSingularity;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Truncation ladder and renormalization maps

struct TruncationLevel {
  double m;
};

/// beta_m(x) = (x ^ m) v (-m).
inline double truncate(TruncationLevel level, double x) { return std::max(std::min(x, level.m), -level.m); }

enum class BetaKind { smoothed_clamp, arctan, tanh, rational };

/// Bounded C^1 maps with bounded derivative.
struct Beta {
  BetaKind kind = BetaKind::arctan;
  double m = 1.0;  // clamp level for smoothed_clamp

  /// beta_m convolved with the uniform density on [-m/100, m/100]: identity on
  /// |x| <= m - delta, constant beyond m + delta, quadratic in between.
  static Beta smoothed_clamp(double m) { return {BetaKind::smoothed_clamp, m}; }

  double operator()(double x) const {
    switch (kind) {
      case BetaKind::smoothed_clamp: {
        const double delta = m / 100.0;
        const double a = std::abs(x);
        if (a <= m - delta) return x;
        const double mag = a >= m + delta ? m : m - (a - m - delta) * (a - m - delta) / (4.0 * delta);
        return std::copysign(mag, x);
      }
      case BetaKind::arctan: return std::atan(x);
      case BetaKind::tanh: return std::tanh(x);
      case BetaKind::rational: return x / (1.0 + x * x);
    }
    return x;
  }

  std::string name() const {
    switch (kind) {
      case BetaKind::smoothed_clamp: return "smoothed_clamp(m=" + std::to_string(m) + ")";
      case BetaKind::arctan: return "arctan";
      case BetaKind::tanh: return "tanh";
      case BetaKind::rational: return "x/(1+x^2)";
    }
    return "beta";
  }
};

inline std::vector<Beta> shipped_betas(double clamp_level = 0.5) {
  return {Beta::smoothed_clamp(clamp_level), Beta{BetaKind::arctan, 1.0}, Beta{BetaKind::tanh, 1.0},
          Beta{BetaKind::rational, 1.0}};
}

// ---------------------------------------------------------------------------
// Test functions

/// phi(t, Y) = b((t - tc)/tw) * prod_k b((y_k - c_k)/w_k). Without a time
/// window the time factor is identically 1.
class TestFunction {
 public:
  TestFunction(std::vector<double> center, std::vector<double> width, double t_begin, double t_end)
      : center_(std::move(center)), width_(std::move(width)), timed_(true),
        t_center_(0.5 * (t_begin + t_end)), t_half_(0.5 * (t_end - t_begin)) {
    validate();
    if (!(t_end > t_begin)) throw DomainError("test function: empty time window");
  }

  static TestFunction space_only(std::vector<double> center, std::vector<double> width) {
    TestFunction f(std::move(center), std::move(width));
    return f;
  }

  std::size_t coords() const { return center_.size(); }
  bool timed() const { return timed_; }
  double t_begin() const { return t_center_ - t_half_; }
  double t_end() const { return t_center_ + t_half_; }
  std::span<const double> center() const { return center_; }
  std::span<const double> width() const { return width_; }

  PhaseBox support() const {
    PhaseBox b;
    for (std::size_t k = 0; k < center_.size(); ++k) {
      b.lower.push_back(center_[k] - width_[k]);
      b.upper.push_back(center_[k] + width_[k]);
    }
    return b;
  }

  double time_factor(double t) const { return timed_ ? bump((t - t_center_) / t_half_) : 1.0; }

  double time_derivative_factor(double t) const {
    if (!timed_) return 0.0;
    const double u = (t - t_center_) / t_half_;
    const double b = bump(u);
    return b == 0.0 ? 0.0 : b * bump_log_derivative(u) / t_half_;
  }

  double space(std::span<const double> y) const {
    double v = 1.0;
    for (std::size_t k = 0; k < center_.size(); ++k) {
      v *= bump((y[k] - center_[k]) / width_[k]);
      if (v == 0.0) return 0.0;
    }
    return v;
  }

  double operator()(double t, std::span<const double> y) const {
    const double tf = time_factor(t);
    return tf == 0.0 ? 0.0 : tf * space(y);
  }

  /// Value, time derivative and phase-space gradient at (t, y). Returns
  /// false (and leaves outputs zero) outside the support.
  bool jet(double t, std::span<const double> y, double& value, double& dt, std::span<double> grad) const {
    std::fill(grad.begin(), grad.end(), 0.0);
    value = dt = 0.0;
    const double tf = time_factor(t);
    if (tf == 0.0) return false;
    const double s = space(y);
    if (s == 0.0) return false;
    value = tf * s;
    dt = time_derivative_factor(t) * s;
    for (std::size_t k = 0; k < center_.size(); ++k) {
      const double u = (y[k] - center_[k]) / width_[k];
      grad[k] = value * bump_log_derivative(u) / width_[k];
    }
    return true;
  }

  /// Integral of the space factor over R^{2dn}.
  double space_integral() const {
    double v = 1.0;
    for (double w : width_) v *= w * detail::bump_integral();
    return v;
  }

 private:
  TestFunction(std::vector<double> center, std::vector<double> width)
      : center_(std::move(center)), width_(std::move(width)), timed_(false) {
    validate();
  }

  void validate() const {
    if (center_.size() != width_.size() || center_.empty())
      throw DomainError("test function: center and width must have equal nonzero length");
    for (double w : width_)
      if (!(w > 0.0)) throw DomainError("test function: widths must be positive");
  }

  std::vector<double> center_;
  std::vector<double> width_;
  bool timed_;
  double t_center_ = 0.0;
  double t_half_ = 1.0;
};

/// Deterministic family of `count` test functions whose supports sit inside
/// `region`: centers drawn in the middle of the region, half-widths between
/// `min_width` and `max_width` (fractions of the region's half-extent). Time
/// windows are [t_begin, t_end].
inline std::vector<TestFunction> test_function_family(const PhaseBox& region, std::size_t count,
                                                      std::uint64_t seed, double t_begin, double t_end,
                                                      double min_width = 0.25, double max_width = 0.45) {
  if (!(min_width > 0.0) || !(max_width >= min_width) || max_width > 1.0)
    throw DomainError("test_function_family: need 0 < min_width <= max_width <= 1");
  std::vector<TestFunction> out;
  Rng rng(seed);
  for (std::size_t j = 0; j < count; ++j) {
    std::vector<double> c(region.size()), w(region.size());
    for (std::size_t k = 0; k < region.size(); ++k) {
      const double mid = 0.5 * (region.lower[k] + region.upper[k]);
      const double half = 0.5 * (region.upper[k] - region.lower[k]);
      w[k] = half * rng.uniform(min_width, max_width);
      const double slack = half - w[k];
      c[k] = mid + rng.uniform(-0.5, 0.5) * slack;
    }
    out.emplace_back(std::move(c), std::move(w), t_begin, t_end);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Characteristic integrals and weak residuals

/// Uniform Simpson grid over [0, t_end].
struct TimeGrid {
  double t_end = 1.0;
  int intervals = 1000;  // even

  double spacing() const { return t_end / intervals; }
  void validate() const {
    if (!(t_end > 0.0)) throw DomainError("time grid: t_end must be positive");
    if (intervals < 2 || intervals % 2 != 0) throw DomainError("time grid: intervals must be even and >= 2");
  }
};

/// Whether test functions must vanish near the collision set or may be
/// arbitrary (the latter needs an L1 force near the origin).
enum class ResidualMode { off_collision_set, whole_space };

struct ResidualOptions {
  ResidualMode mode = ResidualMode::whole_space;
  /// off_collision_set: minimum pair distance required wherever phi != 0.
  double collision_margin = 1e-3;
  /// Width fraction of the box treated as its boundary layer for coverage.
  double boundary_layer = 0.02;
  Parallelism parallelism{};
};

/// Per sample and test function: Q = int_0^T L phi(t, Y(t)) dt by a
/// rectangle rule on the grid shifted by a per-sample uniform offset, Q2 the
/// same on every other node, and phi(0, Y'). The random shift makes both
/// rules unbiased, so their error is part of the Monte Carlo noise.
/// L phi = d_t phi + B(Y) . grad phi.
struct CharacteristicIntegrals {
  std::size_t samples = 0;
  std::size_t functions = 0;
  std::vector<double> q;      // [i * functions + j]
  std::vector<double> q2;
  std::vector<double> phi0;
  std::vector<std::uint32_t> flags;
  std::vector<std::uint8_t> touches_boundary;  // sample starts in the box boundary layer and meets supp phi

  double Q(std::size_t i, std::size_t j) const { return q[i * functions + j]; }
  double Q2(std::size_t i, std::size_t j) const { return q2[i * functions + j]; }
  double Phi0(std::size_t i, std::size_t j) const { return phi0[i * functions + j]; }
};

inline bool whole_space_admissible(SingularityClass c) { return c != SingularityClass::confining_at_zero; }

template <PairInteraction P>
CharacteristicIntegrals characteristic_integrals(const Ensemble& e, const P& p, const IntegratorConfig& icfg,
                                                 const TimeGrid& grid, std::span<const TestFunction> phis,
                                                 const ResidualOptions& opts = {}) {
  grid.validate();
  if (p.dimension() != e.d) throw DomainError("characteristic_integrals: dimension mismatch");
  if (opts.mode == ResidualMode::whole_space && !whole_space_admissible(p.singularity_class()))
    throw DomainError("whole-space residuals need a force that is integrable at the origin");
  for (const auto& phi : phis) {
    if (phi.coords() != e.coords()) throw DomainError("test function has wrong phase dimension");
    if (!phi.timed()) throw DomainError("weak residuals need test functions with a time window");
    if (phi.t_end() > grid.t_end + 1e-12)
      throw CoverageError("test function time window extends past the transported horizon");
  }
  const std::size_t N = e.size(), J = phis.size(), m = e.coords();
  const int K = grid.intervals;
  const double h = grid.spacing();
  const std::uint64_t shift_seed = derive_seed(e.seed, "quadrature_shift");

  CharacteristicIntegrals out;
  out.samples = N;
  out.functions = J;
  out.q.assign(N * J, 0.0);
  out.q2.assign(N * J, 0.0);
  out.phi0.assign(N * J, 0.0);
  out.flags.assign(e.flags.begin(), e.flags.end());
  out.touches_boundary.assign(N, 0);

  parallel_for(N, opts.parallelism, [&](std::size_t i) {
    if (out.flags[i] != 0) return;
    std::vector<double> y(e.point(i).begin(), e.point(i).end());
    std::vector<double> b(m), grad(m), scratch(static_cast<std::size_t>(2 * e.d));
    std::vector<double> s1(J, 0.0), s2(J, 0.0);
    bool touched = false;
    const bool in_layer = e.box.near_boundary(y, opts.boundary_layer);
    auto accumulate = [&](int k, double t, std::span<const double> state) {
      std::copy(state.begin() + static_cast<std::ptrdiff_t>(m / 2), state.end(), b.begin());
      bool forces_ready = false;
      for (std::size_t j = 0; j < J; ++j) {
        double value, dt;
        if (!phis[j].jet(t, state, value, dt, grad)) continue;
        touched = true;
        if (opts.mode == ResidualMode::off_collision_set &&
            detail::min_pair_distance(state, e.d, e.n) <= opts.collision_margin)
          throw DomainError("test function does not vanish near the collision set");
        if (k < 0) {
          out.phi0[i * J + j] = value;
          continue;
        }
        if (!forces_ready) {
          detail::accelerations(state, e.d, e.n, p, std::span<double>(b).subspan(m / 2), scratch);
          forces_ready = true;
        }
        double lphi = dt;
        for (std::size_t c = 0; c < m; ++c) lphi += b[c] * grad[c];
        s1[j] += lphi;
        if (k % 2 == 0) s2[j] += lphi;
      }
    };
    try {
      accumulate(-1, 0.0, y);
      const double u = Rng(derive_seed(shift_seed, static_cast<std::uint64_t>(i))).uniform();
      std::vector<double> times(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) times[static_cast<std::size_t>(k)] = (k + u) * h;
      FlowIntegrator<P> integrator(p, icfg, e.d, e.n);
      integrator.advance_through(std::span<double>(y), times, [&](std::size_t k, std::span<const double> state) {
        accumulate(static_cast<int>(k), times[k], state);
      });
    } catch (const SubstepLimitError&) {
      out.flags[i] |= kIntegrationFailed;
    } catch (const SingularityError&) {
      out.flags[i] |= kHitSingularity;
    }
    if (out.flags[i] != 0) {
      std::fill_n(out.q.begin() + static_cast<std::ptrdiff_t>(i * J), J, 0.0);
      std::fill_n(out.q2.begin() + static_cast<std::ptrdiff_t>(i * J), J, 0.0);
      std::fill_n(out.phi0.begin() + static_cast<std::ptrdiff_t>(i * J), J, 0.0);
      return;
    }
    for (std::size_t j = 0; j < J; ++j) {
      out.q[i * J + j] = s1[j] * h;
      out.q2[i * J + j] = s2[j] * 2.0 * h;
    }
    out.touches_boundary[i] = touched && in_layer;
  });
  return out;
}

struct ResidualEstimate {
  double estimate = 0.0;         // LHS - RHS of the weak identity
  double std_error = 0.0;        // paired Monte Carlo standard error
  double quadrature_bias = 0.0;  // |sum w f (Q - Q2)|
  double integrator_bias = 0.0;  // 2 sum w |f| |Q(dt) - Q(dt/2)|, when a halved run is supplied
  std::size_t flagged = 0;
  std::size_t samples = 0;

  double defect() const { return std::abs(estimate); }
  double bias_bound() const { return quadrature_bias + integrator_bias; }
  bool passes(double tolerance = 0.0) const { return defect() <= tolerance + 3.0 * std_error + bias_bound(); }
};

/// Defect of the weak identity
///   int f (d_t phi + B . grad phi) = - int f0 phi(0, .)
/// for the solution whose value along characteristic i is `carried[i]` for
/// t > 0 and `initial[i]` at t = 0 (equal for a true push-forward).
inline ResidualEstimate weak_residual(const Ensemble& e, const CharacteristicIntegrals& ci, std::size_t j,
                                      std::span<const double> initial, std::span<const double> carried,
                                      const CharacteristicIntegrals* halved = nullptr) {
  const std::size_t N = e.size();
  if (ci.samples != N || initial.size() != N || carried.size() != N)
    throw DomainError("weak_residual: sample counts disagree");
  ResidualEstimate r;
  r.samples = N;
  std::vector<double> contrib(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (ci.flags[i] != 0) {
      ++r.flagged;
      continue;
    }
    const double w = e.weights[i];
    if (ci.touches_boundary[i] && (carried[i] != 0.0 || initial[i] != 0.0))
      throw CoverageError("test function support reaches the boundary of the sampled region");
    contrib[i] = w * (carried[i] * ci.Q(i, j) + initial[i] * ci.Phi0(i, j));
    r.quadrature_bias += w * carried[i] * (ci.Q(i, j) - ci.Q2(i, j));
    if (halved) r.integrator_bias += 2.0 * w * std::abs(carried[i]) * std::abs(ci.Q(i, j) - halved->Q(i, j));
  }
  r.quadrature_bias = std::abs(r.quadrature_bias);
  const double n = static_cast<double>(N);
  r.estimate = std::accumulate(contrib.begin(), contrib.end(), 0.0);
  if (N > 1) {
    const double mean = r.estimate / n;
    double ss = 0.0;
    for (double c : contrib) ss += (c - mean) * (c - mean);
    r.std_error = std::sqrt(ss * n / (n - 1.0));
  }
  return r;
}

/// weak_residual of beta(f): both value sets are mapped through beta.
inline ResidualEstimate renormalized_residual(const Beta& beta, const Ensemble& e, const CharacteristicIntegrals& ci,
                                              std::size_t j, std::span<const double> initial,
                                              std::span<const double> carried,
                                              const CharacteristicIntegrals* halved = nullptr) {
  std::vector<double> bi(initial.size()), bc(carried.size());
  std::transform(initial.begin(), initial.end(), bi.begin(), [&](double x) { return beta(x); });
  std::transform(carried.begin(), carried.end(), bc.begin(), [&](double x) { return beta(x); });
  return weak_residual(e, ci, j, bi, bc, halved);
}

/// A transported solution: ensemble at t = 0 plus the data needed to
/// re-transport it on demand.
template <PairInteraction P>
struct SolutionSeries {
  const Ensemble* initial = nullptr;
  const P* potential = nullptr;
  IntegratorConfig integrator{};
  TimeGrid grid{};
};

/// Convenience: weak residual of the push-forward solution for one test function.
template <PairInteraction P>
ResidualEstimate weak_residual(const SolutionSeries<P>& s, const TestFunction& phi,
                               const ResidualOptions& opts = {}) {
  const auto ci = characteristic_integrals(*s.initial, *s.potential, s.integrator, s.grid,
                                           std::span<const TestFunction>(&phi, 1), opts);
  return weak_residual(*s.initial, ci, 0, s.initial->values, s.initial->values);
}

template <PairInteraction P>
ResidualEstimate renormalized_residual(const Beta& beta, const SolutionSeries<P>& s, const TestFunction& phi,
                                       const ResidualOptions& opts = {}) {
  const auto ci = characteristic_integrals(*s.initial, *s.potential, s.integrator, s.grid,
                                           std::span<const TestFunction>(&phi, 1), opts);
  return renormalized_residual(beta, *s.initial, ci, 0, s.initial->values, s.initial->values);
}

// ---------------------------------------------------------------------------
// Combining solutions

enum class CombineKind { sum, difference, product, polarized_product };

/// Continuous maps G of two solution values.
struct Combiner {
  CombineKind kind = CombineKind::product;

  double operator()(double a, double b) const {
    switch (kind) {
      case CombineKind::sum: return a + b;
      case CombineKind::difference: return a - b;
      case CombineKind::product: return a * b;
      case CombineKind::polarized_product: return 0.25 * ((a + b) * (a + b) - (a - b) * (a - b));
    }
    return 0.0;
  }
};

/// Per-sample G(f, g) over two ensembles that share configurations and weights.
inline Ensemble combine_solutions(const Combiner& G, const Ensemble& f, const Ensemble& g) {
  if (f.d != g.d || f.n != g.n || f.time != g.time || f.phase != g.phase || f.weights != g.weights)
    throw AlignmentError("combine_solutions: ensembles do not share configurations");
  Ensemble out = f;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = G(f.values[i], g.values[i]);
    out.flags[i] = f.flags[i] | g.flags[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Collision-cutoff boundary term

/// Monte Carlo estimate of (1/mu) int_{|x1 - x2| <= mu} |f Psi (v1 - v2)|
/// at the ensemble's time, over particles 1 and 2.
inline MonteCarloEstimate collision_boundary_term(const Ensemble& e, const TestFunction& psi, double mu) {
  if (!(mu > 0.0)) throw DomainError("collision_boundary_term: mu must be positive");
  if (psi.coords() != e.coords()) throw DomainError("collision_boundary_term: test function has wrong dimension");
  const std::size_t N = e.size();
  const int d = e.d, n = e.n;
  std::vector<double> contrib(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (e.flags[i] != 0 || e.values[i] == 0.0) continue;
    const auto y = e.point(i);
    double dx = 0.0, dv = 0.0;
    for (int k = 0; k < d; ++k) {
      const double a = y[k] - y[d + k];
      const double b = y[n * d + k] - y[n * d + d + k];
      dx += a * a;
      dv += b * b;
    }
    if (dx > mu * mu) continue;
    const double w = psi(e.time, y);
    if (w == 0.0) continue;
    contrib[i] = e.weights[i] * std::abs(e.values[i] * w) * std::sqrt(dv) / mu;
  }
  MonteCarloEstimate r;
  r.value = std::accumulate(contrib.begin(), contrib.end(), 0.0);
  if (N > 1) {
    const double nn = static_cast<double>(N), mean = r.value / nn;
    double ss = 0.0;
    for (double c : contrib) ss += (c - mean) * (c - mean);
    r.std_error = std::sqrt(ss * nn / (nn - 1.0));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Energy cutoff and the uniqueness functional

/// phi_{R,T}(t, Y) = psi(sqrt(1 + sum |x_i|^2) - (R+1) e^{C'(T-t)} - 2) psi(E / R^2)
/// with C' = n C. C bounds particle speeds on bounded-energy sets,
/// |v_i| <= C (1 + R); it is a configuration value, not derived.
struct EnergyCutoff {
  double R = 1.0;
  double T = 1.0;
  double C = 1.0;
  int n = 2;

  double c_prime() const { return n * C; }

  void validate() const {
    if (!(R > 0.0) || !(T > 0.0) || !(C >= 0.0) || n < 2) throw DomainError("energy cutoff: invalid parameters");
  }

  double spatial_radius(double t) const { return (R + 1.0) * std::exp(c_prime() * (T - t)); }
};

template <PairInteraction P>
double energy_cutoff(const EnergyCutoff& cut, double t, const Configuration& cfg, const P& p) {
  cut.validate();
  if (t < 0.0 || t > cut.T) throw DomainError("energy_cutoff: t must lie in [0, T]");
  double xx = 0.0;
  for (double c : cfg.positions()) xx += c * c;
  const double spatial = smooth_step(std::sqrt(1.0 + xx) - cut.spatial_radius(t) - 2.0);
  if (spatial == 0.0) return 0.0;
  return spatial * smooth_step(energy(cfg, p) / (cut.R * cut.R));
}

/// f(t_k, Y_i) = f0(Y(-t_k, Y_i)) for every evaluation point, by backward
/// characteristics. Result is indexed [k][i]; failed samples are flagged.
template <PairInteraction P>
std::vector<std::vector<double>> backward_values(Ensemble& points, const P& p, const InitialDatum& f0,
                                                 std::span<const double> times, const IntegratorConfig& icfg,
                                                 Parallelism par = {}) {
  const std::size_t N = points.size();
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1]) || times[0] < 0.0) throw DomainError("backward_values: times must increase from >= 0");
  std::vector<std::vector<double>> out(times.size(), std::vector<double>(N, 0.0));
  std::vector<double> back(times.size());
  std::transform(times.begin(), times.end(), back.begin(), [](double t) { return -t; });
  parallel_for(N, par, [&](std::size_t i) {
    if (points.flags[i] != 0) return;
    std::vector<double> y(points.point(i).begin(), points.point(i).end());
    FlowIntegrator<P> integrator(p, icfg, points.d, points.n);
    try {
      integrator.advance_through(std::span<double>(y), back, [&](std::size_t k, std::span<const double> state) {
        out[k][i] = f0(state);
      });
    } catch (const SubstepLimitError&) {
      points.flags[i] |= kIntegrationFailed;
    } catch (const SingularityError&) {
      points.flags[i] |= kHitSingularity;
    }
  });
  for (std::size_t i = 0; i < N; ++i)
    if (points.flags[i] != 0)
      for (auto& row : out) row[i] = 0.0;
  return out;
}

struct FunctionalPoint {
  double t = 0.0;
  double value = 0.0;
  double std_error = 0.0;
  /// Paired standard error of value(t_k) - value(t_{k-1}); 0 at k = 0.
  double increment_std_error = 0.0;
};

/// t_k -> int h(t_k, .) phi_{R,T}(t_k, .) over the evaluation points, where
/// h_values[k][i] = h(t_k, Y_i).
template <PairInteraction P>
std::vector<FunctionalPoint> uniqueness_functional(const Ensemble& points,
                                                   std::span<const std::vector<double>> h_values,
                                                   const EnergyCutoff& cut, const P& p,
                                                   std::span<const double> times) {
  if (h_values.size() != times.size()) throw DomainError("uniqueness_functional: one value set per time");
  const std::size_t N = points.size();
  std::vector<double> energies(N, 0.0), radii(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (points.flags[i] != 0) continue;
    const auto y = points.point(i);
    energies[i] = detail::energy(y, points.d, points.n, p);
    double xx = 0.0;
    for (std::size_t c = 0; c < y.size() / 2; ++c) xx += y[c] * y[c];
    radii[i] = std::sqrt(1.0 + xx);
  }
  std::vector<FunctionalPoint> out;
  std::vector<double> prev, cur(N);
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double t = times[k];
    if (t < 0.0 || t > cut.T) throw DomainError("uniqueness_functional: times must lie in [0, T]");
    for (std::size_t i = 0; i < N; ++i) {
      if (points.flags[i] != 0 || h_values[k][i] == 0.0) {
        cur[i] = 0.0;
        continue;
      }
      const double phi = smooth_step(radii[i] - cut.spatial_radius(t) - 2.0) *
                         smooth_step(energies[i] / (cut.R * cut.R));
      cur[i] = points.weights[i] * h_values[k][i] * phi;
    }
    FunctionalPoint fp;
    fp.t = t;
    fp.value = std::accumulate(cur.begin(), cur.end(), 0.0);
    const double nn = static_cast<double>(N);
    if (N > 1) {
      const double mean = fp.value / nn;
      double ss = 0.0;
      for (double c : cur) ss += (c - mean) * (c - mean);
      fp.std_error = std::sqrt(ss * nn / (nn - 1.0));
      if (!prev.empty()) {
        double dsum = 0.0;
        for (std::size_t i = 0; i < N; ++i) dsum += cur[i] - prev[i];
        const double dmean = dsum / nn;
        double dss = 0.0;
        for (std::size_t i = 0; i < N; ++i) dss += (cur[i] - prev[i] - dmean) * (cur[i] - prev[i] - dmean);
        fp.increment_std_error = std::sqrt(dss * nn / (nn - 1.0));
      }
    }
    out.push_back(fp);
    prev = cur;
  }
  return out;
}

}  // namespace liouville
