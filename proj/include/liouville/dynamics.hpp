#pragma once

// Phase-space vector field B(Y) of the n-particle system, its conserved
// energy, and time integration of the flow forward and backward in time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "liouville/errors.hpp"
#include "liouville/potentials.hpp"

namespace liouville {

/// Phase-space point Y = (x_1..x_n, v_1..v_n), each vector in R^d, stored
/// as one flat array in that order.
class Configuration {
 public:
  Configuration() = default;

  Configuration(int d, int n) : d_(d), n_(n) {
    validate();
    y_.assign(static_cast<std::size_t>(2 * d * n), 0.0);
  }

  Configuration(int d, int n, std::span<const double> positions, std::span<const double> velocities)
      : d_(d), n_(n) {
    validate();
    const auto dn = static_cast<std::size_t>(d * n);
    if (positions.size() != dn || velocities.size() != dn)
      throw DomainError("configuration: expected " + std::to_string(dn) + " position and velocity components");
    y_.reserve(2 * dn);
    y_.insert(y_.end(), positions.begin(), positions.end());
    y_.insert(y_.end(), velocities.begin(), velocities.end());
  }

  static Configuration from_phase(int d, int n, std::span<const double> phase) {
    Configuration c(d, n);
    if (phase.size() != c.y_.size()) throw DomainError("configuration: phase vector has wrong length");
    std::copy(phase.begin(), phase.end(), c.y_.begin());
    return c;
  }

  int dimension() const { return d_; }
  int particles() const { return n_; }
  std::size_t size() const { return y_.size(); }

  std::span<const double> x(int i) const { return {y_.data() + offset_x(i), static_cast<std::size_t>(d_)}; }
  std::span<double> x(int i) { return {y_.data() + offset_x(i), static_cast<std::size_t>(d_)}; }
  std::span<const double> v(int i) const { return {y_.data() + offset_v(i), static_cast<std::size_t>(d_)}; }
  std::span<double> v(int i) { return {y_.data() + offset_v(i), static_cast<std::size_t>(d_)}; }

  std::span<const double> positions() const { return {y_.data(), y_.size() / 2}; }
  std::span<double> positions() { return {y_.data(), y_.size() / 2}; }
  std::span<const double> velocities() const { return {y_.data() + y_.size() / 2, y_.size() / 2}; }
  std::span<double> velocities() { return {y_.data() + y_.size() / 2, y_.size() / 2}; }
  std::span<const double> phase() const { return y_; }
  std::span<double> phase() { return y_; }

  bool operator==(const Configuration&) const = default;

 private:
  void validate() const {
    if (d_ < 1) throw DomainError("configuration: dimension must be >= 1");
    if (n_ < 2) throw DomainError("configuration: need at least two particles");
  }
  std::size_t offset_x(int i) const { return static_cast<std::size_t>(i * d_); }
  std::size_t offset_v(int i) const { return static_cast<std::size_t>((n_ + i) * d_); }

  int d_ = 0;
  int n_ = 0;
  std::vector<double> y_;
};

namespace detail {

/// Min over unordered pairs of |x_i - x_j|, read from a flat phase vector.
inline double min_pair_distance(std::span<const double> y, int d, int n) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = y[i * d + k] - y[j * d + k];
        s += diff * diff;
      }
      best = std::min(best, s);
    }
  return std::sqrt(best);
}

/// acc_i = -sum_{j != i} grad V(x_i - x_j); each pair is evaluated once and
/// applied antisymmetrically.
template <PairInteraction P>
void accelerations(std::span<const double> y, int d, int n, const P& p, std::span<double> acc,
                   std::span<double> scratch) {
  if (p.is_singular() && min_pair_distance(y, d, n) < kCoincidenceThreshold)
    throw SingularityError("force evaluation at a particle coincidence");
  std::fill(acc.begin(), acc.end(), 0.0);
  std::span<double> r = scratch.subspan(0, d), g = scratch.subspan(d, d);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      for (int k = 0; k < d; ++k) r[k] = y[i * d + k] - y[j * d + k];
      p.gradient(r, g);
      for (int k = 0; k < d; ++k) {
        acc[i * d + k] -= g[k];
        acc[j * d + k] += g[k];
      }
    }
}

template <PairInteraction P>
double energy(std::span<const double> y, int d, int n, const P& p) {
  if (p.is_singular() && min_pair_distance(y, d, n) < kCoincidenceThreshold)
    throw SingularityError("energy of a configuration with coincident particles");
  std::vector<double> r(static_cast<std::size_t>(d));
  double e = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      for (int k = 0; k < d; ++k) r[k] = y[i * d + k] - y[j * d + k];
      e += p.value(r);
    }
  const std::size_t half = y.size() / 2;
  for (std::size_t k = half; k < y.size(); ++k) e += 0.5 * y[k] * y[k];
  return e;
}

}  // namespace detail

inline double min_pair_distance(const Configuration& cfg) {
  return detail::min_pair_distance(cfg.phase(), cfg.dimension(), cfg.particles());
}

/// E = 1/2 sum_{i != j} V(x_i - x_j) + sum |v_i|^2 / 2. Pair potentials are
/// even, so each unordered pair is evaluated once.
template <PairInteraction P>
double energy(const Configuration& cfg, const P& p) {
  if (p.dimension() != cfg.dimension()) throw DomainError("energy: dimension mismatch");
  return detail::energy(cfg.phase(), cfg.dimension(), cfg.particles(), p);
}

/// B(Y) = (v_1..v_n, -sum_j grad V(x_1 - x_j), .., -sum_j grad V(x_n - x_j)),
/// laid out like a phase vector.
template <PairInteraction P>
std::vector<double> vector_field(const Configuration& cfg, const P& p) {
  if (p.dimension() != cfg.dimension()) throw DomainError("vector_field: dimension mismatch");
  const int d = cfg.dimension(), n = cfg.particles();
  std::vector<double> b(cfg.size());
  std::copy(cfg.velocities().begin(), cfg.velocities().end(), b.begin());
  std::vector<double> scratch(static_cast<std::size_t>(2 * d));
  detail::accelerations(cfg.phase(), d, n, p, std::span<double>(b).subspan(b.size() / 2), scratch);
  return b;
}

enum class Scheme { velocity_verlet, rk4_reference };

/// Test hooks that deliberately break a structural property of the flow.
/// They exist to give every verification check a failing control case.
enum class FlowPerturbation {
  none,
  velocity_damping,  // v <- exp(-strength |h|) v after every step: dissipative, not volume preserving
  clock_drift,       // forces scaled by 1 + strength * (time since start): breaks the group law
  position_jump,     // positions shifted by strength at each multiple of period: discontinuous in t
};

struct IntegratorConfig {
  Scheme scheme = Scheme::velocity_verlet;
  double dt = 1e-3;
  bool adaptive = false;
  /// Multiplier on the adaptive local step.
  double d_min_factor = 1.0;
  /// Distance below which adaptive steps shrink.
  double reference_distance = 0.5;
  long max_substeps = 1'000'000;
  FlowPerturbation perturbation = FlowPerturbation::none;
  double perturbation_strength = 0.0;
  double perturbation_period = 0.0;

  void validate() const {
    if (!(dt > 0.0)) throw DomainError("integrator: dt must be positive");
    if (max_substeps < 1) throw DomainError("integrator: max_substeps must be >= 1");
    if (!(d_min_factor > 0.0) || d_min_factor > 1.0)
      throw DomainError("integrator: d_min_factor must lie in (0, 1]");
    if (!(reference_distance > 0.0)) throw DomainError("integrator: reference_distance must be positive");
  }

  IntegratorConfig halved() const {
    IntegratorConfig c = *this;
    c.dt *= 0.5;
    c.max_substeps *= 2;
    return c;
  }
};

/// Stateful stepping engine for one potential. Not shareable between
/// threads; make one per worker.
template <PairInteraction P>
class FlowIntegrator {
 public:
  FlowIntegrator(const P& p, IntegratorConfig icfg, int d, int n)
      : p_(&p), cfg_(icfg), d_(d), n_(n) {
    cfg_.validate();
    if (p.dimension() != d) throw DomainError("integrator: potential and configuration dimensions differ");
    const auto m = static_cast<std::size_t>(2 * d * n);
    acc_.resize(m / 2);
    scratch_.resize(static_cast<std::size_t>(2 * d));
    if (cfg_.scheme == Scheme::rk4_reference) {
      k_.assign(4, std::vector<double>(m));
      tmp_.resize(m);
    }
  }

  const IntegratorConfig& config() const { return cfg_; }

  /// Local step magnitude: dt * min(1, factor * (d_min / d_ref)^(3/2)) when
  /// adaptive, dt otherwise.
  double local_step(std::span<const double> y) const {
    if (!cfg_.adaptive) return cfg_.dt;
    const double dmin = detail::min_pair_distance(y, d_, n_);
    const double ratio = dmin / cfg_.reference_distance;
    return cfg_.dt * std::min(1.0, cfg_.d_min_factor * ratio * std::sqrt(ratio));
  }

  /// One scheme step of signed size h.
  void step(std::span<double> y, double h) {
    acc_valid_ = false;
    single_step(y, h);
  }

  /// Advances y by exactly `duration` (negative means backward).
  void advance(std::span<double> y, double duration) {
    const double t = duration;
    advance_through(y, std::span<const double>(&t, 1), [](std::size_t, std::span<const double>) {});
  }

  /// Advances through the signed output times (monotone in |t|, all the same
  /// sign as the direction of travel), calling obs(k, y) on arrival at each.
  template <class Observer>
  void advance_through(std::span<double> y, std::span<const double> times, Observer&& obs) {
    clock_ = 0.0;
    substeps_ = 0;
    acc_valid_ = false;
    for (std::size_t k = 0; k < times.size(); ++k) {
      run_until(y, times[k]);
      obs(k, std::span<const double>(y.data(), y.size()));
    }
  }

  /// Runs with a per-substep callback obs(t, y) (called after each substep).
  template <class Observer>
  void advance_recording(std::span<double> y, double duration, Observer&& obs) {
    clock_ = 0.0;
    substeps_ = 0;
    acc_valid_ = false;
    run_until(y, duration, obs);
  }

  long substeps() const { return substeps_; }

 private:
  struct NoObserver {
    void operator()(double, std::span<const double>) const {}
  };

  template <class Observer = NoObserver>
  void run_until(std::span<double> y, double target, Observer&& obs = {}) {
    const double remaining0 = target - clock_;
    if (remaining0 == 0.0) return;
    const double dir = remaining0 > 0.0 ? 1.0 : -1.0;
    if (!cfg_.adaptive) {
      const double len = std::abs(remaining0);
      const auto steps = static_cast<long>(std::max(1.0, std::ceil(len / cfg_.dt * (1.0 - 1e-12))));
      const double h = remaining0 / static_cast<double>(steps);
      const double start = clock_;
      for (long s = 1; s <= steps; ++s) {
        count_substep();
        const double before = clock_;
        single_step(y, h);
        clock_ = s == steps ? target : start + static_cast<double>(s) * h;
        after_step(y, h, before);
        obs(clock_, std::span<const double>(y.data(), y.size()));
      }
      return;
    }
    while (dir * (target - clock_) > 0.0) {
      count_substep();
      const double remaining = std::abs(target - clock_);
      const double local = local_step(y);
      const bool last = local >= remaining * (1.0 - 1e-12);
      const double h = dir * (last ? remaining : local);
      const double before = clock_;
      single_step(y, h);
      clock_ = last ? target : clock_ + h;
      after_step(y, h, before);
      obs(clock_, std::span<const double>(y.data(), y.size()));
    }
  }

  void count_substep() {
    if (++substeps_ > cfg_.max_substeps)
      throw SubstepLimitError("integration exceeded " + std::to_string(cfg_.max_substeps) + " substeps");
  }

  double force_scale(double t) const {
    return cfg_.perturbation == FlowPerturbation::clock_drift ? 1.0 + cfg_.perturbation_strength * t : 1.0;
  }

  void compute_acc(std::span<const double> y) {
    detail::accelerations(y, d_, n_, *p_, acc_, scratch_);
    acc_valid_ = true;
  }

  void single_step(std::span<double> y, double h) {
    const std::size_t half = y.size() / 2;
    if (cfg_.scheme == Scheme::velocity_verlet) {
      if (!acc_valid_) compute_acc(y);
      const double s0 = force_scale(clock_);
      for (std::size_t k = 0; k < half; ++k) y[half + k] += 0.5 * h * s0 * acc_[k];
      for (std::size_t k = 0; k < half; ++k) y[k] += h * y[half + k];
      compute_acc(y);
      const double s1 = force_scale(clock_ + h);
      for (std::size_t k = 0; k < half; ++k) y[half + k] += 0.5 * h * s1 * acc_[k];
      return;
    }
    // classical RK4 on dY/dt = B(Y)
    auto field = [&](std::span<const double> state, double t, std::vector<double>& out) {
      std::copy(state.begin() + half, state.end(), out.begin());
      detail::accelerations(state, d_, n_, *p_, std::span<double>(out).subspan(half), scratch_);
      const double s = force_scale(t);
      if (s != 1.0)
        for (std::size_t k = half; k < out.size(); ++k) out[k] *= s;
    };
    const std::span<const double> y0(y.data(), y.size());
    field(y0, clock_, k_[0]);
    for (std::size_t k = 0; k < y.size(); ++k) tmp_[k] = y[k] + 0.5 * h * k_[0][k];
    field(tmp_, clock_ + 0.5 * h, k_[1]);
    for (std::size_t k = 0; k < y.size(); ++k) tmp_[k] = y[k] + 0.5 * h * k_[1][k];
    field(tmp_, clock_ + 0.5 * h, k_[2]);
    for (std::size_t k = 0; k < y.size(); ++k) tmp_[k] = y[k] + h * k_[2][k];
    field(tmp_, clock_ + h, k_[3]);
    for (std::size_t k = 0; k < y.size(); ++k)
      y[k] += h / 6.0 * (k_[0][k] + 2.0 * k_[1][k] + 2.0 * k_[2][k] + k_[3][k]);
    acc_valid_ = false;
  }

  void after_step(std::span<double> y, double h, double before) {
    const std::size_t half = y.size() / 2;
    switch (cfg_.perturbation) {
      case FlowPerturbation::none:
      case FlowPerturbation::clock_drift: break;
      case FlowPerturbation::velocity_damping:
        {
        const double decay = std::exp(-cfg_.perturbation_strength * std::abs(h));
        for (std::size_t k = half; k < y.size(); ++k) y[k] *= decay;
      }
        break;
      case FlowPerturbation::position_jump: {
        const double period = cfg_.perturbation_period;
        if (period > 0.0 &&
            std::floor(std::abs(clock_) / period) > std::floor(std::abs(before) / period)) {
          for (std::size_t k = 0; k < half; ++k) y[k] += cfg_.perturbation_strength;
          acc_valid_ = false;
        }
        break;
      }
    }
  }

  const P* p_;
  IntegratorConfig cfg_;
  int d_, n_;
  double clock_ = 0.0;
  long substeps_ = 0;
  bool acc_valid_ = false;
  std::vector<double> acc_, scratch_, tmp_;
  std::vector<std::vector<double>> k_;
};

/// One integrator step of signed size dt.
template <PairInteraction P>
Configuration step(const Configuration& cfg, const P& p, double dt, Scheme scheme = Scheme::velocity_verlet) {
  if (dt == 0.0) throw DomainError("step: dt must be nonzero");
  IntegratorConfig icfg;
  icfg.scheme = scheme;
  icfg.dt = std::abs(dt);
  FlowIntegrator<P> integrator(p, icfg, cfg.dimension(), cfg.particles());
  Configuration out = cfg;
  integrator.step(out.phase(), dt);
  return out;
}

struct Trajectory {
  int d = 0;
  int n = 0;
  std::vector<double> times;
  std::vector<Configuration> states;
  std::vector<double> energy_series;
  std::vector<double> min_distance_series;

  std::size_t size() const { return times.size(); }
};

/// Integrates from 0 to t_final (negative for the backward flow), storing the
/// initial state, every `stride`-th substep and the final state.
template <PairInteraction P>
Trajectory integrate(const Configuration& cfg, const P& p, double t_final, const IntegratorConfig& icfg,
                     int stride = 1) {
  if (stride < 1) throw DomainError("integrate: stride must be >= 1");
  const int d = cfg.dimension(), n = cfg.particles();
  Trajectory traj{d, n, {}, {}, {}, {}};
  auto record = [&](double t, std::span<const double> y) {
    traj.times.push_back(t);
    traj.states.push_back(Configuration::from_phase(d, n, y));
    traj.energy_series.push_back(detail::energy(y, d, n, p));
    traj.min_distance_series.push_back(detail::min_pair_distance(y, d, n));
  };
  record(0.0, cfg.phase());
  if (t_final == 0.0) return traj;
  FlowIntegrator<P> integrator(p, icfg, d, n);
  std::vector<double> y(cfg.phase().begin(), cfg.phase().end());
  long count = 0;
  integrator.advance_recording(std::span<double>(y), t_final, [&](double t, std::span<const double> state) {
    ++count;
    if (count % stride == 0 || t == t_final) record(t, state);
  });
  return traj;
}

/// Endpoint of the flow, Y(t, Y0).
template <PairInteraction P>
Configuration flow_map(const Configuration& y0, double t, const P& p, const IntegratorConfig& icfg) {
  Configuration out = y0;
  if (t == 0.0) return out;
  FlowIntegrator<P> integrator(p, icfg, y0.dimension(), y0.particles());
  integrator.advance(out.phase(), t);
  return out;
}

/// Largest |v_i| / (1 + R) over configurations with E <= R^2 and all
/// |x_i| <= R: an empirical value of the speed constant in the energy cutoff.
template <PairInteraction P>
double measured_speed_constant(std::span<const Configuration> configs, const P& p, double R) {
  double best = 0.0;
  for (const auto& c : configs) {
    bool inside = true;
    for (int i = 0; i < c.particles() && inside; ++i) inside = detail::norm(c.x(i)) <= R;
    if (!inside || energy(c, p) > R * R) continue;
    for (int i = 0; i < c.particles(); ++i) best = std::max(best, detail::norm(c.v(i)) / (1.0 + R));
  }
  return best;
}

}  // namespace liouville
