#pragma once

// Pair potentials for n-particle dynamics, together with the
// position-dependent mollification V_n(x) = (V * rho_{eps(x)})(x), where the
// averaging radius eps(x) = 2^-n alpha(x) shrinks near the origin so that the
// averaging ball never contains the singularity.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "liouville/errors.hpp"
#include "liouville/seeding.hpp"

namespace liouville {

/// Displacements shorter than this count as a collision.
inline constexpr double kCoincidenceThreshold = 1e-12;

enum class PotentialKind {
  free,                       // V = 0
  harmonic,                   // V = k |r|^2 / 2
  repulsive_power,            // V = k / |r|^a
  attractive_well,            // V = -D exp(-|r|^2 / (2 s^2))
  piecewise_linear_gradient,  // grad V = k_in r inside |r| <= r0, k_out r outside
};

enum class SingularityClass {
  smooth,
  l1_singular_gradient,  // |grad V| locally integrable at the origin
  confining_at_zero,     // V -> +infinity as |r| -> 0
};

/// Anything that can be evaluated and differentiated on R^d.
template <class F>
concept ScalarField = requires(const F& f, std::span<const double> r, std::span<double> g) {
  { f.dimension() } -> std::convertible_to<int>;
  { f.value(r) } -> std::convertible_to<double>;
  f.gradient(r, g);
};

/// A pair interaction usable by the dynamics: a scalar field that also knows
/// whether it is singular at the origin and how to describe itself.
template <class P>
concept PairInteraction = ScalarField<P> && requires(const P& p) {
  { p.is_singular() } -> std::convertible_to<bool>;
  { p.singularity_class() } -> std::same_as<SingularityClass>;
  { p.describe() } -> std::convertible_to<std::string>;
  { p.lower_bound_constant() } -> std::convertible_to<double>;
};

inline std::string to_string(PotentialKind k) {
  switch (k) {
    case PotentialKind::free: return "free";
    case PotentialKind::harmonic: return "harmonic";
    case PotentialKind::repulsive_power: return "repulsive_power";
    case PotentialKind::attractive_well: return "attractive_well";
    case PotentialKind::piecewise_linear_gradient: return "piecewise_linear_gradient";
  }
  return "unknown";
}

inline std::string to_string(SingularityClass c) {
  switch (c) {
    case SingularityClass::smooth: return "smooth";
    case SingularityClass::l1_singular_gradient: return "l1_singular_gradient";
    case SingularityClass::confining_at_zero: return "confining_at_zero";
  }
  return "unknown";
}

namespace detail {

inline double norm(std::span<const double> r) {
  double s = 0.0;
  for (double c : r) s += c * c;
  return std::sqrt(s);
}

inline double norm2(std::span<const double> r) {
  double s = 0.0;
  for (double c : r) s += c * c;
  return s;
}

/// Volume of the unit ball in R^d.
inline double unit_ball_volume(int d) {
  return std::pow(std::numbers::pi, 0.5 * d) / std::tgamma(0.5 * d + 1.0);
}

}  // namespace detail

/// Immutable pair potential from the shipped zoo. Build through the named
/// factories; they enforce the class constraints.
class PairPotential {
 public:
  static PairPotential free(int d) {
    return PairPotential(PotentialKind::free, d, SingularityClass::smooth, {});
  }

  static PairPotential harmonic(int d, double stiffness = 1.0) {
    if (!(stiffness > 0.0)) throw DomainError("harmonic: stiffness must be positive");
    return PairPotential(PotentialKind::harmonic, d, SingularityClass::smooth, {stiffness});
  }

  /// V(r) = strength / |r|^exponent. The L1-gradient class needs
  /// exponent < d - 1 so that |grad V| ~ |r|^-(a+1) is locally integrable.
  static PairPotential repulsive_power(int d, double exponent, double strength,
                                       SingularityClass cls) {
    if (!(exponent > 0.0) || !(strength > 0.0))
      throw DomainError("repulsive_power: exponent and strength must be positive");
    if (cls == SingularityClass::smooth)
      throw DomainError("repulsive_power is singular at the origin");
    if (cls == SingularityClass::l1_singular_gradient && !(exponent < d - 1))
      throw DomainError("repulsive_power: the L1-gradient class requires exponent < d - 1");
    return PairPotential(PotentialKind::repulsive_power, d, cls, {exponent, strength});
  }

  static PairPotential attractive_well(int d, double depth, double width) {
    if (!(depth > 0.0) || !(width > 0.0))
      throw DomainError("attractive_well: depth and width must be positive");
    return PairPotential(PotentialKind::attractive_well, d, SingularityClass::smooth, {depth, width});
  }

  /// Gradient jumps from k_in r to k_out r across the sphere |r| = r0; on the
  /// sphere itself the inner value is used.
  static PairPotential piecewise_linear_gradient(int d, double r0, double k_in, double k_out) {
    if (!(r0 > 0.0) || !(k_in > 0.0) || !(k_out > 0.0))
      throw DomainError("piecewise_linear_gradient: radius and stiffnesses must be positive");
    return PairPotential(PotentialKind::piecewise_linear_gradient, d, SingularityClass::smooth,
                         {r0, k_in, k_out});
  }

  PotentialKind kind() const { return kind_; }
  int dimension() const { return dim_; }
  SingularityClass singularity_class() const { return class_; }
  bool is_singular() const { return class_ != SingularityClass::smooth; }

  /// C in V(r) >= -C (1 + |r|^2).
  double lower_bound_constant() const {
    return kind_ == PotentialKind::attractive_well ? params_[0] : 0.0;
  }

  /// Theorem-3-class potentials are accepted in d = 1 but carry a note.
  bool outside_proven_range() const {
    return class_ == SingularityClass::confining_at_zero && dim_ == 1;
  }

  /// Named parameters, in factory argument order.
  std::vector<std::pair<std::string, double>> parameters() const {
    switch (kind_) {
      case PotentialKind::free: return {};
      case PotentialKind::harmonic: return {{"stiffness", params_[0]}};
      case PotentialKind::repulsive_power:
        return {{"exponent", params_[0]}, {"strength", params_[1]}};
      case PotentialKind::attractive_well: return {{"depth", params_[0]}, {"width", params_[1]}};
      case PotentialKind::piecewise_linear_gradient:
        return {{"radius", params_[0]}, {"inner_stiffness", params_[1]},
                {"outer_stiffness", params_[2]}};
    }
    return {};
  }

  std::string describe() const {
    std::ostringstream os;
    os << to_string(kind_) << "(d=" << dim_;
    for (const auto& [name, v] : parameters()) os << "," << name << "=" << v;
    os << ";" << to_string(class_) << ")";
    if (outside_proven_range()) os << "[d=1 outside proven range]";
    return os.str();
  }

  double value(std::span<const double> r) const {
    check_dimension(r);
    const double rr = detail::norm2(r);
    switch (kind_) {
      case PotentialKind::free: return 0.0;
      case PotentialKind::harmonic: return 0.5 * params_[0] * rr;
      case PotentialKind::repulsive_power: {
        const double len = std::sqrt(rr);
        check_singular(len);
        return params_[1] / std::pow(len, params_[0]);
      }
      case PotentialKind::attractive_well:
        return -params_[0] * std::exp(-rr / (2.0 * params_[1] * params_[1]));
      case PotentialKind::piecewise_linear_gradient: {
        const double r0 = params_[0];
        if (rr <= r0 * r0) return 0.5 * params_[1] * rr;
        return 0.5 * params_[2] * rr + 0.5 * (params_[1] - params_[2]) * r0 * r0;
      }
    }
    return 0.0;
  }

  void gradient(std::span<const double> r, std::span<double> g) const {
    check_dimension(r);
    const double rr = detail::norm2(r);
    double scale = 0.0;
    switch (kind_) {
      case PotentialKind::free: scale = 0.0; break;
      case PotentialKind::harmonic: scale = params_[0]; break;
      case PotentialKind::repulsive_power: {
        const double len = std::sqrt(rr);
        check_singular(len);
        scale = -params_[0] * params_[1] / std::pow(len, params_[0] + 2.0);
        break;
      }
      case PotentialKind::attractive_well: {
        const double s2 = params_[1] * params_[1];
        scale = params_[0] / s2 * std::exp(-rr / (2.0 * s2));
        break;
      }
      case PotentialKind::piecewise_linear_gradient:
        scale = rr <= params_[0] * params_[0] ? params_[1] : params_[2];
        break;
    }
    for (std::size_t k = 0; k < r.size(); ++k) g[k] = scale * r[k];
  }

 private:
  PairPotential(PotentialKind kind, int d, SingularityClass cls, std::vector<double> params)
      : kind_(kind), dim_(d), class_(cls), params_(std::move(params)) {
    if (d < 1) throw DomainError("potential dimension must be >= 1");
  }

  void check_dimension(std::span<const double> r) const {
    if (static_cast<int>(r.size()) != dim_)
      throw DomainError("displacement has dimension " + std::to_string(r.size()) +
                        ", potential expects " + std::to_string(dim_));
  }

  static void check_singular(double len) {
    if (len < kCoincidenceThreshold)
      throw SingularityError("singular potential evaluated at a collision");
  }

  PotentialKind kind_;
  int dim_;
  SingularityClass class_;
  std::vector<double> params_;
};

inline double eval_potential(const PairPotential& p, std::span<const double> r) {
  return p.value(r);
}

inline std::vector<double> eval_pair_gradient(const PairPotential& p, std::span<const double> r) {
  std::vector<double> g(r.size());
  p.gradient(r, g);
  return g;
}

// ---------------------------------------------------------------------------
// Mollification

/// Radial polynomial bump rho(z) = c (1 - |z|^2)^k on the unit ball.
/// Quadrature rules over the ball are built lazily and shared by copies.
class MollifierKernel {
 public:
  static constexpr int kMaxRefinement = 3;

  struct Rule {
    std::vector<double> nodes;    // flattened, dimension d each
    std::vector<double> weights;  // quadrature weight times rho(node)
    double weight_sum = 0.0;
  };

  explicit MollifierKernel(int d, int exponent = 3) : dim_(d), exponent_(exponent) {
    if (d < 1) throw DomainError("kernel dimension must be >= 1");
    if (exponent < 1) throw DomainError("kernel exponent must be >= 1");
    // integral of (1-|z|^2)^k over the unit ball
    const double mass = std::pow(std::numbers::pi, 0.5 * d) * std::tgamma(exponent + 1.0) /
                        std::tgamma(0.5 * d + exponent + 1.0);
    normalization_ = 1.0 / mass;
    cache_ = std::make_shared<Cache>();
  }

  int dimension() const { return dim_; }
  int exponent() const { return exponent_; }
  double normalization() const { return normalization_; }

  double density(std::span<const double> z) const {
    const double s = 1.0 - detail::norm2(z);
    return s > 0.0 ? normalization_ * std::pow(s, exponent_) : 0.0;
  }

  /// E|z|^2 under rho.
  double second_moment() const { return 0.5 * dim_ / (0.5 * dim_ + exponent_ + 1.0); }

  /// Tensor Gauss-Legendre (8 points per axis) over [-1,1]^d split into
  /// 2^level cells per axis; nodes outside the ball are dropped.
  const Rule& rule(int level) const {
    if (level < 0 || level > kMaxRefinement) throw DomainError("quadrature level out of range");
    auto& slot = cache_->slots[static_cast<std::size_t>(level)];
    std::call_once(slot.once, [&] { slot.rule = build_rule(level); });
    return slot.rule;
  }

 private:
  struct Slot {
    std::once_flag once;
    Rule rule;
  };
  struct Cache {
    std::array<Slot, kMaxRefinement + 1> slots;
  };

  Rule build_rule(int level) const {
    using GL = boost::math::quadrature::gauss<double, 8>;
    std::vector<double> x1, w1;
    const int cells = 1 << level;
    const double h = 2.0 / cells;
    for (int c = 0; c < cells; ++c) {
      const double mid = -1.0 + (c + 0.5) * h;
      for (std::size_t i = 0; i < GL::abscissa().size(); ++i) {
        for (double sign : {-1.0, 1.0}) {
          x1.push_back(mid + sign * 0.5 * h * GL::abscissa()[i]);
          w1.push_back(0.5 * h * GL::weights()[i]);
        }
      }
    }
    Rule rule;
    const std::size_t m = x1.size();
    std::vector<std::size_t> idx(static_cast<std::size_t>(dim_), 0);
    std::vector<double> z(static_cast<std::size_t>(dim_));
    while (true) {
      double w = 1.0;
      for (int k = 0; k < dim_; ++k) {
        z[k] = x1[idx[k]];
        w *= w1[idx[k]];
      }
      const double rho = density(z);
      if (rho > 0.0) {
        rule.nodes.insert(rule.nodes.end(), z.begin(), z.end());
        rule.weights.push_back(w * rho);
        rule.weight_sum += w * rho;
      }
      int k = 0;
      while (k < dim_ && ++idx[k] == m) idx[k++] = 0;
      if (k == dim_) break;
    }
    return rule;
  }

  int dim_;
  int exponent_;
  double normalization_ = 1.0;
  std::shared_ptr<Cache> cache_;
};

/// alpha(x) = min(1, |x|/2). At the kink |x| = 2 the inner-side gradient is used.
struct ShrinkFunction {
  double operator()(std::span<const double> x) const { return std::min(1.0, 0.5 * detail::norm(x)); }

  void gradient(std::span<const double> x, std::span<double> g) const {
    const double len = detail::norm(x);
    const double s = (len > 0.0 && len <= 2.0) ? 0.5 / len : 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) g[k] = s * x[k];
  }
};

struct QuadratureSettings {
  double tolerance = 1e-8;  // on successive refinements, relative to max(1, |value|)
  int max_refinements = MollifierKernel::kMaxRefinement;
};

enum class GradientMethod { analytic, finite_difference };

/// Averaging radius 2^-level alpha(r).
inline double mollification_radius(const ShrinkFunction& alpha, int level, std::span<const double> r) {
  return std::ldexp(alpha(r), -level);
}

namespace detail {

inline void check_mollification_args(int field_dim, const MollifierKernel& kernel, int level,
                                     std::span<const double> r) {
  if (static_cast<int>(r.size()) != field_dim || kernel.dimension() != field_dim)
    throw DomainError("mollification: dimension mismatch");
  if (level < 1) throw DomainError("mollification level must be >= 1");
  if (norm(r) < kCoincidenceThreshold)
    throw SingularityError("mollification is undefined at the origin");
}

}  // namespace detail

template <ScalarField F>
double mollified_potential(const F& field, const MollifierKernel& kernel, const ShrinkFunction& alpha,
                           int level, std::span<const double> r, QuadratureSettings qs = {}) {
  detail::check_mollification_args(field.dimension(), kernel, level, r);
  const std::size_t d = r.size();
  const double eps = mollification_radius(alpha, level, r);
  std::vector<double> y(d);
  double previous = 0.0;
  for (int lvl = 0; lvl <= qs.max_refinements; ++lvl) {
    const auto& rule = kernel.rule(lvl);
    double acc = 0.0;
    for (std::size_t q = 0; q < rule.weights.size(); ++q) {
      for (std::size_t k = 0; k < d; ++k) y[k] = r[k] - eps * rule.nodes[q * d + k];
      acc += rule.weights[q] * field.value(y);
    }
    const double value = acc / rule.weight_sum;
    if (lvl > 0 && std::abs(value - previous) <= qs.tolerance * std::max(1.0, std::abs(value)))
      return value;
    previous = value;
  }
  throw QuadratureError("mollified_potential: no convergence within the refinement cap");
}

namespace detail {

// grad V_n(x) = E_rho[grad V(y)] - grad eps(x) * E_rho[grad V(y) . z], y = x - eps(x) z
template <ScalarField F>
void mollified_gradient_analytic(const F& field, const MollifierKernel& kernel,
                                 const ShrinkFunction& alpha, int level, std::span<const double> r,
                                 std::span<double> out, QuadratureSettings qs) {
  const std::size_t d = r.size();
  const double eps = mollification_radius(alpha, level, r);
  std::vector<double> deps(d), y(d), g(d), acc(d), previous(d);
  alpha.gradient(r, deps);
  for (auto& c : deps) c = std::ldexp(c, -level);
  for (int lvl = 0; lvl <= qs.max_refinements; ++lvl) {
    const auto& rule = kernel.rule(lvl);
    std::fill(acc.begin(), acc.end(), 0.0);
    double radial = 0.0;
    for (std::size_t q = 0; q < rule.weights.size(); ++q) {
      const double* z = &rule.nodes[q * d];
      for (std::size_t k = 0; k < d; ++k) y[k] = r[k] - eps * z[k];
      field.gradient(y, g);
      const double w = rule.weights[q];
      double gz = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        acc[k] += w * g[k];
        gz += g[k] * z[k];
      }
      radial += w * gz;
    }
    double change = 0.0, scale = 1.0;
    for (std::size_t k = 0; k < d; ++k) {
      out[k] = (acc[k] - deps[k] * radial) / rule.weight_sum;
      change = std::max(change, std::abs(out[k] - previous[k]));
      scale = std::max(scale, std::abs(out[k]));
    }
    if (lvl > 0 && change <= qs.tolerance * scale) return;
    std::copy(out.begin(), out.end(), previous.begin());
  }
  throw QuadratureError("mollified_gradient: no convergence within the refinement cap");
}

}  // namespace detail

/// Gradient of V_n. The finite-difference route uses central differences
/// with step 2^-level alpha(r) / 16.
template <ScalarField F>
void mollified_gradient(const F& field, const MollifierKernel& kernel, const ShrinkFunction& alpha,
                        int level, std::span<const double> r, std::span<double> out,
                        GradientMethod method = GradientMethod::analytic, QuadratureSettings qs = {}) {
  detail::check_mollification_args(field.dimension(), kernel, level, r);
  if (method == GradientMethod::analytic) {
    detail::mollified_gradient_analytic(field, kernel, alpha, level, r, out, qs);
    return;
  }
  const double h = mollification_radius(alpha, level, r) / 16.0;
  std::vector<double> probe(r.begin(), r.end());
  for (std::size_t k = 0; k < r.size(); ++k) {
    probe[k] = r[k] + h;
    const double up = mollified_potential(field, kernel, alpha, level, probe, qs);
    probe[k] = r[k] - h;
    const double down = mollified_potential(field, kernel, alpha, level, probe, qs);
    probe[k] = r[k];
    out[k] = (up - down) / (2.0 * h);
  }
}

template <ScalarField F>
std::vector<double> mollified_gradient(const F& field, const MollifierKernel& kernel,
                                       const ShrinkFunction& alpha, int level,
                                       std::span<const double> r,
                                       GradientMethod method = GradientMethod::analytic,
                                       QuadratureSettings qs = {}) {
  std::vector<double> out(r.size());
  mollified_gradient(field, kernel, alpha, level, r, std::span<double>(out), method, qs);
  return out;
}

struct Annulus {
  double inner;
  double outer;
};

struct MonteCarloEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Uniform point in {inner <= |x| <= outer} subset of R^d.
inline void sample_annulus(Rng& rng, const Annulus& a, std::span<double> x) {
  const int d = static_cast<int>(x.size());
  double len = 0.0;
  do {
    for (auto& c : x) c = rng.normal();
    len = detail::norm(x);
  } while (len == 0.0);
  const double lo = std::pow(a.inner, d), hi = std::pow(a.outer, d);
  const double radius = std::pow(lo + rng.uniform() * (hi - lo), 1.0 / d);
  for (auto& c : x) c *= radius / len;
}

/// Monte Carlo estimate of the L1 norm of grad V_n - grad V over an annulus,
/// with the exact gradient of `field` as reference. Points depend only on
/// (seed, samples), so runs at different levels share them.
template <ScalarField F>
MonteCarloEstimate gradient_l1_error(const F& field, const MollifierKernel& kernel,
                                     const ShrinkFunction& alpha, int level, const Annulus& annulus,
                                     int samples, std::uint64_t seed,
                                     GradientMethod method = GradientMethod::analytic,
                                     QuadratureSettings qs = {}) {
  if (!(annulus.inner > 0.0) || !(annulus.outer > annulus.inner))
    throw DomainError("gradient_l1_error: empty annulus");
  if (samples < 2) throw DomainError("gradient_l1_error: need at least two samples");
  const int d = field.dimension();
  const double volume = detail::unit_ball_volume(d) *
                        (std::pow(annulus.outer, d) - std::pow(annulus.inner, d));
  Rng rng(seed);
  std::vector<double> x(static_cast<std::size_t>(d)), gn(x.size()), g(x.size());
  double sum = 0.0, sum2 = 0.0;
  for (int s = 0; s < samples; ++s) {
    sample_annulus(rng, annulus, x);
    mollified_gradient(field, kernel, alpha, level, x, std::span<double>(gn), method, qs);
    field.gradient(x, g);
    double diff = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) diff += (gn[k] - g[k]) * (gn[k] - g[k]);
    diff = std::sqrt(diff);
    sum += diff;
    sum2 += diff * diff;
  }
  const double mean = sum / samples;
  const double var = std::max(0.0, (sum2 / samples - mean * mean) * samples / (samples - 1.0));
  return {volume * mean, volume * std::sqrt(var / samples)};
}

/// V_n as a pair interaction for the dynamics.
class MollifiedPotential {
 public:
  MollifiedPotential(PairPotential base, MollifierKernel kernel, int level,
                     QuadratureSettings qs = {}, ShrinkFunction alpha = {})
      : base_(std::move(base)), kernel_(std::move(kernel)), alpha_(alpha), level_(level), qs_(qs) {
    if (kernel_.dimension() != base_.dimension())
      throw DomainError("mollified potential: kernel and potential dimensions differ");
    if (level < 1) throw DomainError("mollification level must be >= 1");
  }

  const PairPotential& base() const { return base_; }
  const MollifierKernel& kernel() const { return kernel_; }
  int level() const { return level_; }
  int dimension() const { return base_.dimension(); }
  bool is_singular() const { return base_.is_singular(); }
  SingularityClass singularity_class() const { return base_.singularity_class(); }
  double lower_bound_constant() const { return base_.lower_bound_constant(); }

  std::string describe() const {
    return "mollified[level=" + std::to_string(level_) + ",kernel_exponent=" +
           std::to_string(kernel_.exponent()) + "](" + base_.describe() + ")";
  }

  double value(std::span<const double> r) const {
    if (detail::norm(r) < kCoincidenceThreshold)
      throw SingularityError("mollified potential evaluated at a collision");
    return mollified_potential(base_, kernel_, alpha_, level_, r, qs_);
  }

  void gradient(std::span<const double> r, std::span<double> g) const {
    if (detail::norm(r) < kCoincidenceThreshold)
      throw SingularityError("mollified potential evaluated at a collision");
    mollified_gradient(base_, kernel_, alpha_, level_, r, g, GradientMethod::analytic, qs_);
  }

 private:
  PairPotential base_;
  MollifierKernel kernel_;
  ShrinkFunction alpha_;
  int level_;
  QuadratureSettings qs_;
};

}  // namespace liouville
