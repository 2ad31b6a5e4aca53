#include <cmath>
#include <vector>

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <gtest/gtest.h>

#include "liouville/transport.hpp"

using namespace liouville;

namespace {

using Vec = std::vector<double>;

// Frozen values of the bump b(u) = exp(1 - 1/(1 - u^2)) from 30-digit quadrature.
constexpr double kBumpIntegral = 1.20690032243787617533;
constexpr double kBumpPrimitiveAtPoint2 = 0.80075119246922896224;  // int_{-1}^{0.2} b

InitialDatum centered_bump(std::size_t coords, double width, double amplitude = 1.0) {
  return InitialDatum::bump_datum(Vec(coords, 0.0), Vec(coords, width), amplitude);
}

struct FreeSetup {
  PairPotential p = PairPotential::free(1);
  PhaseBox box = PhaseBox::uniform(1, 2, -2.0, 2.0, -1.0, 1.0);
  PhaseBox region = PhaseBox::uniform(1, 2, -1.0, 1.0, -0.5, 0.5);
  IntegratorConfig icfg = [] {
    IntegratorConfig c;
    c.dt = 1e-2;
    return c;
  }();
  TimeGrid grid{1.0, 100};
};

}  // namespace

TEST(Bump, ProfileAndIntegral) {
  EXPECT_EQ(bump(0.0), 1.0);
  EXPECT_EQ(bump(1.0), 0.0);
  EXPECT_EQ(bump(-1.5), 0.0);
  EXPECT_NEAR(detail::bump_integral(), kBumpIntegral, 1e-13);
  boost::math::quadrature::tanh_sinh<double> ts;
  EXPECT_NEAR(ts.integrate([](double u) { return bump(u); }, -1.0, 1.0), kBumpIntegral, 1e-12);
  for (double u : {-0.9, -0.3, 0.1, 0.7}) {
    const double h = 1e-6;
    EXPECT_NEAR(bump(u) * bump_log_derivative(u), (bump(u + h) - bump(u - h)) / (2 * h), 1e-6);
  }
}

TEST(SmoothStep, PlateausAndBridge) {
  EXPECT_EQ(smooth_step(-3.0), 1.0);
  EXPECT_EQ(smooth_step(1.0), 1.0);
  EXPECT_EQ(smooth_step(2.0), 0.0);
  EXPECT_EQ(smooth_step(7.0), 0.0);
  EXPECT_NEAR(smooth_step(1.6), 1.0 - kBumpPrimitiveAtPoint2 / kBumpIntegral, 1e-13);
  EXPECT_NEAR(smooth_step(1.5), 0.5, 1e-14);
  double previous = 1.0;
  for (double s = 1.0; s <= 2.0; s += 1e-3) {
    const double v = smooth_step(s);
    ASSERT_LE(v, previous + 1e-15);
    previous = v;
    const double h = 1e-6;
    if (s > 1.0 + h && s < 2.0 - h) {
      ASSERT_NEAR(smooth_step_derivative(s), (smooth_step(s + h) - smooth_step(s - h)) / (2 * h), 1e-6);
    }
  }
}

TEST(PhaseBox, GeometryAndValidation) {
  const auto box = PhaseBox::uniform(1, 2, -2.0, 2.0, -1.0, 1.0);
  EXPECT_EQ(box.size(), 4u);
  EXPECT_DOUBLE_EQ(box.volume(), 64.0);
  EXPECT_TRUE(box.contains(Vec{0, 0, 0, 0}));
  EXPECT_FALSE(box.contains(Vec{0, 0, 0, 1.5}));
  EXPECT_TRUE(box.near_boundary(Vec{1.95, 0, 0, 0}, 0.02));
  EXPECT_FALSE(box.near_boundary(Vec{1.5, 0, 0, 0}, 0.02));
  EXPECT_THROW(PhaseBox::uniform(1, 2, 1.0, 1.0, -1.0, 1.0).validate(4), DomainError);
  EXPECT_THROW(box.validate(8), DomainError);
}

TEST(SampleEnsemble, SingleSampleOfConstant) {
  const auto box = PhaseBox::uniform(1, 2, 0.0, 1.0, 0.0, 1.0);
  const auto e = sample_ensemble(1, 2, box, 1, InitialDatum::constant_value(1.0), 5);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e.weights[0], 1.0);
  EXPECT_EQ(e.values[0], 1.0);
}

TEST(SampleEnsemble, DeterministicAndInsideBox) {
  const auto box = PhaseBox::uniform(2, 3, -3.0, 3.0, -1.0, 1.0);
  const auto f0 = centered_bump(12, 2.0);
  const auto a = sample_ensemble(2, 3, box, 500, f0, 77);
  const auto b = sample_ensemble(2, 3, box, 500, f0, 77);
  const auto c = sample_ensemble(2, 3, box, 500, f0, 78);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.phase, c.phase);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(box.contains(a.point(i)));
    total += a.weights[i];
  }
  EXPECT_NEAR(total, box.volume(), 1e-9 * box.volume());
}

TEST(SampleEnsemble, BumpMassWithinThreeSigma) {
  const auto box = PhaseBox::uniform(1, 2, -1.0, 1.0, -1.0, 1.0);
  const auto f0 = centered_bump(4, 1.0, 2.0);
  EXPECT_NEAR(f0.bump_mass(), 2.0 * std::pow(kBumpIntegral, 4), 1e-12);
  const std::size_t N = 200000;
  const auto e = sample_ensemble(1, 2, box, N, f0, 9);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double c = e.weights[i] * e.values[i];
    sum += c;
    sum2 += c * c;
  }
  const double n = static_cast<double>(N);
  const double sigma = std::sqrt(n * (sum2 / n - (sum / n) * (sum / n)));
  EXPECT_LT(std::abs(sum - f0.bump_mass()), 3.0 * sigma);
}

TEST(SampleEnsemble, RejectsBadInput) {
  const auto box = PhaseBox::uniform(1, 2, -1.0, 1.0, -1.0, 1.0);
  EXPECT_THROW(sample_ensemble(1, 2, box, 0, InitialDatum::constant_value(1.0), 1), DomainError);
  EXPECT_THROW(sample_ensemble(1, 2, PhaseBox::uniform(1, 2, 1.0, -1.0, -1.0, 1.0), 5,
                               InitialDatum::constant_value(1.0), 1),
               DomainError);
  EXPECT_THROW(sample_ensemble(1, 2, box, 5, centered_bump(3, 1.0), 1), DomainError);
}

TEST(InitialDatum, ShippedKinds) {
  InitialDatum ind;
  ind.kind = DatumKind::smoothed_indicator;
  ind.center = Vec(4, 0.0);
  ind.radius = 1.0;
  EXPECT_EQ(ind(Vec{0.5, 0, 0, 0}), 1.0);
  EXPECT_EQ(ind(Vec{2.5, 0, 0, 0}), 0.0);
  InitialDatum poly;
  poly.kind = DatumKind::clipped_polynomial;
  poly.center = Vec(4, 0.0);
  poly.offset = -1.0;
  poly.scale = 2.0;
  poly.cap = 1.5;
  EXPECT_DOUBLE_EQ(poly(Vec{0.5, 0, 0, 0}), -0.5);
  EXPECT_DOUBLE_EQ(poly(Vec{3.0, 0, 0, 0}), 1.5);
  EXPECT_THROW(InitialDatum::constant_value(1.0).bump_mass(), DomainError);
}

TEST(PushForward, ZeroTimeIsIdentity) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  const auto e = sample_ensemble(2, 2, box, 100, centered_bump(8, 1.0), 3);
  const auto out = push_forward(e, PairPotential::harmonic(2), 0.0, IntegratorConfig{});
  EXPECT_EQ(out, e);
}

TEST(PushForward, FreeTransport) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  const auto e = sample_ensemble(2, 2, box, 100, centered_bump(8, 1.0), 3);
  IntegratorConfig icfg;
  icfg.dt = 0.05;
  const auto out = push_forward(e, PairPotential::free(2), 1.5, icfg);
  EXPECT_EQ(out.values, e.values);
  EXPECT_EQ(out.weights, e.weights);
  EXPECT_EQ(out.time, 1.5);
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k) ASSERT_NEAR(out.point(i)[k], e.point(i)[k] + 1.5 * e.point(i)[4 + k], 1e-12);
}

TEST(PushForward, HarmonicPairRotation) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  auto e = sample_ensemble(2, 2, box, 50, InitialDatum::constant_value(1.0), 4);
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t k = 4; k < 8; ++k) e.point(i)[k] = 0.0;
  IntegratorConfig icfg;
  icfg.dt = 1e-3;
  const auto out = push_forward(e, PairPotential::harmonic(2), 1.0, icfg, Parallelism{2});
  const double factor = std::cos(std::sqrt(2.0));
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      const double r0 = e.point(i)[2 + k] - e.point(i)[k];
      const double r1 = out.point(i)[2 + k] - out.point(i)[k];
      ASSERT_NEAR(r1, r0 * factor, 1e-6);
    }
}

TEST(PushForward, ThreadCountDoesNotChangeResult) {
  const auto box = PhaseBox::uniform(2, 3, -1.0, 1.0, -1.0, 1.0);
  const auto e = sample_ensemble(2, 3, box, 64, centered_bump(12, 1.0), 8);
  const auto p = PairPotential::attractive_well(2, 1.0, 0.5);
  IntegratorConfig icfg;
  icfg.dt = 1e-2;
  EXPECT_EQ(push_forward(e, p, 0.5, icfg, Parallelism{1}), push_forward(e, p, 0.5, icfg, Parallelism{3}));
}

TEST(PushForward, FailedSamplesAreFlagged) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  const auto e = sample_ensemble(2, 2, box, 20, InitialDatum::constant_value(1.0), 8);
  IntegratorConfig icfg;
  icfg.dt = 1e-2;
  icfg.max_substeps = 5;
  const auto out = push_forward(e, PairPotential::harmonic(2), 1.0, icfg);
  EXPECT_EQ(out.flagged(), e.size());
  EXPECT_EQ(out.values, e.values);
}

TEST(Truncate, Examples) {
  EXPECT_EQ(truncate({2.0}, 3.0), 2.0);
  EXPECT_EQ(truncate({2.0}, -5.0), -2.0);
  EXPECT_EQ(truncate({2.0}, 1.0), 1.0);
}

TEST(Truncate, LadderAndLipschitz) {
  Rng rng(21);
  for (int s = 0; s < 10000; ++s) {
    const double x = rng.uniform(-10.0, 10.0), y = rng.uniform(-10.0, 10.0);
    const double m = rng.uniform(0.1, 5.0), p = m + rng.uniform(0.0, 5.0);
    ASSERT_EQ(truncate({m}, truncate({p}, x)), truncate({m}, x));
    ASSERT_EQ(truncate({p}, truncate({m}, x)), truncate({m}, x));
    ASSERT_LE(std::abs(truncate({m}, x) - truncate({m}, y)), std::abs(x - y));
  }
}

TEST(Beta, ShippedFamilyIsBoundedC1) {
  for (const auto& beta : shipped_betas(0.5)) {
    EXPECT_EQ(beta(0.0), 0.0) << beta.name();
    double previous_slope = std::numeric_limits<double>::quiet_NaN();
    for (double x = -5.0; x <= 5.0; x += 1e-3) {
      const double h = 1e-7;
      const double slope = (beta(x + h) - beta(x - h)) / (2 * h);
      ASSERT_LE(std::abs(slope), 1.0 + 1e-6) << beta.name();
      ASSERT_LE(std::abs(beta(x)), std::max(0.5, std::numbers::pi / 2)) << beta.name();
      if (!std::isnan(previous_slope)) {
        ASSERT_LT(std::abs(slope - previous_slope), 0.2) << beta.name() << " x=" << x;
      }
      previous_slope = slope;
    }
  }
}

TEST(Beta, SmoothedClampMatchesClampAwayFromCorners) {
  const auto beta = Beta::smoothed_clamp(2.0);
  EXPECT_EQ(beta(1.5), 1.5);
  EXPECT_EQ(beta(-3.0), -2.0);
  EXPECT_EQ(beta(2.5), 2.0);
  Rng rng(22);
  for (int s = 0; s < 1000; ++s) {
    const double x = rng.uniform(-5.0, 5.0);
    ASSERT_LE(std::abs(beta(x) - truncate({2.0}, x)), 2.0 / 100.0);
  }
}

TEST(TestFunction, CompactSupport) {
  Rng rng(23);
  const TestFunction phi(Vec{0.1, -0.2, 0.3, 0.0}, Vec{0.5, 0.4, 0.3, 0.6}, -1.0, 1.0);
  const auto supp = phi.support();
  for (int s = 0; s < 10000; ++s) {
    Vec y(4);
    for (auto& c : y) c = rng.uniform(-2.0, 2.0);
    const double t = rng.uniform(-1.5, 1.5);
    if (!supp.contains(y) || std::abs(t) >= 1.0) {
      ASSERT_EQ(phi(t, y), 0.0);
    }
  }
  EXPECT_EQ(phi(0.0, Vec{0.6, -0.2, 0.3, 0.0}), 0.0);
}

TEST(TestFunction, JetMatchesFiniteDifferences) {
  Rng rng(24);
  const TestFunction phi(Vec{0.1, -0.2, 0.3, 0.0}, Vec{0.5, 0.4, 0.3, 0.6}, -1.0, 1.0);
  int checked = 0;
  while (checked < 100) {
    Vec y(4);
    for (std::size_t k = 0; k < 4; ++k) y[k] = phi.center()[k] + 0.8 * phi.width()[k] * rng.uniform(-1.0, 1.0);
    const double t = rng.uniform(-0.8, 0.8);
    double value, dt;
    Vec grad(4);
    ASSERT_TRUE(phi.jet(t, y, value, dt, grad));
    ++checked;
    const double h = 1e-6;
    EXPECT_NEAR(value, phi(t, y), 1e-15);
    EXPECT_NEAR(dt, (phi(t + h, y) - phi(t - h, y)) / (2 * h), 1e-6);
    for (std::size_t k = 0; k < 4; ++k) {
      auto up = y, down = y;
      up[k] += h;
      down[k] -= h;
      EXPECT_NEAR(grad[k], (phi(t, up) - phi(t, down)) / (2 * h), 1e-6);
    }
  }
}

TEST(TestFunction, SpaceIntegralMatchesQuadrature) {
  const auto phi = TestFunction::space_only(Vec{0.0, 1.0}, Vec{0.5, 2.0});
  boost::math::quadrature::tanh_sinh<double> ts;
  const double ix = ts.integrate([&](double x) { return bump((x - 0.0) / 0.5); }, -0.5, 0.5);
  const double iy = ts.integrate([&](double y) { return bump((y - 1.0) / 2.0); }, -1.0, 3.0);
  EXPECT_NEAR(phi.space_integral(), ix * iy, 1e-12);
  EXPECT_FALSE(phi.timed());
  EXPECT_THROW(TestFunction(Vec{0.0}, Vec{0.0}, 0.0, 1.0), DomainError);
  EXPECT_THROW(TestFunction(Vec{0.0}, Vec{1.0}, 1.0, 1.0), DomainError);
}

TEST(TestFunction, FamilyStaysInsideRegion) {
  const auto region = PhaseBox::uniform(2, 2, -1.0, 1.0, -0.5, 0.5);
  const auto a = test_function_family(region, 10, 3, -1.0, 1.0);
  const auto b = test_function_family(region, 10, 3, -1.0, 1.0);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t j = 0; j < a.size(); ++j) {
    const auto supp = a[j].support();
    for (std::size_t k = 0; k < region.size(); ++k) {
      EXPECT_GE(supp.lower[k], region.lower[k]);
      EXPECT_LE(supp.upper[k], region.upper[k]);
      EXPECT_EQ(a[j].center()[k], b[j].center()[k]);
    }
  }
}

TEST(WeakResidual, FreeTransportExactSolution) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 20000, centered_bump(4, 1.5), 31);
  const auto phis = test_function_family(s.region, 10, 32, -1.0, 1.0);
  const auto ci = characteristic_integrals(e, s.p, s.icfg, s.grid, phis);
  for (std::size_t j = 0; j < phis.size(); ++j) {
    const auto r = weak_residual(e, ci, j, e.values, e.values);
    EXPECT_LT(r.defect(), 3.0 * r.std_error + r.bias_bound()) << "phi " << j;
    EXPECT_EQ(r.flagged, 0u);
    EXPECT_EQ(r.samples, e.size());
  }
}

TEST(WeakResidual, CorruptedSolutionIsDetected) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 100000, centered_bump(4, 1.5), 33);
  // supports spanning most of the box so that many samples see them
  const auto wide = PhaseBox::uniform(1, 2, -1.8, 1.8, -0.9, 0.9);
  const auto phis = test_function_family(wide, 5, 34, -1.0, 1.0);
  const auto ci = characteristic_integrals(e, s.p, s.icfg, s.grid, phis);
  auto corrupted = e.values;
  for (std::size_t i = 0; i < corrupted.size(); i += 2) corrupted[i] += 0.1;
  for (std::size_t j = 0; j < phis.size(); ++j) {
    const auto r = weak_residual(e, ci, j, e.values, corrupted);
    EXPECT_GT(r.defect(), 5.0 * r.std_error + r.bias_bound()) << "phi " << j;
    EXPECT_FALSE(r.passes());
  }
}

TEST(WeakResidual, HarmonicPairComputedSolution) {
  const auto p = PairPotential::harmonic(1);
  const auto box = PhaseBox::uniform(1, 2, -2.0, 2.0, -1.0, 1.0);
  const auto region = PhaseBox::uniform(1, 2, -1.0, 1.0, -0.5, 0.5);
  const auto e = sample_ensemble(1, 2, box, 5000, centered_bump(4, 1.5), 35);
  const auto phis = test_function_family(region, 5, 36, -1.0, 1.0);
  IntegratorConfig icfg;
  icfg.dt = 1e-2;
  const TimeGrid grid{1.0, 100};
  const auto ci = characteristic_integrals(e, p, icfg, grid, phis);
  const auto ci_half = characteristic_integrals(e, p, icfg.halved(), grid, phis);
  for (std::size_t j = 0; j < phis.size(); ++j) {
    const auto r = weak_residual(e, ci, j, e.values, e.values, &ci_half);
    EXPECT_TRUE(r.passes()) << "phi " << j << " est " << r.estimate << " sd " << r.std_error;
    EXPECT_GT(r.integrator_bias, 0.0);
  }
}

TEST(WeakResidual, ConvenienceOverloadAgrees) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 2000, centered_bump(4, 1.5), 37);
  const auto phis = test_function_family(s.region, 1, 38, -1.0, 1.0);
  const auto ci = characteristic_integrals(e, s.p, s.icfg, s.grid, phis);
  const SolutionSeries<PairPotential> series{&e, &s.p, s.icfg, s.grid};
  EXPECT_EQ(weak_residual(series, phis[0]).estimate, weak_residual(e, ci, 0, e.values, e.values).estimate);
}

TEST(WeakResidual, CoverageAndAdmissibility) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 2000, InitialDatum::constant_value(1.0), 39);
  const std::vector<TestFunction> edge{TestFunction(Vec{1.8, 0.0, 0.0, 0.0}, Vec{0.5, 0.5, 0.5, 0.5}, -1.0, 1.0)};
  const auto ci = characteristic_integrals(e, s.p, s.icfg, s.grid, edge);
  EXPECT_THROW(weak_residual(e, ci, 0, e.values, e.values), CoverageError);

  const std::vector<TestFunction> late{TestFunction(Vec(4, 0.0), Vec(4, 0.5), -1.0, 2.0)};
  EXPECT_THROW(characteristic_integrals(e, s.p, s.icfg, s.grid, late), CoverageError);

  const auto coulomb = PairPotential::repulsive_power(1, 1.0, 1.0, SingularityClass::confining_at_zero);
  const std::vector<TestFunction> centered{TestFunction(Vec(4, 0.0), Vec(4, 0.5), -1.0, 1.0)};
  EXPECT_THROW(characteristic_integrals(e, coulomb, s.icfg, s.grid, centered), DomainError);
  ResidualOptions off;
  off.mode = ResidualMode::off_collision_set;
  off.collision_margin = 0.1;
  EXPECT_THROW(characteristic_integrals(e, s.p, s.icfg, s.grid, centered, off), DomainError);
}

TEST(RenormalizedResidual, HugeClampEqualsWeakResidual) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 3000, centered_bump(4, 1.5), 41);
  const auto phis = test_function_family(s.region, 2, 42, -1.0, 1.0);
  const auto ci = characteristic_integrals(e, s.p, s.icfg, s.grid, phis);
  for (std::size_t j = 0; j < phis.size(); ++j) {
    const auto a = weak_residual(e, ci, j, e.values, e.values);
    const auto b = renormalized_residual(Beta::smoothed_clamp(1e6), e, ci, j, e.values, e.values);
    EXPECT_EQ(a.estimate, b.estimate);
    EXPECT_EQ(a.std_error, b.std_error);
  }
}

TEST(RenormalizedResidual, ShippedBetasOnFreeAndHarmonic) {
  FreeSetup s;
  const auto e = sample_ensemble(1, 2, s.box, 5000, centered_bump(4, 1.5, 2.0), 43);
  const auto phis = test_function_family(s.region, 3, 44, -1.0, 1.0);
  for (const PairPotential& p : {s.p, PairPotential::harmonic(1)}) {
    const auto ci = characteristic_integrals(e, p, s.icfg, s.grid, phis);
    const auto ci_half = characteristic_integrals(e, p, s.icfg.halved(), s.grid, phis);
    for (const auto& beta : shipped_betas(0.5))
      for (std::size_t j = 0; j < phis.size(); ++j)
        EXPECT_TRUE(renormalized_residual(beta, e, ci, j, e.values, e.values, &ci_half).passes())
            << p.describe() << ' ' << beta.name();
  }
}

TEST(CombineSolutions, AlgebraAndAlignment) {
  const auto box = PhaseBox::uniform(1, 2, -1.0, 1.0, -1.0, 1.0);
  const auto f = sample_ensemble(1, 2, box, 500, centered_bump(4, 0.8), 45);
  auto zero = f;
  std::fill(zero.values.begin(), zero.values.end(), 0.0);
  EXPECT_EQ(combine_solutions(Combiner{CombineKind::sum}, f, zero).values, f.values);
  auto g = f;
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = std::sin(static_cast<double>(i));
  const auto prod = combine_solutions(Combiner{CombineKind::product}, f, g);
  const auto polar = combine_solutions(Combiner{CombineKind::polarized_product}, f, g);
  for (std::size_t i = 0; i < f.size(); ++i) ASSERT_NEAR(prod.values[i], polar.values[i], 1e-12);
  const auto other = sample_ensemble(1, 2, box, 500, centered_bump(4, 0.8), 46);
  EXPECT_THROW(combine_solutions(Combiner{CombineKind::sum}, f, other), AlignmentError);
}

TEST(CombineSolutions, ProductOfFreeSolutionsIsASolution) {
  FreeSetup s;
  const auto f = sample_ensemble(1, 2, s.box, 5000, centered_bump(4, 1.5), 47);
  auto g = f;
  InitialDatum ind;
  ind.kind = DatumKind::smoothed_indicator;
  ind.center = Vec(4, 0.0);
  ind.radius = 0.8;
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = ind(g.point(i));
  const auto fg = combine_solutions(Combiner{CombineKind::product}, f, g);
  const auto phis = test_function_family(s.region, 3, 48, -1.0, 1.0);
  const auto ci = characteristic_integrals(fg, s.p, s.icfg, s.grid, phis);
  for (std::size_t j = 0; j < phis.size(); ++j) EXPECT_TRUE(weak_residual(fg, ci, j, fg.values, fg.values).passes());
}

TEST(CollisionBoundaryTerm, ZeroWhenNoPairIsClose) {
  const auto box = PhaseBox::uniform(1, 2, -1.0, 1.0, -1.0, 1.0);
  auto e = sample_ensemble(1, 2, box, 100, InitialDatum::constant_value(1.0), 49);
  for (std::size_t i = 0; i < e.size(); ++i) {
    e.point(i)[0] = -1.0;
    e.point(i)[1] = 1.0;
  }
  const auto psi = TestFunction::space_only(Vec(4, 0.0), Vec(4, 2.0));
  const auto r = collision_boundary_term(e, psi, 0.5);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_THROW(collision_boundary_term(e, psi, 0.0), DomainError);
}

TEST(CollisionBoundaryTerm, ShellScalingMatchesDimension) {
  for (auto [d, mu] : {std::pair{2, 0.1}, std::pair{3, 0.2}}) {
    const auto box = PhaseBox::uniform(d, 2, -1.0, 1.0, -1.0, 1.0);
    const auto m = static_cast<std::size_t>(4 * d);
    const auto e = sample_ensemble(d, 2, box, 1000000, InitialDatum::constant_value(1.0), 50 + d);
    const auto psi = TestFunction::space_only(Vec(m, 0.0), Vec(m, 1.0));
    const auto big = collision_boundary_term(e, psi, mu);
    const auto small = collision_boundary_term(e, psi, mu / 2);
    const double ratio = small.value / big.value;
    const double sigma =
        ratio * std::hypot(small.std_error / small.value, big.std_error / big.value);
    EXPECT_NEAR(ratio, std::pow(2.0, -(d - 1)), 3.0 * sigma) << "d=" << d;
  }
}

TEST(EnergyCutoff, Examples) {
  const auto p = PairPotential::harmonic(2);
  const EnergyCutoff cut{10.0, 1.0, 1.0, 2};
  EXPECT_EQ(energy_cutoff(cut, 0.5, Configuration(2, 2), p), 1.0);
  Configuration hot(2, 2);
  hot.v(0)[0] = std::sqrt(6.0) * 10.0;  // E = 3 R^2
  EXPECT_EQ(energy_cutoff(cut, 0.5, hot, p), 0.0);
  Configuration far(2, 2);
  far.x(0)[0] = 1e4;
  far.x(1)[0] = 1e4;
  EXPECT_EQ(energy_cutoff(cut, 0.5, far, p), 0.0);
  EXPECT_THROW(energy_cutoff(cut, 1.5, far, p), DomainError);
  EXPECT_THROW(energy_cutoff(EnergyCutoff{-1.0, 1.0, 1.0, 2}, 0.5, far, p), DomainError);
}

TEST(EnergyCutoff, RangeAndSupport) {
  Rng rng(55);
  const auto p = PairPotential::attractive_well(2, 1.0, 1.0);
  const EnergyCutoff cut{2.0, 1.0, 0.5, 3};
  for (int s = 0; s < 10000; ++s) {
    Configuration c(2, 3);
    for (auto& y : c.positions()) y = rng.uniform(-6.0, 6.0);
    for (auto& y : c.velocities()) y = rng.uniform(-3.0, 3.0);
    const double t = rng.uniform(0.0, 1.0);
    const double v = energy_cutoff(cut, t, c, p);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    if (v == 0.0) {
      double xx = 0.0;
      for (double y : c.positions()) xx += y * y;
      const bool hot = energy(c, p) >= 2.0 * cut.R * cut.R;
      const bool far = std::sqrt(1.0 + xx) >= cut.spatial_radius(t) + 4.0;
      ASSERT_TRUE(hot || far);
    }
  }
}

TEST(BackwardValues, FreeFlowCharacteristics) {
  const auto box = PhaseBox::uniform(1, 2, -1.0, 1.0, -1.0, 1.0);
  auto pts = sample_ensemble(1, 2, box, 200, InitialDatum::constant_value(1.0), 56);
  const auto f0 = centered_bump(4, 1.2);
  const Vec times{0.0, 0.25, 0.5};
  IntegratorConfig icfg;
  icfg.dt = 0.05;
  const auto vals = backward_values(pts, PairPotential::free(1), f0, times, icfg);
  for (std::size_t k = 0; k < times.size(); ++k)
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto y = pts.point(i);
      const Vec back{y[0] - times[k] * y[2], y[1] - times[k] * y[3], y[2], y[3]};
      ASSERT_NEAR(vals[k][i], f0(back), 1e-12);
    }
  EXPECT_THROW(backward_values(pts, PairPotential::free(1), f0, Vec{0.5, 0.25}, icfg), DomainError);
}

TEST(UniquenessFunctional, EqualSolutionsGiveZero) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  auto pts = sample_ensemble(2, 2, box, 300, InitialDatum::constant_value(1.0), 57);
  const auto p = PairPotential::harmonic(2);
  const auto f0 = centered_bump(8, 1.5);
  const Vec times{0.0, 0.2, 0.4};
  IntegratorConfig icfg;
  icfg.dt = 1e-2;
  const auto f = backward_values(pts, p, f0, times, icfg);
  const auto g = backward_values(pts, p, f0, times, icfg);
  std::vector<std::vector<double>> h(times.size(), Vec(pts.size()));
  for (std::size_t k = 0; k < times.size(); ++k)
    for (std::size_t i = 0; i < pts.size(); ++i) h[k][i] = std::pow(f[k][i] - g[k][i], 2);
  const EnergyCutoff cut{3.0, 1.0, 1.0, 2};
  for (const auto& fp : uniqueness_functional(pts, std::span<const std::vector<double>>(h), cut, p, times))
    EXPECT_EQ(fp.value, 0.0);
}

TEST(UniquenessFunctional, DifferentDataStartPositive) {
  const auto box = PhaseBox::uniform(2, 2, -1.0, 1.0, -1.0, 1.0);
  auto pts = sample_ensemble(2, 2, box, 300, InitialDatum::constant_value(1.0), 58);
  const auto p = PairPotential::harmonic(2);
  const Vec times{0.0, 0.2};
  IntegratorConfig icfg;
  icfg.dt = 1e-2;
  const auto f = backward_values(pts, p, centered_bump(8, 1.5), times, icfg);
  const auto g = backward_values(pts, p, centered_bump(8, 1.5, 0.5), times, icfg);
  std::vector<std::vector<double>> h(times.size(), Vec(pts.size()));
  for (std::size_t k = 0; k < times.size(); ++k)
    for (std::size_t i = 0; i < pts.size(); ++i) h[k][i] = std::pow(f[k][i] - g[k][i], 2);
  const EnergyCutoff cut{3.0, 1.0, 1.0, 2};
  const auto series = uniqueness_functional(pts, std::span<const std::vector<double>>(h), cut, p, times);
  EXPECT_GT(series[0].value, 3.0 * series[0].std_error);
  EXPECT_GT(series[1].increment_std_error, 0.0);
}
