#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mvlab/mvsde.hpp"

using namespace mvlab;

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

VectorEnsemble constant_ensemble(std::size_t n, std::size_t d, double x0) {
  VectorEnsemble e(n, d);
  for (auto& v : e.values()) v = x0;
  return e;
}

}  // namespace

TEST(Cutoff, IdentityInsideTheBall) {
  std::mt19937_64 gen(71);
  std::normal_distribution<double> g;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> x(3);
    for (auto& v : x) v = g(gen);
    const double level = norm(x) * 1.0001 + 1e-9;
    EXPECT_EQ(cutoff_psi(x, level), x);
  }
}

TEST(Cutoff, RadialProjectionOutside) {
  const std::vector<double> x{3.0, 4.0};
  const auto y = cutoff_psi(x, 2.5);
  EXPECT_NEAR(y[0], 1.5, 1e-15);
  EXPECT_NEAR(y[1], 2.0, 1e-15);
  EXPECT_THROW(cutoff_psi(x, 0.0), ConfigError);
  EXPECT_THROW(cutoff_psi(x, -1.0), ConfigError);
}

TEST(Cutoff, TwoLipschitz) {
  std::mt19937_64 gen(73);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int i = 0; i < 20000; ++i) {
    std::vector<double> x(2), y(2);
    for (auto& v : x) v = g(gen);
    for (auto& v : y) v = g(gen);
    const auto px = cutoff_psi(x, 2.0), py = cutoff_psi(y, 2.0);
    const double lhs = std::hypot(px[0] - py[0], px[1] - py[1]);
    EXPECT_LE(lhs, 2.0 * std::hypot(x[0] - y[0], x[1] - y[1]) + 1e-15);
    EXPECT_LE(norm(px), 2.0 * (1.0 + 1e-15));
  }
}

TEST(Cutoff, ImageMeasureSecondMomentBound) {
  std::mt19937_64 gen(79);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int i = 0; i < 200; ++i) {
    VectorEnsemble e(10, 3);
    for (auto& v : e.values()) v = g(gen);
    const double level = 0.5 + i * 0.02;
    const EmpiricalMeasure before(e), after(pushforward_truncate(e, level));
    EXPECT_LE(after.second_moment(), std::min(before.second_moment(), level * level) * (1.0 + 1e-15));
  }
}

TEST(EmpiricalMeasureTest, MeanAndSecondMoment) {
  VectorEnsemble e(2, 2);
  e[0][0] = 1.0;
  e[0][1] = 2.0;
  e[1][0] = 3.0;
  e[1][1] = -2.0;
  const EmpiricalMeasure mu(e);
  EXPECT_EQ(mu.mean()[0], 2.0);
  EXPECT_EQ(mu.mean()[1], 0.0);
  EXPECT_EQ(mu.second_moment(), 9.0);
  EXPECT_THROW(EmpiricalMeasure(VectorEnsemble(0, 2)), DimensionError);
}

TEST(StepCount, RequiresAnIntegerNumberOfSteps) {
  EXPECT_EQ(step_count(1.0, 0.01), 100u);
  EXPECT_EQ(step_count(1.0, 1e-3), 1000u);
  EXPECT_THROW(step_count(1.0, 0.3), ConfigError);
  EXPECT_THROW(step_count(0.0, 0.1), ConfigError);
  EXPECT_THROW(step_count(1.0, -0.1), ConfigError);
}

TEST(Increments, PureFunctionOfKeyStepAndComponent) {
  const std::vector<std::uint64_t> keys{derive_seed(5, 0), derive_seed(5, 1), derive_seed(5, 2)};
  const auto a = gaussian_increments(keys, 3, 7, 0.01);
  const auto b = gaussian_increments(keys, 3, 7, 0.01);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  const std::vector<std::uint64_t> tail{keys[2]};
  const auto c = gaussian_increments(tail, 3, 7, 0.01);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(c[0][k], a[2][k]);
  const auto d = gaussian_increments(keys, 3, 8, 0.01);
  EXPECT_NE(d[0][0], a[0][0]);
}

TEST(Increments, HaveVarianceDt) {
  std::vector<std::uint64_t> keys(20000);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = derive_seed(11, i);
  const double dt = 0.04;
  const auto inc = gaussian_increments(keys, 2, 0, dt);
  double m = 0.0, v = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < inc.size(); ++i) {
    m += inc[i][0];
    v += inc[i][0] * inc[i][0];
    cross += inc[i][0] * inc[i][1];
  }
  const double n = static_cast<double>(inc.size());
  EXPECT_NEAR(m / n, 0.0, 4.0 * std::sqrt(dt / n));
  EXPECT_NEAR(v / n, dt, 4.0 * dt * std::sqrt(2.0 / n));
  EXPECT_NEAR(cross / n, 0.0, 4.0 * dt / std::sqrt(n));
}

TEST(EulerMaruyama, DeterministicLinearStep) {
  const auto model = mean_field_ou(-1.0, 0.5, 0.0);
  VectorEnsemble e(2, 1);
  e[0][0] = 1.0;
  e[1][0] = 3.0;
  const VectorEnsemble zero(2, 1);
  const auto next = em_step(e, model, 0.0, 0.1, zero);
  // x + dt (-x + 0.5 * 2)
  EXPECT_DOUBLE_EQ(next[0][0], 1.0);
  EXPECT_DOUBLE_EQ(next[1][0], 3.0 + 0.1 * (-3.0 + 1.0));
}

TEST(EulerMaruyama, RejectsShapeErrors) {
  const auto model = mean_field_ou(-1.0, 0.5, 1.0, 2);
  EXPECT_THROW(em_step(VectorEnsemble(3, 1), model, 0.0, 0.1, VectorEnsemble(3, 1)), DimensionError);
  EXPECT_THROW(em_step(VectorEnsemble(3, 2), model, 0.0, 0.1, VectorEnsemble(2, 2)), DimensionError);
  EXPECT_THROW(em_step(VectorEnsemble(3, 2), model, 0.0, 0.0, VectorEnsemble(3, 2)), ConfigError);
}

TEST(EulerMaruyama, NonFiniteStateRaisesBlowUp) {
  auto model = mean_field_ou(-1.0, 0.0, 0.0);
  model.drift = [](double, std::span<const double> x, const EmpiricalMeasure&, std::span<double> out) {
    out[0] = x[0] > 1.5 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  VectorEnsemble e(3, 1);
  e[2][0] = 2.0;
  try {
    em_step(e, model, 0.25, 0.1, VectorEnsemble(3, 1));
    FAIL() << "expected blow-up";
  } catch (const BlowUpError& err) {
    EXPECT_EQ(err.particle(), 2u);
    EXPECT_EQ(err.time(), 0.25);
    EXPECT_EQ(err.pre_step_energy(), 4.0);
  }
}

TEST(Truncated, AgreesWithTheBaseModelInsideTheBall) {
  const auto base = cubic_confining_model(2);
  const TruncatedModel trunc{base, 10.0};
  VectorEnsemble e(3, 2);
  e[0][0] = 0.5;
  e[1][1] = -1.0;
  e[2][0] = 2.0;
  std::vector<double> a(2), b(2);
  const EmpiricalMeasure mu(e);
  base.drift(0.0, e[2], mu, a);
  trunc.drift(0.0, e[2], e, b);
  EXPECT_EQ(a, b);
}

TEST(Truncated, SeesOnlyTheClippedState) {
  const auto base = cubic_confining_model(1);
  const TruncatedModel trunc{base, 1.0};
  VectorEnsemble e(1, 1);
  e[0][0] = 5.0;
  std::vector<double> out(1), diff(1);
  trunc.drift(0.0, e[0], e, out);
  // psi(5) = 1, truncated measure has mean 1: -1 + 1.
  EXPECT_EQ(out[0], 0.0);
  trunc.diffusion(0.0, e[0], e, diff);
  EXPECT_EQ(diff[0], 2.0);
}

TEST(Simulate, OuMeanAndVarianceMatchClosedForm) {
  const auto model = mean_field_ou(-1.0, 0.5, 1.0);
  MvsdeRunOptions opt;
  opt.horizon = 1.0;
  opt.dt = 1e-3;
  opt.save_stride = 1000;
  opt.master_seed = 99;
  const std::size_t n = 4000;
  const auto path = simulate_mvsde(model, constant_ensemble(n, 1, 1.0), opt);
  ASSERT_EQ(path.frames.size(), 2u);
  const auto& last = path.frames.back();
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < n; ++i) m += last[i][0];
  m /= n;
  for (std::size_t i = 0; i < n; ++i) v += std::pow(last[i][0] - m, 2);
  v /= n - 1;
  const double var = (1.0 - std::exp(-2.0)) / 2.0;
  EXPECT_NEAR(m, std::exp(-0.5), 3.0 * std::sqrt(var / n));
  EXPECT_NEAR(v, var, 3.0 * var * std::sqrt(2.0 / (n - 1)));
}

TEST(Simulate, ThreadCountDoesNotChangeTheResult) {
  const auto model = mean_field_ou(-1.0, 0.5, 1.0, 3);
  MvsdeRunOptions opt;
  opt.horizon = 0.2;
  opt.dt = 0.01;
  opt.save_stride = 5;
  opt.master_seed = 3;
  const auto a = simulate_mvsde(model, constant_ensemble(50, 3, 0.5), opt);
  opt.threads = 4;
  const auto b = simulate_mvsde(model, constant_ensemble(50, 3, 0.5), opt);
  ASSERT_EQ(a.frames.size(), 5u);
  EXPECT_EQ(a.times, b.times);
  for (std::size_t f = 0; f < a.frames.size(); ++f)
    EXPECT_TRUE(std::equal(a.frames[f].values().begin(), a.frames[f].values().end(), b.frames[f].values().begin()));
}

TEST(Simulate, LabelsSelectNoiseStreams) {
  const auto model = mean_field_ou(0.0, 0.0, 1.0);
  MvsdeRunOptions opt;
  opt.horizon = 0.1;
  opt.dt = 0.01;
  opt.master_seed = 8;
  opt.labels = {4, 9};
  const auto a = simulate_mvsde(model, constant_ensemble(2, 1, 0.0), opt);
  opt.labels = {9};
  const auto b = simulate_mvsde(model, constant_ensemble(1, 1, 0.0), opt);
  EXPECT_EQ(a.frames.back()[1][0], b.frames.back()[0][0]);
  opt.labels = {1, 2, 3};
  EXPECT_THROW(simulate_mvsde(model, constant_ensemble(2, 1, 0.0), opt), DimensionError);
}

TEST(Moments, HandComputedPath) {
  PathEnsemble<VectorEnsemble> p;
  VectorEnsemble a(2, 1), b(2, 1);
  a[0][0] = 1.0;
  a[1][0] = 3.0;
  b[0][0] = 2.0;
  b[1][0] = 2.0;
  p.push(0.0, a);
  p.push(0.5, b);
  const auto r = moment_monitor(p, 2.0);
  EXPECT_EQ(r.sup_moment, 5.0);
  // integrand |X|^0 |X|^2 averaged: 5 and 4; trapezoid over dt = 0.5.
  EXPECT_DOUBLE_EQ(r.dissipation_integral, 0.25 * 9.0);
  EXPECT_DOUBLE_EQ(moment_monitor(p, 4.0).sup_moment, 41.0);
  EXPECT_THROW(moment_monitor(p, 1.0), ConfigError);
  EXPECT_THROW(moment_monitor(PathEnsemble<VectorEnsemble>{}, 2.0), DimensionError);
}
