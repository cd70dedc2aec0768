#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "mvlab/conditions.hpp"

using namespace mvlab;
using testing_helpers::grid1;
using testing_helpers::grid2;

namespace {

SpdeModelSpec shipped_nse(int modes = 12) {
  SpdeModelSpec s;
  s.grid = grid2(modes);
  s.kernel = InteractionKernel{KernelKind::stokes_drag, 1.0, 0.5, 10.0};
  s.noise.modes = 4;
  s.noise.amplitude = 1.0;
  return s;
}

AuditSampler sampler(std::uint64_t seed = 1) {
  AuditSampler s;
  s.seed = seed;
  s.max_mode = 6;
  s.measure_size = 3;
  return s;
}

}  // namespace

TEST(Audit, ShippedNavierStokesPassesAtGoldenConstants) {
  const auto spec = shipped_nse();
  auto m = nse_audit_model(spec);
  m.declared_constant = 2.0;
  const auto c = audit_coercivity(m, spec.grid, sampler(), 60);
  EXPECT_TRUE(c.passed) << c.fitted_constant;
  EXPECT_TRUE(std::isfinite(c.fitted_constant));
  EXPECT_LE(c.fitted_constant, 2.0);
  EXPECT_GE(c.worst_margin, 0.0);
  m.declared_constant = 1.0;
  EXPECT_TRUE(audit_local_monotonicity(m, spec.grid, sampler(), 60).passed);
  m.declared_constant = 1.5;
  EXPECT_TRUE(audit_growth(m, spec.grid, sampler(), 60).passed);
  EXPECT_TRUE(audit_bilinear_estimate(spec.grid, sampler(), 30, 1.0).passed);
  const double tr = spec.noise.trace(spec.grid, true);
  EXPECT_TRUE(audit_kernel_growth<SpectralVelocityField>(spec.kernel, tr, spec.grid, sampler(), 60, 2.0).passed);
  EXPECT_TRUE(audit_kernel_lipschitz<SpectralVelocityField>(spec.kernel, tr, spec.grid, sampler(), 60, 2.0).passed);
}

TEST(Audit, BrokenSigmaFailsCoercivity) {
  const auto spec = shipped_nse();
  auto m = broken_sigma_model(spec);
  m.declared_constant = 2.0;
  const auto r = audit_coercivity(m, spec.grid, sampler(), 60);
  EXPECT_FALSE(r.passed);
  EXPECT_LT(r.worst_margin, 0.0);
  EXPECT_GT(r.fitted_constant, 1e3);
  ASSERT_TRUE(r.offending_sample.has_value());
  EXPECT_FALSE(r.offending_sample->empty());
}

TEST(Audit, BrokenSigmaStillAuditsWithoutShippedNoise) {
  auto spec = shipped_nse();
  spec.noise.amplitude = 0.0;
  const auto m = broken_sigma_model(spec);
  EXPECT_GT(m.noise_trace, 0.0);
  EXPECT_EQ(nse_audit_model(spec).noise_trace, 0.0);
}

TEST(Audit, FittedConstantIsTheLeastPassingValue) {
  const auto spec = shipped_nse(8);
  auto m = nse_audit_model(spec);
  m.declared_constant = 100.0;
  const auto loose = audit_coercivity(m, spec.grid, sampler(3), 40);
  m.declared_constant = loose.fitted_constant;
  const auto exact = audit_coercivity(m, spec.grid, sampler(3), 40);
  EXPECT_TRUE(exact.passed);
  EXPECT_NEAR(exact.worst_margin, 0.0, 1e-9 * (1.0 + std::abs(loose.worst_margin)));
  m.declared_constant = loose.fitted_constant * 0.99;
  EXPECT_FALSE(audit_coercivity(m, spec.grid, sampler(3), 40).passed);
}

TEST(Audit, SeededAndThreadInvariant) {
  const auto spec = shipped_nse(8);
  const auto m = nse_audit_model(spec);
  const auto a = audit_growth(m, spec.grid, sampler(5), 24, 1);
  const auto b = audit_growth(m, spec.grid, sampler(5), 24, 4);
  EXPECT_EQ(a.fitted_constant, b.fitted_constant);
  EXPECT_EQ(a.worst_margin, b.worst_margin);
  const auto c = audit_growth(m, spec.grid, sampler(6), 24, 1);
  EXPECT_NE(a.fitted_constant, c.fitted_constant);
}

TEST(Audit, ReportSerializes) {
  const auto spec = shipped_nse(6);
  const auto r = audit_coercivity(nse_audit_model(spec), spec.grid, sampler(), 5);
  const nlohmann::json j = r;
  EXPECT_EQ(j.at("condition"), "coercivity");
  EXPECT_EQ(j.at("samples"), 5);
  EXPECT_TRUE(j.contains("fitted_constant"));
  EXPECT_TRUE(j.contains("worst_margin"));
  EXPECT_TRUE(j.contains("passed"));
  EXPECT_THROW(audit_coercivity(nse_audit_model(spec), spec.grid, sampler(), 0), ConfigError);
}

TEST(Audit, CoercivityFunctionalMatchesAnIndependentEvaluation) {
  // For a single particle measure mu = delta_u the kernel drift vanishes, so
  // 2<A(u),u> + N1(u) = -(2 nu - 1) ||u||_1^2 + 2<-B(u),u> = -||u||_1^2 at nu = 1.
  const auto spec = shipped_nse(10);
  const auto m = nse_audit_model(spec);
  std::mt19937_64 gen(3);
  const auto u = testing_helpers::velocity(spec.grid, gen, 6);
  ParticleEnsemble<SpectralVelocityField> mu;
  mu.states.push_back(u);
  const auto a = m.drift(u, mu);
  const double lhs = 2.0 * inner_product(a, u.raw(), 0) + m.n1(u);
  EXPECT_NEAR(lhs, -inner_product(u, u, 1), 1e-10 * inner_product(u, u, 1));
}

TEST(Audit, BilinearHolderBoundPerSample) {
  // |<B(w,w),u>| = |<(w.grad)u, w>| <= ||w||_L4^2 ||u||_1, with the L4 norm from
  // physical values on a fine grid (normalized measure).
  const auto g = grid2(8);
  std::mt19937_64 gen(19);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = testing_helpers::velocity(g, gen, 8);
    const auto u = testing_helpers::velocity(g, gen, 8);
    const int n = 48;
    const auto phys = to_physical(w.raw(), n);
    double l4 = 0.0;
    for (std::size_t p = 0; p < phys[0].size(); ++p) l4 += std::pow(phys[0][p] * phys[0][p] + phys[1][p] * phys[1][p], 2);
    l4 = std::sqrt(std::sqrt(l4 / (n * n)));
    EXPECT_LE(std::abs(inner_product(bilinear_B(w), u, 0)), l4 * l4 * sobolev_norm(u, 1) * (1.0 + 1e-12));
  }
}

TEST(Audit, ScalarModelsPass) {
  SpdeModelSpec ch;
  ch.equation = Equation::cahn_hilliard;
  ch.grid = grid2(8);
  ch.phi = Polynomial::double_well();
  ch.noise.amplitude = 0.5;
  ch.noise.modes = 4;
  ch.kernel.noise_alpha = 0.1;
  auto m = scalar_audit_model(ch);
  AuditSampler s = sampler();
  s.scales = {0.1, 1.0};
  m.declared_constant = 50.0;
  const auto r = audit_coercivity(m, ch.grid, s, 30);
  EXPECT_TRUE(r.passed) << r.fitted_constant;
  EXPECT_TRUE(std::isfinite(audit_growth(m, ch.grid, s, 30).fitted_constant));
}

TEST(Audit, DemicontinuityGapsShrink) {
  const auto spec = shipped_nse(8);
  const auto m = nse_audit_model(spec);
  std::mt19937_64 gen(23);
  const auto u = testing_helpers::velocity(spec.grid, gen, 5);
  const auto w = testing_helpers::velocity(spec.grid, gen, 5);
  const auto z = testing_helpers::velocity(spec.grid, gen, 5);
  ParticleEnsemble<SpectralVelocityField> mu;
  mu.states = {u, w};
  const auto gaps = demicontinuity_smoke(m, u, w, z, mu, 12);
  ASSERT_EQ(gaps.size(), 12u);
  EXPECT_LT(gaps.back(), gaps.front() * 1e-2);
  for (std::size_t i = 4; i < gaps.size(); ++i) EXPECT_LT(gaps[i], gaps[i - 1]);
}

TEST(Kernel, ClippedNoiseFactorAndLipschitzConstant) {
  const InteractionKernel k{KernelKind::stokes_drag, 1.0, 0.5, 2.0};
  EXPECT_EQ(k.noise_factor(0.0, 0.0), 0.5);
  EXPECT_EQ(k.noise_factor(100.0, 1.0), 0.5 * (1.0 + 2.0 + 1.0));
  EXPECT_EQ(k.lipschitz(), 1.5);
  const InteractionKernel z{KernelKind::zero, 1.0, 0.5, 2.0};
  EXPECT_EQ(z.noise_factor(3.0, 3.0), 0.0);
  EXPECT_EQ(z.drift_coefficient(), 0.0);
}
