#pragma once

// Sampled auditors for the structural conditions on drift and diffusion:
// coercivity, local monotonicity, growth, and the interaction-kernel bounds.
// Each auditor evaluates the inequality on random states and measures,
// reports the least constant C that makes every sample pass and the signed
// margin at the declared constant. A pass is evidence on the sampled set, not
// a proof.

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/measures.hpp"
#include "mvlab/particles.hpp"
#include "mvlab/spectral.hpp"

namespace mvlab {

struct AuditReport {
  std::string condition;
  std::size_t samples = 0;
  double worst_margin = std::numeric_limits<double>::infinity();  // > 0: slack at the declared constant
  double fitted_constant = 0.0;    // least C passing every sample
  double declared_constant = 0.0;
  bool passed = true;
  std::optional<std::string> offending_sample;
  std::string note = "sampled check; a pass is evidence on the sampled set, not a proof";
};

inline void to_json(nlohmann::json& j, const AuditReport& r) {
  j = nlohmann::json{{"condition", r.condition},
                     {"samples", r.samples},
                     {"worst_margin", r.worst_margin},
                     {"fitted_constant", r.fitted_constant},
                     {"declared_constant", r.declared_constant},
                     {"passed", r.passed},
                     {"note", r.note}};
  j["offending_sample"] = r.offending_sample ? nlohmann::json(*r.offending_sample) : nlohmann::json(nullptr);
}

// sigma(u, mu) = noise_factor(u, mu) Q^{1/2} with ||Q^{1/2}||_HS^2 = noise_trace.
template <class Field>
struct AuditModel {
  using Raw = typename FieldTraits<Field>::Raw;
  using Measure = ParticleEnsemble<Field>;

  std::string name;
  std::function<Raw(const Field&, const Measure&)> drift;
  std::function<double(const Field&, const Measure&)> noise_factor;
  double noise_trace = 0.0;
  std::function<double(const Field&)> n1;   // coercivity functional
  std::function<double(const Field&)> rho;  // local monotonicity weights
  std::function<double(const Field&)> eta;
  int dual_order = -1;      // Sobolev order of the V* norm
  double growth_beta = 2.0;
  double declared_constant = 1.0;
};

struct AuditSampler {
  std::uint64_t seed = 0;
  std::vector<double> decays{1.5, 3.0};
  std::vector<double> scales{1.0, 10.0, 100.0};
  int max_mode = 8;
  std::size_t measure_size = 4;
};

namespace detail {

template <class Field>
Field audit_random_field(const SpectralGrid& g, SequentialRng& rng, double decay, int max_mode, double scale) {
  if constexpr (std::is_same_v<Field, SpectralVelocityField>) {
    return random_velocity_field(g, rng, decay, std::min(max_mode, g.modes), scale);
  } else {
    return random_scalar_field(g, rng, decay, std::min(max_mode, g.modes), scale, true);
  }
}

template <class Field>
struct AuditSample {
  Field u;
  ParticleEnsemble<Field> mu;
  double decay = 0.0;
  double scale = 0.0;
};

template <class Field>
AuditSample<Field> draw_sample(const SpectralGrid& g, const AuditSampler& s, std::size_t index, std::uint64_t salt) {
  SequentialRng rng(derive_seed(s.seed ^ salt, index));
  AuditSample<Field> out;
  out.decay = s.decays[index % s.decays.size()];
  out.scale = s.scales[(index / s.decays.size()) % s.scales.size()];
  out.u = audit_random_field<Field>(g, rng, out.decay, s.max_mode, out.scale);
  for (std::size_t j = 0; j < s.measure_size; ++j) {
    const double sc = s.scales[rng.below(s.scales.size())];
    out.mu.states.push_back(audit_random_field<Field>(g, rng, out.decay, s.max_mode, sc));
  }
  return out;
}

template <class Field>
double second_moment(const ParticleEnsemble<Field>& mu) {
  CompensatedSum acc;
  for (const auto& f : mu.states) acc.add(l2_norm_sq(f));
  return acc.value() / static_cast<double>(mu.size());
}

template <class Field>
const SpectralGrid& grid_of(const Field& f) {
  return FieldTraits<Field>::grid(f);
}

template <class Raw>
double pairing(const Raw& a, const Raw& b, int order) {
  return inner_product(a, b, order);
}

inline std::string describe(std::size_t index, double decay, double scale, double norm) {
  std::ostringstream os;
  os.precision(6);
  os << "sample " << index << " (decay " << decay << ", scale " << scale << ", |u| " << norm << ")";
  return os.str();
}

struct SampleOutcome {
  double ratio = 0.0;   // value the constant must dominate
  double margin = 0.0;  // slack at the declared constant
  double norm = 0.0;
};

inline AuditReport reduce(const std::string& id, double declared, const std::vector<SampleOutcome>& out,
                          const std::vector<std::pair<double, double>>& labels) {
  AuditReport r;
  r.condition = id;
  r.samples = out.size();
  r.declared_constant = declared;
  std::size_t worst = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    r.fitted_constant = std::max(r.fitted_constant, out[i].ratio);
    if (out[i].margin < r.worst_margin) {
      r.worst_margin = out[i].margin;
      worst = i;
    }
  }
  r.passed = r.worst_margin >= 0.0;
  if (!r.passed) r.offending_sample = describe(worst, labels[worst].first, labels[worst].second, out[worst].norm);
  return r;
}

}  // namespace detail

// 2<A(u,mu),u> + ||sigma(u,mu)||^2 <= -N1(u) + C (1 + |u|^2 + mu(|.|^2)).
template <class Field>
AuditReport audit_coercivity(const AuditModel<Field>& model, const SpectralGrid& grid, const AuditSampler& sampler,
                             std::size_t samples, unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto smp = detail::draw_sample<Field>(grid, sampler, s, 0xC0E5ULL);
    const auto a = model.drift(smp.u, smp.mu);
    const double fac = model.noise_factor(smp.u, smp.mu);
    const double lhs = 2.0 * detail::pairing(a, FieldTraits<Field>::raw(smp.u), 0) + fac * fac * model.noise_trace +
                       model.n1(smp.u);
    const double u2 = l2_norm_sq(smp.u);
    const double base = 1.0 + u2 + detail::second_moment(smp.mu);
    out[s] = {std::max(0.0, lhs / base), model.declared_constant * base - lhs, std::sqrt(u2)};
    labels[s] = {smp.decay, smp.scale};
  });
  return detail::reduce("coercivity", model.declared_constant, out, labels);
}

// 2<A(u,mu) - A(v,nu), u - v> + ||sigma(u,mu) - sigma(v,nu)||^2
//   <= (C + rho(u) + eta(v) + C mu(|.|^2) + C nu(|.|^2)) |u - v|^2
//      + C (1 + mu(|.|^2) + nu(|.|^2)) W2(mu, nu)^2.
template <class Field>
AuditReport audit_local_monotonicity(const AuditModel<Field>& model, const SpectralGrid& grid,
                                     const AuditSampler& sampler, std::size_t samples, unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto first = detail::draw_sample<Field>(grid, sampler, s, 0x3070ULL);
    auto second = detail::draw_sample<Field>(grid, sampler, s, 0x3071ULL);
    // Half the pairs are close: v = u + small perturbation, nu = perturbed mu.
    if (s % 2 == 0) {
      auto v = FieldTraits<Field>::raw(first.u);
      v.axpy(1e-2, FieldTraits<Field>::raw(second.u));
      second.u = FieldTraits<Field>::finish(std::move(v));
      for (std::size_t j = 0; j < second.mu.size(); ++j) {
        auto m = FieldTraits<Field>::raw(first.mu[j]);
        m.axpy(1e-2, FieldTraits<Field>::raw(second.mu[j]));
        second.mu.states[j] = FieldTraits<Field>::finish(std::move(m));
      }
    }
    const auto& u = first.u;
    const auto& v = second.u;
    auto diff_a = model.drift(u, first.mu);
    diff_a -= model.drift(v, second.mu);
    auto w = FieldTraits<Field>::raw(u);
    w -= FieldTraits<Field>::raw(v);
    const double ds = model.noise_factor(u, first.mu) - model.noise_factor(v, second.mu);
    const double lhs = 2.0 * detail::pairing(diff_a, w, 0) + ds * ds * model.noise_trace;
    const double d2 = inner_product(w, w, 0);
    const double w2 = wasserstein2_squared(pairwise_cost(first.mu, second.mu));
    const double m2 = detail::second_moment(first.mu) + detail::second_moment(second.mu);
    const double known = (model.rho(u) + model.eta(v)) * d2;
    const double denom = (1.0 + m2) * (d2 + w2);
    const double ratio = denom > 0.0 ? (lhs - known) / denom : (lhs - known > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    out[s] = {std::max(0.0, ratio), model.declared_constant * denom + known - lhs, std::sqrt(d2)};
    labels[s] = {first.decay, first.scale};
  });
  return detail::reduce("local_monotonicity", model.declared_constant, out, labels);
}

// |A(u,mu)|_{V*}^2 <= C (1 + N1(u) + mu(|.|^2)) (1 + |u|^beta + mu(|.|^2)) and
// |sigma(u,mu)|_HS^2 <= C (1 + |u|^2 + mu(|.|^2)); one constant covers both.
template <class Field>
AuditReport audit_growth(const AuditModel<Field>& model, const SpectralGrid& grid, const AuditSampler& sampler,
                         std::size_t samples, unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto smp = detail::draw_sample<Field>(grid, sampler, s, 0x6A0ULL);
    const auto a = model.drift(smp.u, smp.mu);
    const double a_dual = inner_product(a, a, model.dual_order);
    const double fac = model.noise_factor(smp.u, smp.mu);
    const double hs = fac * fac * model.noise_trace;
    const double u2 = l2_norm_sq(smp.u);
    const double m2 = detail::second_moment(smp.mu);
    const double drift_base = (1.0 + model.n1(smp.u) + m2) * (1.0 + std::pow(u2, model.growth_beta / 2.0) + m2);
    const double noise_base = 1.0 + u2 + m2;
    const double ratio = std::max(a_dual / drift_base, hs / noise_base);
    const double margin = std::min(model.declared_constant * drift_base - a_dual, model.declared_constant * noise_base - hs);
    out[s] = {ratio, margin, std::sqrt(u2)};
    labels[s] = {smp.decay, smp.scale};
  });
  return detail::reduce("growth", model.declared_constant, out, labels);
}

// ||B(u)||_{-1}^2 <= C ||u||^2 ||u||_1^2 on random velocity fields.
inline AuditReport audit_bilinear_estimate(const SpectralGrid& grid, const AuditSampler& sampler, std::size_t samples,
                                           double declared, unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto smp = detail::draw_sample<SpectralVelocityField>(grid, sampler, s, 0xB11ULL);
    const auto b = bilinear_B(smp.u);
    const double lhs = inner_product(b, b, -1);
    const double base = l2_norm_sq(smp.u) * inner_product(smp.u, smp.u, 1);
    out[s] = {base > 0.0 ? lhs / base : 0.0, declared * base - lhs, std::sqrt(l2_norm_sq(smp.u))};
    labels[s] = {smp.decay, smp.scale};
  });
  return detail::reduce("bilinear_estimate", declared, out, labels);
}

// Kernel linear growth: |K(u,v)| + |sigma(u,v)|_HS <= C (1 + |u| + |v|).
template <class Field>
AuditReport audit_kernel_growth(const InteractionKernel& kernel, double noise_trace, const SpectralGrid& grid,
                                const AuditSampler& sampler, std::size_t samples, double declared,
                                unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto a = detail::draw_sample<Field>(grid, sampler, s, 0xA1ULL);
    const auto b = detail::draw_sample<Field>(grid, sampler, s, 0xA2ULL);
    const double nu = std::sqrt(l2_norm_sq(a.u)), nv = std::sqrt(l2_norm_sq(b.u));
    const auto k = kernel.drift(a.u, b.u);
    const double lhs = std::sqrt(inner_product(k, k, 0)) + kernel.noise_factor(nu, nv) * std::sqrt(noise_trace);
    const double base = 1.0 + nu + nv;
    out[s] = {lhs / base, declared * base - lhs, nu};
    labels[s] = {a.decay, a.scale};
  });
  return detail::reduce("kernel_growth", declared, out, labels);
}

// Kernel local Lipschitz bound:
// |K(u1,v1) - K(u2,v2)| + |sigma(u1,v1) - sigma(u2,v2)|_HS
//   <= C (1 + |u1| + |u2| + |v1| + |v2|) |u1 - u2| + C (1 + |v1| + |v2|) |v1 - v2|.
template <class Field>
AuditReport audit_kernel_lipschitz(const InteractionKernel& kernel, double noise_trace, const SpectralGrid& grid,
                                   const AuditSampler& sampler, std::size_t samples, double declared,
                                   unsigned threads = 1) {
  if (samples == 0) throw ConfigError("audit needs at least one sample");
  std::vector<detail::SampleOutcome> out(samples);
  std::vector<std::pair<double, double>> labels(samples);
  parallel_for(samples, threads, [&](std::size_t s) {
    const auto p = detail::draw_sample<Field>(grid, sampler, s, 0xB1ULL);
    const auto q = detail::draw_sample<Field>(grid, sampler, s, 0xB2ULL);
    const Field& u1 = p.u;
    const Field& v1 = q.u;
    const Field& u2 = p.mu[0];
    const Field& v2 = q.mu[0];
    const double n_u1 = std::sqrt(l2_norm_sq(u1)), n_u2 = std::sqrt(l2_norm_sq(u2));
    const double n_v1 = std::sqrt(l2_norm_sq(v1)), n_v2 = std::sqrt(l2_norm_sq(v2));
    auto dk = kernel.drift(u1, v1);
    dk -= kernel.drift(u2, v2);
    const double lhs = std::sqrt(inner_product(dk, dk, 0)) +
                       std::abs(kernel.noise_factor(n_u1, n_v1) - kernel.noise_factor(n_u2, n_v2)) *
                           std::sqrt(noise_trace);
    const double du = std::sqrt(l2_distance_sq(u1, u2)), dv = std::sqrt(l2_distance_sq(v1, v2));
    const double base = (1.0 + n_u1 + n_u2 + n_v1 + n_v2) * du + (1.0 + n_v1 + n_v2) * dv;
    out[s] = {base > 0.0 ? lhs / base : 0.0, declared * base - lhs, n_u1};
    labels[s] = {p.decay, p.scale};
  });
  return detail::reduce("kernel_lipschitz", declared, out, labels);
}

// Demicontinuity smoke test: along u_n = u + 2^-n w the pairing <A(u_n, mu), z>
// should approach <A(u, mu), z>. Returns |difference| for n = 0..levels-1.
template <class Field>
std::vector<double> demicontinuity_smoke(const AuditModel<Field>& model, const Field& u, const Field& w,
                                         const Field& z, const ParticleEnsemble<Field>& mu, int levels) {
  const auto target = inner_product(model.drift(u, mu), FieldTraits<Field>::raw(z), 0);
  std::vector<double> gaps;
  for (int n = 0; n < levels; ++n) {
    auto un = FieldTraits<Field>::raw(u);
    un.axpy(std::ldexp(1.0, -n), FieldTraits<Field>::raw(w));
    const Field f = FieldTraits<Field>::finish(std::move(un));
    gaps.push_back(std::abs(inner_product(model.drift(f, mu), FieldTraits<Field>::raw(z), 0) - target));
  }
  return gaps;
}

// ---------------------------------------------------------------------------
// Shipped audit models

// Clipped noise factor averaged over the measure:
// alpha (1 + min(|u|, R) + mean_j min(|X_j|, R)).
template <class Field>
double kernel_noise_factor(const InteractionKernel& k, const Field& u, const ParticleEnsemble<Field>& mu) {
  return mean_noise_factor(u, ensemble_stats(mu, k), k);
}

// A(u, mu) = nu Delta u - B(u) + (1/N) sum_j K(u, X_j).
inline AuditModel<SpectralVelocityField> nse_audit_model(const SpdeModelSpec& spec, double rho_coefficient = 1.0) {
  AuditModel<SpectralVelocityField> m;
  m.name = spec.nonlinear ? "navier_stokes_2d" : "stokes";
  m.drift = [spec](const SpectralVelocityField& u, const ParticleEnsemble<SpectralVelocityField>& mu) {
    VectorCoefficients a = stokes_apply(u).raw();
    a *= spec.viscosity;
    if (spec.nonlinear) a -= bilinear_B(u).raw();
    if (spec.kernel.drift_coefficient() != 0.0) a += mean_field_drift(u, mu, spec.kernel).raw();
    return a;
  };
  m.noise_factor = [k = spec.kernel](const SpectralVelocityField& u, const ParticleEnsemble<SpectralVelocityField>& mu) {
    return kernel_noise_factor(k, u, mu);
  };
  m.noise_trace = spec.noise.trace(spec.grid, true);
  m.n1 = [](const SpectralVelocityField& u) { return inner_product(u, u, 1); };
  m.rho = [rho_coefficient](const SpectralVelocityField& u) {
    return rho_coefficient * (inner_product(u, u, 1) + l2_norm_sq(u));
  };
  m.eta = [](const SpectralVelocityField& v) { return l2_norm_sq(v); };
  m.dual_order = -1;
  m.growth_beta = 2.0;
  return m;
}

// Counterexample: noise amplitude alpha (1 + |u|^2), so ||sigma||^2 grows like
// |u|^4 and no constant in the coercivity bound can hold.
inline AuditModel<SpectralVelocityField> broken_sigma_model(const SpdeModelSpec& spec) {
  auto m = nse_audit_model(spec);
  m.name = "broken_sigma";
  const double alpha = spec.kernel.noise_alpha > 0.0 ? spec.kernel.noise_alpha : 1.0;
  m.noise_factor = [alpha](const SpectralVelocityField& u, const ParticleEnsemble<SpectralVelocityField>&) {
    return alpha * (1.0 + l2_norm_sq(u));
  };
  if (m.noise_trace == 0.0) {
    NoiseModel n = spec.noise;
    n.amplitude = 1.0;
    m.noise_trace = n.trace(spec.grid, true);
  }
  return m;
}

// CH: A = -h Delta^2 u + Delta phi(u) + K; KS: A = -h d^4 u - d^2 phi(u) - u u_x + K.
// N1(u) = ||u||_2^2, V* = order -2.
inline AuditModel<ScalarSpectralField> scalar_audit_model(const SpdeModelSpec& spec) {
  AuditModel<ScalarSpectralField> m;
  m.name = to_string(spec.equation);
  m.drift = [spec](const ScalarSpectralField& u, const ParticleEnsemble<ScalarSpectralField>& mu) {
    ScalarSpectralField a = scalar_op_apply(u, ScalarOp::bilaplacian);
    a *= -spec.hyperdiffusion;
    const ScalarSpectralField p = nonlinearity_phi(u, spec.phi);
    const double sign = spec.equation == Equation::cahn_hilliard ? -1.0 : 1.0;
    spec.grid.for_each_mode([&](std::size_t i, int k1, int k2) { a.coeffs[i] += sign * spec.grid.kappa_sq(k1, k2) * p.coeffs[i]; });
    if (spec.equation == Equation::kuramoto_sivashinsky && spec.nonlinear) a -= burgers_term(u);
    if (spec.kernel.drift_coefficient() != 0.0) a += mean_field_drift(u, mu, spec.kernel);
    return a;
  };
  m.noise_factor = [k = spec.kernel](const ScalarSpectralField& u, const ParticleEnsemble<ScalarSpectralField>& mu) {
    return kernel_noise_factor(k, u, mu);
  };
  m.noise_trace = spec.noise.trace(spec.grid, false);
  m.n1 = [](const ScalarSpectralField& u) { return inner_product(u, u, 2); };
  m.rho = [](const ScalarSpectralField& u) { return inner_product(u, u, 2) + l2_norm_sq(u); };
  m.eta = [](const ScalarSpectralField& v) { return l2_norm_sq(v); };
  m.dual_order = -2;
  m.growth_beta = 2.0;
  return m;
}

}  // namespace mvlab
