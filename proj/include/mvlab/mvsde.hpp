#pragma once

// Finite-dimensional McKean-Vlasov SDEs: the radial cut-off, truncated
// coefficients, and an Euler-Maruyama particle integrator in which the law of
// X_t is replaced by the ensemble's own empirical measure.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

namespace detail {

// Squared norm as an unevaluated sum hi + lo (error-free products, compensated sums).
struct DoubleDouble {
  double hi = 0.0, lo = 0.0;
  bool operator<(const DoubleDouble& o) const { return hi < o.hi || (hi == o.hi && lo < o.lo); }
};

inline DoubleDouble exact_square(double x) {
  const double p = x * x;
  return {p, std::fma(x, x, -p)};
}

inline DoubleDouble norm_sq_dd(std::span<const double> u) {
  DoubleDouble acc;
  for (double v : u) {
    const auto p = exact_square(v);
    const double s = acc.hi + p.hi;
    const double b = s - acc.hi;
    const double err = (acc.hi - (s - b)) + (p.hi - b) + acc.lo + p.lo;
    acc.hi = s + err;
    acc.lo = err - (acc.hi - s);
  }
  return acc;
}

}  // namespace detail

// psi_n(u) = n u / max(n, |u|). The output never leaves the closed ball, even
// after rounding: the scale is nudged down until |psi_n(u)|^2 <= n^2.
inline VectorState cutoff_psi(std::span<const double> u, double level) {
  if (!(level > 0.0)) throw ConfigError("cut-off level must be positive");
  VectorState out(u.begin(), u.end());
  const auto cap = detail::exact_square(level);
  const auto norm_sq = detail::norm_sq_dd(u);
  if (!(cap < norm_sq)) return out;
  for (double s = level / std::sqrt(norm_sq.hi);; s = std::nextafter(s, 0.0)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = u[i] * s;
    if (!(cap < detail::norm_sq_dd(out))) return out;
  }
}

// Image measure mu o psi_n^{-1} of an empirical measure.
inline VectorEnsemble pushforward_truncate(const VectorEnsemble& ensemble, double level) {
  VectorEnsemble out = ensemble;
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto r = cutoff_psi(ensemble[i], level);
    std::copy(r.begin(), r.end(), out[i].begin());
  }
  return out;
}

// Empirical measure with the statistics most models need precomputed. Built
// once per time step, before any particle is advanced.
class EmpiricalMeasure {
 public:
  explicit EmpiricalMeasure(VectorEnsemble particles) : particles_(std::move(particles)) {
    const std::size_t n = particles_.size(), d = particles_.dim();
    if (n == 0) throw DimensionError("empirical measure of an empty ensemble");
    mean_.assign(d, 0.0);
    std::vector<CompensatedSum> sums(d);
    CompensatedSum second;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = particles_[i];
      for (std::size_t c = 0; c < d; ++c) {
        sums[c].add(x[c]);
        second.add(x[c] * x[c]);
      }
    }
    for (std::size_t c = 0; c < d; ++c) mean_[c] = sums[c].value() / static_cast<double>(n);
    second_moment_ = second.value() / static_cast<double>(n);
  }

  const VectorEnsemble& particles() const { return particles_; }
  std::span<const double> mean() const { return mean_; }
  // mu(|.|^2)
  double second_moment() const { return second_moment_; }
  std::size_t size() const { return particles_.size(); }
  std::size_t dim() const { return particles_.dim(); }

 private:
  VectorEnsemble particles_;
  std::vector<double> mean_;
  double second_moment_ = 0.0;
};

using CoefficientFn =
    std::function<void(double t, std::span<const double> x, const EmpiricalMeasure& mu, std::span<double> out)>;

// b(t, x, mu) into `out` (length d) and sigma(t, x, mu) into `out` (d x d,
// row-major). growth_exponent and constant record the declared kappa and C of
// the coercivity/growth conditions; they are metadata, not enforced.
struct MvsdeModel {
  std::size_t dim = 1;
  CoefficientFn drift;
  CoefficientFn diffusion;
  double growth_exponent = 2.0;
  double constant = 1.0;
  std::string name = "custom";

  EmpiricalMeasure prepare(const VectorEnsemble& ensemble) const { return EmpiricalMeasure(ensemble); }
  void drift_prepared(double t, std::span<const double> x, const EmpiricalMeasure& mu, std::span<double> out) const {
    drift(t, x, mu, out);
  }
  void diffusion_prepared(double t, std::span<const double> x, const EmpiricalMeasure& mu,
                          std::span<double> out) const {
    diffusion(t, x, mu, out);
  }
};

// A^n(t, u, mu) = A(t, psi_n(u), mu o psi_n^{-1}), same for sigma.
struct TruncatedModel {
  MvsdeModel base;
  double level = 1.0;

  std::size_t dim() const { return base.dim; }

  EmpiricalMeasure prepare(const VectorEnsemble& ensemble) const {
    return EmpiricalMeasure(pushforward_truncate(ensemble, level));
  }
  void drift_prepared(double t, std::span<const double> x, const EmpiricalMeasure& mu_truncated,
                      std::span<double> out) const {
    const auto y = cutoff_psi(x, level);
    base.drift(t, y, mu_truncated, out);
  }
  void diffusion_prepared(double t, std::span<const double> x, const EmpiricalMeasure& mu_truncated,
                          std::span<double> out) const {
    const auto y = cutoff_psi(x, level);
    base.diffusion(t, y, mu_truncated, out);
  }

  // Convenience forms taking the untruncated measure.
  void drift(double t, std::span<const double> x, const VectorEnsemble& mu, std::span<double> out) const {
    drift_prepared(t, x, prepare(mu), out);
  }
  void diffusion(double t, std::span<const double> x, const VectorEnsemble& mu, std::span<double> out) const {
    diffusion_prepared(t, x, prepare(mu), out);
  }
};

namespace detail {
inline std::size_t model_dim(const MvsdeModel& m) { return m.dim; }
inline std::size_t model_dim(const TruncatedModel& m) { return m.base.dim; }
}  // namespace detail

// One explicit Euler-Maruyama step of the N-particle system
// X_i <- X_i + b(t, X_i, S^N) dt + sigma(t, X_i, S^N) dW_i.
// S^N is built from the input ensemble before any particle moves.
template <class Model>
VectorEnsemble em_step(const VectorEnsemble& ensemble, const Model& model, double t, double dt,
                       const VectorEnsemble& noise_increments, unsigned threads = 1) {
  if (!(dt > 0.0)) throw ConfigError("time step must be positive");
  const std::size_t d = detail::model_dim(model);
  if (ensemble.dim() != d) throw DimensionError("ensemble dimension does not match the model");
  if (noise_increments.size() != ensemble.size() || noise_increments.dim() != d)
    throw DimensionError("noise increments must be one d-vector per particle");
  const EmpiricalMeasure mu = model.prepare(ensemble);
  VectorEnsemble next = ensemble;
  parallel_for(ensemble.size(), threads, [&](std::size_t i) {
    std::vector<double> drift(d, 0.0), diffusion(d * d, 0.0);
    const auto x = ensemble[i];
    model.drift_prepared(t, x, mu, drift);
    model.diffusion_prepared(t, x, mu, diffusion);
    const auto dw = noise_increments[i];
    auto out = next[i];
    for (std::size_t r = 0; r < d; ++r) {
      double acc = x[r] + drift[r] * dt;
      for (std::size_t c = 0; c < d; ++c) acc += diffusion[r * d + c] * dw[c];
      out[r] = acc;
    }
    if (!all_finite(out)) {
      throw BlowUpError(i, t, state_norm_sq(ensemble, i),
                        "non-finite state for particle " + std::to_string(i) + " at t=" + std::to_string(t));
    }
  });
  return next;
}

// Brownian increments N(0, dt I) for particle streams keyed by `stream_keys`.
// Component c of the increment at step `step` is a pure function of
// (key, step, c), so it does not depend on scheduling.
inline VectorEnsemble gaussian_increments(std::span<const std::uint64_t> stream_keys, std::size_t dim,
                                          std::uint64_t step, double dt) {
  VectorEnsemble inc(stream_keys.size(), dim);
  const double sdt = std::sqrt(dt);
  for (std::size_t i = 0; i < stream_keys.size(); ++i) {
    const CounterRng rng(stream_keys[i]);
    auto out = inc[i];
    for (std::size_t c = 0; c < dim; c += 2) {
      const auto z = rng.normal2(step, static_cast<std::uint32_t>(c / 2));
      out[c] = sdt * z[0];
      if (c + 1 < dim) out[c + 1] = sdt * z[1];
    }
  }
  return inc;
}

// Stream key for each particle label.
inline std::vector<std::uint64_t> particle_stream_keys(std::uint64_t master_seed, std::span<const std::uint64_t> labels) {
  std::vector<std::uint64_t> keys(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) keys[i] = derive_seed(master_seed, labels[i]);
  return keys;
}

inline std::vector<std::uint64_t> identity_labels(std::size_t n) {
  std::vector<std::uint64_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i;
  return labels;
}

struct MvsdeRunOptions {
  double horizon = 1.0;
  double dt = 1e-3;
  std::size_t save_stride = 1;
  std::uint64_t master_seed = 0;
  std::vector<std::uint64_t> labels;  // defaults to 0..N-1
  unsigned threads = 1;
};

inline std::size_t step_count(double horizon, double dt) {
  if (!(horizon > 0.0) || !(dt > 0.0)) throw ConfigError("horizon and dt must be positive");
  const double raw = horizon / dt;
  const auto steps = static_cast<std::size_t>(std::llround(raw));
  if (steps == 0 || std::abs(raw - static_cast<double>(steps)) > 1e-9 * raw)
    throw ConfigError("horizon must be an integer multiple of dt");
  return steps;
}

// Runs the particle system and saves every `save_stride`-th step (and the
// final time).
template <class Model>
PathEnsemble<VectorEnsemble> simulate_mvsde(const Model& model, VectorEnsemble initial, const MvsdeRunOptions& opt) {
  const std::size_t steps = step_count(opt.horizon, opt.dt);
  const std::size_t stride = std::max<std::size_t>(1, opt.save_stride);
  const auto labels = opt.labels.empty() ? identity_labels(initial.size()) : opt.labels;
  if (labels.size() != initial.size()) throw DimensionError("one label per particle required");
  const auto keys = particle_stream_keys(opt.master_seed, labels);
  PathEnsemble<VectorEnsemble> path;
  path.seed = opt.master_seed;
  path.push(0.0, initial);
  VectorEnsemble state = std::move(initial);
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = static_cast<double>(s) * opt.dt;
    const auto dw = gaussian_increments(keys, state.dim(), s, opt.dt);
    state = em_step(state, model, t, opt.dt, dw, opt.threads);
    if ((s + 1) % stride == 0 || s + 1 == steps) path.push(static_cast<double>(s + 1) * opt.dt, state);
  }
  return path;
}

// Mean-field Ornstein-Uhlenbeck model b = a x + beta mean(mu), sigma = s I.
// Written as (a + beta) x - beta (x - mean), it is a linear drift plus a
// Stokes-type pull towards the ensemble mean.
inline MvsdeModel mean_field_ou(double a, double beta, double s, std::size_t dim = 1) {
  MvsdeModel m;
  m.dim = dim;
  m.name = "mean_field_ou";
  m.drift = [a, beta](double, std::span<const double> x, const EmpiricalMeasure& mu, std::span<double> out) {
    const auto mean = mu.mean();
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = a * x[c] + beta * mean[c];
  };
  m.diffusion = [s, dim](double, std::span<const double>, const EmpiricalMeasure&, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t c = 0; c < dim; ++c) out[c * dim + c] = s;
  };
  m.growth_exponent = 2.0;
  m.constant = 2.0 * (std::abs(a) + std::abs(beta)) + s * s * static_cast<double>(dim);
  return m;
}

// Superlinear model used to exercise the cut-off: b = -x |x|^2 + mean(mu),
// sigma = (1 + |x|) I. Satisfies coercivity with kappa = 4.
inline MvsdeModel cubic_confining_model(std::size_t dim = 2) {
  MvsdeModel m;
  m.dim = dim;
  m.name = "cubic_confining";
  m.drift = [](double, std::span<const double> x, const EmpiricalMeasure& mu, std::span<double> out) {
    double r2 = 0.0;
    for (double v : x) r2 += v * v;
    const auto mean = mu.mean();
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = -x[c] * r2 + mean[c];
  };
  m.diffusion = [dim](double, std::span<const double> x, const EmpiricalMeasure&, std::span<double> out) {
    double r2 = 0.0;
    for (double v : x) r2 += v * v;
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t c = 0; c < dim; ++c) out[c * dim + c] = 1.0 + std::sqrt(r2);
  };
  m.growth_exponent = 4.0;
  m.constant = 4.0;
  return m;
}

// ---------------------------------------------------------------------------

struct MomentReport {
  double sup_moment = 0.0;            // max_t (1/N) sum_i |X_t^i|^p
  double dissipation_integral = 0.0;  // int_0^T (1/N) sum_i |X|^{p-2} N1(X) dt (trapezoid)
};

// Sup-in-time p-th moment and the dissipation quadrature of an ensemble path.
// `n1` maps (frame, particle) to N1(X); defaults to |X|^2 for vector states
// and ||X||_1^2 for velocity fields.
template <class Ensemble, class N1>
MomentReport moment_monitor(const PathEnsemble<Ensemble>& path, double p, N1&& n1) {
  if (path.frames.empty()) throw DimensionError("moment monitor needs a nonempty path");
  if (p < 2.0) throw ConfigError("moment order must be at least 2");
  MomentReport r;
  std::vector<double> integrand(path.frames.size());
  for (std::size_t f = 0; f < path.frames.size(); ++f) {
    const auto& frame = path.frames[f];
    CompensatedSum moment, diss;
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const double norm = std::sqrt(state_norm_sq(frame, i));
      moment.add(std::pow(norm, p));
      diss.add(std::pow(norm, p - 2.0) * n1(frame, i));
    }
    const double n = static_cast<double>(frame.size());
    r.sup_moment = std::max(r.sup_moment, moment.value() / n);
    integrand[f] = diss.value() / n;
  }
  CompensatedSum quad;
  for (std::size_t f = 1; f < integrand.size(); ++f)
    quad.add(0.5 * (path.times[f] - path.times[f - 1]) * (integrand[f] + integrand[f - 1]));
  r.dissipation_integral = quad.value();
  return r;
}

inline MomentReport moment_monitor(const PathEnsemble<VectorEnsemble>& path, double p) {
  return moment_monitor(path, p, [](const VectorEnsemble& e, std::size_t i) { return state_norm_sq(e, i); });
}

inline MomentReport moment_monitor(const PathEnsemble<ParticleEnsemble<SpectralVelocityField>>& path, double p) {
  return moment_monitor(path, p, [](const ParticleEnsemble<SpectralVelocityField>& e, std::size_t i) {
    return inner_product(e[i], e[i], 1);
  });
}

inline MomentReport moment_monitor(const PathEnsemble<ParticleEnsemble<ScalarSpectralField>>& path, double p) {
  return moment_monitor(path, p, [](const ParticleEnsemble<ScalarSpectralField>& e, std::size_t i) {
    return inner_product(e[i], e[i], 2);
  });
}

}  // namespace mvlab
