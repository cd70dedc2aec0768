#pragma once

// Weakly interacting N-particle SPDE systems on the torus:
//
//   dX^i = [L X^i + F(X^i) + (1/N) sum_j K(X^i, X^j)] dt
//          + (1/N) sum_j sigma(X^i, X^j) dW^i,
//
// with L the stiff linear part (Stokes or fourth order), F the nonlinearity
// (convection, Delta phi, Burgers) and K an interaction kernel. Stepping is
// IMEX: L implicit and diagonal in Fourier space, everything else explicit.
// Each step has two phases separated by a barrier: shared ensemble statistics
// (sequential, fixed order), then independent per-particle updates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/mvsde.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/spectral.hpp"

namespace mvlab {

enum class Equation { navier_stokes_2d, cahn_hilliard, kuramoto_sivashinsky };

inline const char* to_string(Equation e) {
  switch (e) {
    case Equation::navier_stokes_2d: return "navier_stokes_2d";
    case Equation::cahn_hilliard: return "cahn_hilliard";
    case Equation::kuramoto_sivashinsky: return "kuramoto_sivashinsky";
  }
  return "?";
}

inline Equation parse_equation(const std::string& s) {
  if (s == "navier_stokes_2d") return Equation::navier_stokes_2d;
  if (s == "cahn_hilliard") return Equation::cahn_hilliard;
  if (s == "kuramoto_sivashinsky") return Equation::kuramoto_sivashinsky;
  throw ConfigError("unknown equation '" + s + "'");
}

enum class KernelKind { stokes_drag, linear_custom, zero };

inline const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::stokes_drag: return "stokes_drag";
    case KernelKind::linear_custom: return "linear_custom";
    case KernelKind::zero: return "zero";
  }
  return "?";
}

inline KernelKind parse_kernel_kind(const std::string& s) {
  if (s == "stokes_drag") return KernelKind::stokes_drag;
  if (s == "linear_custom") return KernelKind::linear_custom;
  if (s == "zero") return KernelKind::zero;
  throw ConfigError("unknown interaction kernel '" + s + "'");
}

// Drift K(u, v) = gamma (u - v) with gamma = 1 for Stokes drag. The noise map
// scales the noise model's basis by
//   s(u, v) = alpha (1 + min(|u|, R) + min(|v|, R)),
// clipped at R so the linear-growth and Lipschitz bounds hold globally.
struct InteractionKernel {
  KernelKind kind = KernelKind::stokes_drag;
  double coefficient = 1.0;  // gamma, used by linear_custom
  double noise_alpha = 0.0;
  double clip_radius = 10.0;

  double drift_coefficient() const {
    switch (kind) {
      case KernelKind::stokes_drag: return 1.0;
      case KernelKind::linear_custom: return coefficient;
      case KernelKind::zero: return 0.0;
    }
    return 0.0;
  }
  double effective_alpha() const { return kind == KernelKind::zero ? 0.0 : noise_alpha; }

  // Declared Lipschitz constant of (K, sigma) in the L^2 norms, per unit of
  // noise trace for sigma.
  double lipschitz() const { return std::abs(drift_coefficient()) + effective_alpha(); }

  double noise_factor(double norm_u, double norm_v) const {
    const double a = effective_alpha();
    if (a == 0.0) return 0.0;
    return a * (1.0 + std::min(norm_u, clip_radius) + std::min(norm_v, clip_radius));
  }

  VectorCoefficients drift(const SpectralVelocityField& u, const SpectralVelocityField& v) const {
    VectorCoefficients out = u - v;
    out *= drift_coefficient();
    return out;
  }
  ScalarSpectralField drift(const ScalarSpectralField& u, const ScalarSpectralField& v) const {
    ScalarSpectralField out = u - v;
    out *= drift_coefficient();
    return out;
  }

  bool operator==(const InteractionKernel&) const = default;
};

// Finite-mode Q-Wiener noise. Basis: for every retained k != 0 with
// max(|k1|, |k2|) <= modes, the real pair sqrt(2) cos(kappa.x) e_k,
// sqrt(2) sin(kappa.x) e_k (e_k = k-perp / |k| for velocity, 1 for scalars),
// each with amplitude c_k = amplitude / (1 + |kappa|^2); plus the constant
// mode with amplitude mean_mode_amplitude for scalar fields.
struct NoiseModel {
  int modes = 0;  // 0: all retained field modes
  double amplitude = 0.0;
  double mean_mode_amplitude = 0.0;
  std::uint64_t master_seed = 0;

  int effective_modes(const SpectralGrid& g) const { return modes <= 0 ? g.modes : std::min(modes, g.modes); }

  double mode_amplitude(const SpectralGrid& g, int k1, int k2) const {
    if (k1 == 0 && k2 == 0) return mean_mode_amplitude;
    return amplitude / (1.0 + g.kappa_sq(k1, k2));
  }

  // sum over basis elements of c_b^2 |kappa_b|^(2 order); order 0 is the
  // squared Hilbert-Schmidt norm into H, order 1 into V.
  double trace(const SpectralGrid& g, bool vector_field, int order = 0) const {
    const int m = effective_modes(g);
    CompensatedSum acc;
    g.for_each_mode([&](std::size_t, int k1, int k2) {
      if (std::max(std::abs(k1), std::abs(k2)) > m) return;
      if (k1 == 0 && k2 == 0) {
        if (!vector_field && order == 0) acc.add(mean_mode_amplitude * mean_mode_amplitude);
        return;
      }
      const double c = mode_amplitude(g, k1, k2);
      acc.add(c * c * std::pow(g.kappa_sq(k1, k2), order));
    });
    return acc.value();
  }

  bool operator==(const NoiseModel&) const = default;
};

namespace detail {

// Counter for wavenumber k, independent of the grid's mode count so that
// runs at different resolutions share the noise on their common modes.
inline std::uint32_t mode_counter(int k1, int k2) {
  return (static_cast<std::uint32_t>(k1 + 32768) << 16) | static_cast<std::uint32_t>(k2 + 32768);
}

}  // namespace detail

// Unit-factor noise increment for one particle stream at one step.
inline SpectralVelocityField velocity_noise_increment(const SpectralGrid& g, const NoiseModel& noise,
                                                      std::uint64_t stream_key, std::uint64_t step, double dt) {
  VectorCoefficients raw(g);
  const int m = noise.effective_modes(g);
  if (noise.amplitude != 0.0) {
    const CounterRng rng(stream_key);
    const double sdt = std::sqrt(dt);
    g.for_each_mode([&](std::size_t i, int k1, int k2) {
      const bool upper = k1 > 0 || (k1 == 0 && k2 > 0);
      if (!upper || std::max(std::abs(k1), std::abs(k2)) > m) return;
      const auto xi = rng.normal2(step, detail::mode_counter(k1, k2));
      const double c = noise.mode_amplitude(g, k1, k2) * sdt / std::sqrt(2.0);
      const Complex z = c * Complex{xi[0], -xi[1]};
      const double kn = std::sqrt(static_cast<double>(k1 * k1 + k2 * k2));
      const double e1 = -k2 / kn, e2 = k1 / kn;
      raw.comp[0][i] = e1 * z;
      raw.comp[1][i] = e2 * z;
      const std::size_t j = g.index(-k1, -k2);
      raw.comp[0][j] = std::conj(raw.comp[0][i]);
      raw.comp[1][j] = std::conj(raw.comp[1][i]);
    });
  }
  return leray_project(std::move(raw));
}

inline ScalarSpectralField scalar_noise_increment(const SpectralGrid& g, const NoiseModel& noise,
                                                  std::uint64_t stream_key, std::uint64_t step, double dt) {
  ScalarSpectralField f(g);
  const int m = noise.effective_modes(g);
  const CounterRng rng(stream_key);
  const double sdt = std::sqrt(dt);
  if (noise.mean_mode_amplitude != 0.0)
    f.at(0, 0) = noise.mean_mode_amplitude * sdt * rng.normal2(step, detail::mode_counter(0, 0))[0];
  if (noise.amplitude == 0.0) return f;
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const bool upper = k1 > 0 || (k1 == 0 && k2 > 0);
    if (!upper || std::max(std::abs(k1), std::abs(k2)) > m) return;
    const auto xi = rng.normal2(step, detail::mode_counter(k1, k2));
    const double c = noise.mode_amplitude(g, k1, k2) * sdt / std::sqrt(2.0);
    f.coeffs[i] = c * Complex{xi[0], -xi[1]};
    f.coeffs[g.index(-k1, -k2)] = std::conj(f.coeffs[i]);
  });
  return f;
}

struct SpdeModelSpec {
  Equation equation = Equation::navier_stokes_2d;
  SpectralGrid grid;
  double viscosity = 1.0;      // nu (Navier-Stokes)
  double hyperdiffusion = 1.0; // scale of the implicit fourth-order term (CH/KS)
  Polynomial phi;              // CH/KS nonlinearity
  bool nonlinear = true;       // convection (NSE) or Burgers term (KS)
  InteractionKernel kernel;
  NoiseModel noise;
  double blowup_energy = 1e12;

  bool operator==(const SpdeModelSpec&) const = default;
};

inline void validate(const SpdeModelSpec& s) {
  validate(s.grid);
  switch (s.equation) {
    case Equation::navier_stokes_2d:
      if (s.grid.dimension != 2) throw ConfigError("navier_stokes_2d needs a 2D grid");
      if (!(s.viscosity > 0.0)) throw ConfigError("viscosity must be positive");
      break;
    case Equation::cahn_hilliard:
      validate_phi(s.phi, s.grid.dimension);
      if (!(s.hyperdiffusion > 0.0)) throw ConfigError("hyperdiffusion must be positive");
      break;
    case Equation::kuramoto_sivashinsky:
      if (s.grid.dimension != 1) throw ConfigError("kuramoto_sivashinsky needs a 1D grid");
      validate_phi(s.phi, 1);
      if (!(s.hyperdiffusion > 0.0)) throw ConfigError("hyperdiffusion must be positive");
      break;
  }
  if (s.noise.amplitude < 0.0 || s.noise.mean_mode_amplitude < 0.0)
    throw ConfigError("noise amplitudes must be nonnegative");
  if (s.kernel.noise_alpha < 0.0 || !(s.kernel.clip_radius > 0.0))
    throw ConfigError("kernel noise alpha must be >= 0 and clip radius > 0");
}

// Canonical one-line description, hashed into PathEnsemble metadata.
inline std::string canonical_string(const SpdeModelSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "eq=" << to_string(s.equation) << ";M=" << s.grid.modes << ";L=" << s.grid.length << ";d=" << s.grid.dimension
     << ";nu=" << s.viscosity << ";hyper=" << s.hyperdiffusion << ";phi=";
  for (double c : s.phi.coeffs) os << c << ",";
  os << ";nl=" << s.nonlinear << ";kernel=" << to_string(s.kernel.kind) << "," << s.kernel.coefficient << ","
     << s.kernel.noise_alpha << "," << s.kernel.clip_radius << ";noise=" << s.noise.modes << "," << s.noise.amplitude
     << "," << s.noise.mean_mode_amplitude << "," << s.noise.master_seed;
  return os.str();
}

inline std::string spec_hash(const SpdeModelSpec& s) { return hex64(fnv1a64(canonical_string(s))); }

template <class Field>
struct FieldTraits;

template <>
struct FieldTraits<SpectralVelocityField> {
  using Raw = VectorCoefficients;
  static const Raw& raw(const SpectralVelocityField& f) { return f.raw(); }
  static SpectralVelocityField finish(Raw r) { return leray_project(std::move(r)); }
  static const SpectralGrid& grid(const SpectralVelocityField& f) { return f.grid(); }
  static SpectralVelocityField noise(const SpectralGrid& g, const NoiseModel& n, std::uint64_t key, std::uint64_t step,
                                     double dt) {
    return velocity_noise_increment(g, n, key, step, dt);
  }
  static constexpr bool vector_field = true;
};

template <>
struct FieldTraits<ScalarSpectralField> {
  using Raw = ScalarSpectralField;
  static const Raw& raw(const ScalarSpectralField& f) { return f; }
  static ScalarSpectralField finish(Raw r) { return r; }
  static const SpectralGrid& grid(const ScalarSpectralField& f) { return f.grid; }
  static ScalarSpectralField noise(const SpectralGrid& g, const NoiseModel& n, std::uint64_t key, std::uint64_t step,
                                   double dt) {
    return scalar_noise_increment(g, n, key, step, dt);
  }
  static constexpr bool vector_field = false;
};

// Shared per-step statistics: the ensemble mean and the mean clipped norm.
template <class Field>
struct EnsembleStats {
  typename FieldTraits<Field>::Raw mean;
  double mean_clipped_norm = 0.0;
};

template <class Field>
EnsembleStats<Field> ensemble_stats(const ParticleEnsemble<Field>& ensemble, const InteractionKernel& kernel) {
  using Traits = FieldTraits<Field>;
  if (ensemble.size() == 0) throw DimensionError("empty ensemble");
  EnsembleStats<Field> s;
  s.mean = Traits::raw(ensemble[0]);
  CompensatedSum clipped;
  clipped.add(std::min(std::sqrt(l2_norm_sq(ensemble[0])), kernel.clip_radius));
  for (std::size_t j = 1; j < ensemble.size(); ++j) {
    require_same_grid(Traits::grid(ensemble[0]), Traits::grid(ensemble[j]));
    s.mean += Traits::raw(ensemble[j]);
    clipped.add(std::min(std::sqrt(l2_norm_sq(ensemble[j])), kernel.clip_radius));
  }
  const double n = static_cast<double>(ensemble.size());
  s.mean *= 1.0 / n;
  s.mean_clipped_norm = clipped.value() / n;
  return s;
}

// (1/N) sum_j K(state, X_j) for linear kernels: gamma (state - mean).
template <class Field>
Field mean_field_drift(const Field& state, const EnsembleStats<Field>& stats, const InteractionKernel& kernel) {
  using Traits = FieldTraits<Field>;
  auto out = Traits::raw(state);
  out -= stats.mean;
  out *= kernel.drift_coefficient();
  return Traits::finish(std::move(out));
}

template <class Field>
Field mean_field_drift(const Field& state, const ParticleEnsemble<Field>& ensemble, const InteractionKernel& kernel,
                       double /*t*/ = 0.0) {
  require_same_grid(FieldTraits<Field>::grid(state), FieldTraits<Field>::grid(ensemble[0]));
  return mean_field_drift(state, ensemble_stats(ensemble, kernel), kernel);
}

// (1/N) sum_j s(state, X_j).
template <class Field>
double mean_noise_factor(const Field& state, const EnsembleStats<Field>& stats, const InteractionKernel& kernel) {
  const double a = kernel.effective_alpha();
  if (a == 0.0) return 0.0;
  return a * (1.0 + std::min(std::sqrt(l2_norm_sq(state)), kernel.clip_radius) + stats.mean_clipped_norm);
}

namespace detail {

template <class Field>
[[noreturn]] void raise_blowup(std::size_t i, double t, const Field& pre) {
  const double e = l2_norm_sq(pre);
  std::ostringstream os;
  os << "blow-up in particle " << i << " at t=" << t << " (pre-step energy " << e << ")";
  throw BlowUpError(i, t, e, os.str());
}

template <class Raw>
bool raw_finite(const Raw& r) {
  if constexpr (std::is_same_v<Raw, VectorCoefficients>) {
    for (const auto& c : r.comp)
      for (const auto& z : c)
        if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  } else {
    for (const auto& z : r.coeffs)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  }
  return true;
}

}  // namespace detail

// u^{m+1}(k) = [u^m + dt(-B(u^m) + K_i) + s_i dW_i](k) / (1 + dt nu |kappa|^2),
// followed by the Leray projection. The projection commutes with the diagonal
// solve, so B enters unprojected and is projected once with the rest.
inline ParticleEnsemble<SpectralVelocityField> imex_step_nse(const ParticleEnsemble<SpectralVelocityField>& ensemble,
                                                             const SpdeModelSpec& spec, double t, double dt,
                                                             const ParticleEnsemble<SpectralVelocityField>& noise,
                                                             unsigned threads = 1) {
  if (spec.equation != Equation::navier_stokes_2d) throw ConfigError("imex_step_nse needs navier_stokes_2d");
  if (!(dt > 0.0)) throw ConfigError("time step must be positive");
  if (noise.size() != ensemble.size()) throw DimensionError("one noise increment per particle required");
  const auto stats = ensemble_stats(ensemble, spec.kernel);
  const double gamma = spec.kernel.drift_coefficient();
  ParticleEnsemble<SpectralVelocityField> next;
  next.states.resize(ensemble.size());
  parallel_for(ensemble.size(), threads, [&](std::size_t i) {
    const auto& u = ensemble[i];
    require_same_grid(u.grid(), spec.grid);
    VectorCoefficients rhs = u.raw();
    if (spec.nonlinear) rhs.axpy(-dt, detail::convection(u, u));
    if (gamma != 0.0) {
      VectorCoefficients k = u.raw();
      k -= stats.mean;
      rhs.axpy(dt * gamma, k);
    }
    const double s = mean_noise_factor(u, stats, spec.kernel);
    if (s != 0.0) rhs.axpy(s, noise[i].raw());
    const SpectralGrid& g = spec.grid;
    g.for_each_mode([&](std::size_t idx, int k1, int k2) {
      const double inv = 1.0 / (1.0 + dt * spec.viscosity * g.kappa_sq(k1, k2));
      rhs.comp[0][idx] *= inv;
      rhs.comp[1][idx] *= inv;
    });
    if (!detail::raw_finite(rhs)) detail::raise_blowup(i, t, u);
    next.states[i] = leray_project(std::move(rhs));
    if (!(l2_norm_sq(next.states[i]) <= spec.blowup_energy)) detail::raise_blowup(i, t, u);
  });
  return next;
}

// Fourth-order part implicit (divide by 1 + dt h |kappa|^4); Delta phi (CH),
// -d_xx phi and -u u_x (KS), interaction and noise explicit.
inline ParticleEnsemble<ScalarSpectralField> imex_step_scalar(const ParticleEnsemble<ScalarSpectralField>& ensemble,
                                                              const SpdeModelSpec& spec, double t, double dt,
                                                              const ParticleEnsemble<ScalarSpectralField>& noise,
                                                              unsigned threads = 1) {
  if (spec.equation == Equation::navier_stokes_2d) throw ConfigError("imex_step_scalar needs cahn_hilliard or KS");
  if (!(dt > 0.0)) throw ConfigError("time step must be positive");
  if (noise.size() != ensemble.size()) throw DimensionError("one noise increment per particle required");
  const auto stats = ensemble_stats(ensemble, spec.kernel);
  const double gamma = spec.kernel.drift_coefficient();
  const bool has_phi = std::any_of(spec.phi.coeffs.begin(), spec.phi.coeffs.end(), [](double c) { return c != 0.0; });
  ParticleEnsemble<ScalarSpectralField> next;
  next.states.resize(ensemble.size());
  parallel_for(ensemble.size(), threads, [&](std::size_t i) {
    const auto& u = ensemble[i];
    require_same_grid(u.grid, spec.grid);
    const SpectralGrid& g = spec.grid;
    ScalarSpectralField rhs = u;
    if (has_phi) {
      const ScalarSpectralField p = nonlinearity_phi(u, spec.phi);
      // CH: + Delta phi, symbol -|kappa|^2. KS: - d_xx phi, symbol +kappa^2.
      const double sign = spec.equation == Equation::cahn_hilliard ? -1.0 : 1.0;
      g.for_each_mode([&](std::size_t idx, int k1, int k2) { rhs.coeffs[idx] += dt * sign * g.kappa_sq(k1, k2) * p.coeffs[idx]; });
    }
    if (spec.equation == Equation::kuramoto_sivashinsky && spec.nonlinear) rhs.axpy(-dt, burgers_term(u));
    if (gamma != 0.0) {
      ScalarSpectralField k = u;
      k -= stats.mean;
      rhs.axpy(dt * gamma, k);
    }
    const double s = mean_noise_factor(u, stats, spec.kernel);
    if (s != 0.0) rhs.axpy(s, noise[i]);
    g.for_each_mode([&](std::size_t idx, int k1, int k2) {
      const double k2sq = g.kappa_sq(k1, k2);
      rhs.coeffs[idx] *= 1.0 / (1.0 + dt * spec.hyperdiffusion * k2sq * k2sq);
    });
    if (!detail::raw_finite(rhs)) detail::raise_blowup(i, t, u);
    if (!(l2_norm_sq(rhs) <= spec.blowup_energy)) detail::raise_blowup(i, t, u);
    next.states[i] = std::move(rhs);
  });
  return next;
}

inline ParticleEnsemble<SpectralVelocityField> imex_step(const ParticleEnsemble<SpectralVelocityField>& e,
                                                         const SpdeModelSpec& s, double t, double dt,
                                                         const ParticleEnsemble<SpectralVelocityField>& noise,
                                                         unsigned threads) {
  return imex_step_nse(e, s, t, dt, noise, threads);
}
inline ParticleEnsemble<ScalarSpectralField> imex_step(const ParticleEnsemble<ScalarSpectralField>& e,
                                                       const SpdeModelSpec& s, double t, double dt,
                                                       const ParticleEnsemble<ScalarSpectralField>& noise,
                                                       unsigned threads) {
  return imex_step_scalar(e, s, t, dt, noise, threads);
}

// ---------------------------------------------------------------------------
// Driver

struct SimulationOptions {
  double horizon = 1.0;
  double dt = 1e-3;
  std::size_t save_stride = 1;
  std::vector<std::uint64_t> labels;  // particle stream labels; default 0..N-1
  unsigned threads = 1;
  std::optional<double> stop_threshold;  // arms the tau_M rule for stop_particle
  std::size_t stop_particle = 0;
};

template <class Field>
class SimulationBlowUp : public BlowUpError {
 public:
  SimulationBlowUp(const BlowUpError& e, PathEnsemble<ParticleEnsemble<Field>> partial)
      : BlowUpError(e), partial_(std::move(partial)) {}
  const PathEnsemble<ParticleEnsemble<Field>>& partial_path() const { return partial_; }

 private:
  PathEnsemble<ParticleEnsemble<Field>> partial_;
};

template <class Field>
double h1_norm_sq(const Field& f) {
  return inner_product(f, f, 1);
}

// Steps the system from `initial` to the horizon (or to the stopping time when
// armed), saving every save_stride-th step plus the final state. Noise for
// particle i uses the stream derive_seed(spec.noise.master_seed, label_i).
template <class Field>
PathEnsemble<ParticleEnsemble<Field>> simulate_system(const SpdeModelSpec& spec, ParticleEnsemble<Field> initial,
                                                      const SimulationOptions& opt) {
  using Traits = FieldTraits<Field>;
  validate(spec);
  if (initial.size() == 0) throw ConfigError("simulate_system needs N >= 1");
  const std::size_t steps = step_count(opt.horizon, opt.dt);
  const std::size_t stride = std::max<std::size_t>(1, opt.save_stride);
  const std::size_t n = initial.size();
  const auto labels = opt.labels.empty() ? identity_labels(n) : opt.labels;
  if (labels.size() != n) throw DimensionError("one label per particle required");
  const auto keys = particle_stream_keys(spec.noise.master_seed, labels);
  if (opt.stop_threshold && opt.stop_particle >= n) throw ConfigError("stop particle out of range");

  PathEnsemble<ParticleEnsemble<Field>> path;
  path.spec_hash = spec_hash(spec);
  path.seed = spec.noise.master_seed;

  std::vector<double> energy(n), h1(n), integral(n, 0.0);
  auto measure = [&](const ParticleEnsemble<Field>& e) {
    parallel_for(n, opt.threads, [&](std::size_t i) {
      energy[i] = l2_norm_sq(e[i]);
      h1[i] = h1_norm_sq(e[i]);
    });
  };
  auto save = [&](double t, const ParticleEnsemble<Field>& e) {
    path.push(t, e);
    path.energy.push_back(energy);
    path.dissipation_integral.push_back(integral);
  };
  auto stop_hit = [&] {
    if (!opt.stop_threshold) return false;
    const std::size_t p = opt.stop_particle;
    return integral[p] > *opt.stop_threshold || energy[p] > *opt.stop_threshold;
  };

  ParticleEnsemble<Field> state = std::move(initial);
  for (const auto& f : state.states) require_same_grid(Traits::grid(f), spec.grid);
  measure(state);
  save(0.0, state);
  if (stop_hit()) return path;

  ParticleEnsemble<Field> noise;
  noise.states.resize(n);
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = static_cast<double>(s) * opt.dt;
    parallel_for(n, opt.threads, [&](std::size_t i) {
      noise.states[i] = Traits::noise(spec.grid, spec.noise, keys[i], s, opt.dt);
    });
    const std::vector<double> h1_prev = h1;
    try {
      state = imex_step(state, spec, t, opt.dt, noise, opt.threads);
    } catch (const BlowUpError& e) {
      throw SimulationBlowUp<Field>(e, std::move(path));
    }
    measure(state);
    for (std::size_t i = 0; i < n; ++i) integral[i] += 0.5 * opt.dt * (h1_prev[i] + h1[i]);
    const double t_next = static_cast<double>(s + 1) * opt.dt;
    const bool last = s + 1 == steps;
    if (stop_hit()) {
      save(t_next, state);
      return path;
    }
    if ((s + 1) % stride == 0 || last) save(t_next, state);
  }
  return path;
}

// tau_M: first grid time where int_0^t ||X_s||_1^2 ds > M or ||X_t||^2 > M,
// clipped at T; T when never exceeded.
inline double stopping_time_tau(const DiagnosticStream& d, double threshold, double horizon) {
  for (std::size_t f = 0; f < d.times.size(); ++f) {
    if (d.times[f] > horizon) break;
    if (d.dissipation_integral.at(f) > threshold || d.energy.at(f) > threshold) return std::min(d.times[f], horizon);
  }
  return horizon;
}

template <class Ensemble>
double stopping_time_tau(const PathEnsemble<Ensemble>& path, double threshold, std::size_t particle = 0) {
  return stopping_time_tau(path.diagnostics(particle), threshold, path.horizon());
}

// ---------------------------------------------------------------------------
// Initial samplers: i.i.d. random low-mode fields, amplitude ~ |k|^-3.

struct InitialSampler {
  std::uint64_t seed = 0;
  double decay = 3.0;
  int max_mode = 4;
  double amplitude = 1.0;
  bool with_mean = false;  // scalar fields only
};

inline SpectralVelocityField sample_initial_velocity(const SpectralGrid& g, const InitialSampler& s,
                                                     std::uint64_t label) {
  SequentialRng rng(derive_seed(s.seed ^ 0x1A17ULL, label));
  return random_velocity_field(g, rng, s.decay, std::min(s.max_mode, g.modes), s.amplitude);
}

inline ScalarSpectralField sample_initial_scalar(const SpectralGrid& g, const InitialSampler& s, std::uint64_t label) {
  SequentialRng rng(derive_seed(s.seed ^ 0x1A17ULL, label));
  return random_scalar_field(g, rng, s.decay, std::min(s.max_mode, g.modes), s.amplitude, s.with_mean);
}

template <class Field>
ParticleEnsemble<Field> sample_initial_ensemble(const SpectralGrid& g, const InitialSampler& s,
                                                std::span<const std::uint64_t> labels) {
  ParticleEnsemble<Field> e;
  e.states.reserve(labels.size());
  for (auto label : labels) {
    if constexpr (std::is_same_v<Field, SpectralVelocityField>)
      e.states.push_back(sample_initial_velocity(g, s, label));
    else
      e.states.push_back(sample_initial_scalar(g, s, label));
  }
  return e;
}

template <class Field>
ParticleEnsemble<Field> sample_initial_ensemble(const SpectralGrid& g, const InitialSampler& s, std::size_t n) {
  const auto labels = identity_labels(n);
  return sample_initial_ensemble<Field>(g, s, labels);
}

}  // namespace mvlab
