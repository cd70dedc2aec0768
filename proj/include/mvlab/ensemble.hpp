#pragma once

// Particle ensembles (one time instant, uniform weights) and path ensembles
// (the same particles on a saved time grid).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/spectral.hpp"

namespace mvlab {

using VectorState = std::vector<double>;

// N points of R^d stored contiguously.
class VectorEnsemble {
 public:
  VectorEnsemble() = default;
  VectorEnsemble(std::size_t count, std::size_t dim, double fill = 0.0)
      : count_(count), dim_(dim), values_(count * dim, fill) {
    if (dim == 0) throw DimensionError("vector states need dimension >= 1");
  }
  static VectorEnsemble from_states(const std::vector<VectorState>& states) {
    if (states.empty()) throw DimensionError("ensemble needs at least one particle");
    VectorEnsemble e(states.size(), states.front().size());
    for (std::size_t i = 0; i < states.size(); ++i) {
      if (states[i].size() != e.dim_) throw DimensionError("particles differ in dimension");
      std::copy(states[i].begin(), states[i].end(), e[i].begin());
    }
    return e;
  }

  std::size_t size() const { return count_; }
  std::size_t dim() const { return dim_; }
  std::span<double> operator[](std::size_t i) { return {values_.data() + i * dim_, dim_}; }
  std::span<const double> operator[](std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  bool operator==(const VectorEnsemble&) const = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 1;
  std::vector<double> values_;
};

template <class Field>
struct ParticleEnsemble {
  std::vector<Field> states;

  std::size_t size() const { return states.size(); }
  Field& operator[](std::size_t i) { return states[i]; }
  const Field& operator[](std::size_t i) const { return states[i]; }
  bool operator==(const ParticleEnsemble&) const = default;
};

// Squared distance between particle i of a and particle j of b.
inline double state_distance_sq(const VectorEnsemble& a, std::size_t i, const VectorEnsemble& b, std::size_t j) {
  if (a.dim() != b.dim()) throw DimensionError("vector ensembles differ in dimension");
  CompensatedSum acc;
  const auto x = a[i];
  const auto y = b[j];
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double d = x[c] - y[c];
    acc.add(d * d);
  }
  return acc.value();
}

template <class Field>
double state_distance_sq(const ParticleEnsemble<Field>& a, std::size_t i, const ParticleEnsemble<Field>& b,
                         std::size_t j) {
  return l2_distance_sq(a[i], b[j]);
}

inline double state_norm_sq(const VectorEnsemble& a, std::size_t i) {
  CompensatedSum acc;
  for (double v : a[i]) acc.add(v * v);
  return acc.value();
}

template <class Field>
double state_norm_sq(const ParticleEnsemble<Field>& a, std::size_t i) {
  return l2_norm_sq(a[i]);
}

// Energy (squared L^2 norm) and the running integral of ||X_s||_1^2 for one
// particle on the saved grid.
struct DiagnosticStream {
  std::vector<double> times;
  std::vector<double> energy;
  std::vector<double> dissipation_integral;
};

template <class Ensemble>
struct PathEnsemble {
  std::vector<double> times;
  std::vector<Ensemble> frames;
  // diagnostics[frame][particle]; empty for finite-dimensional runs.
  std::vector<std::vector<double>> energy;
  std::vector<std::vector<double>> dissipation_integral;
  std::string spec_hash;
  std::uint64_t seed = 0;

  std::size_t particles() const { return frames.empty() ? 0 : frames.front().size(); }
  double horizon() const { return times.empty() ? 0.0 : times.back(); }

  void push(double t, Ensemble frame) {
    if (!times.empty() && !(t > times.back())) throw DimensionError("path time grid must be strictly increasing");
    if (!frames.empty() && frame.size() != frames.front().size())
      throw DimensionError("particle count changed along the path");
    times.push_back(t);
    frames.push_back(std::move(frame));
  }

  DiagnosticStream diagnostics(std::size_t particle) const {
    DiagnosticStream d;
    d.times = times;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      d.energy.push_back(f < energy.size() ? energy[f].at(particle) : state_norm_sq(frames[f], particle));
      d.dissipation_integral.push_back(f < dissipation_integral.size() ? dissipation_integral[f].at(particle) : 0.0);
    }
    return d;
  }

  bool operator==(const PathEnsemble&) const = default;
};

}  // namespace mvlab
