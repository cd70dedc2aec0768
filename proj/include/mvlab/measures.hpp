#pragma once

// Exact W2 between equal-size empirical measures, on the state space and on
// path space with the discretized sup norm ||x||_{T,H} = max_t ||x_t||_H.
// For uniform weights the optimal coupling is a permutation, so W2^2 is the
// optimal assignment value divided by N.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mvlab/assignment.hpp"
#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // row-major squared distances

  CostMatrix() = default;
  explicit CostMatrix(std::size_t size) : n(size), values(size * size, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

enum class PathMetric { state_l2_at_time, path_sup_l2 };

template <class Ensemble>
CostMatrix pairwise_cost(const Ensemble& a, const Ensemble& b, unsigned threads = 1) {
  if (a.size() != b.size()) throw DimensionError("pairwise_cost supports equal-size ensembles only");
  CostMatrix c(a.size());
  parallel_for(a.size(), threads, [&](std::size_t i) {
    for (std::size_t j = 0; j < b.size(); ++j) c.at(i, j) = state_distance_sq(a, i, b, j);
  });
  return c;
}

// Path metric between particle paths. state_l2_at_time uses frame
// `time_index`; path_sup_l2 takes the max over all shared grid times.
template <class Ensemble>
CostMatrix pairwise_cost(const PathEnsemble<Ensemble>& a, const PathEnsemble<Ensemble>& b, PathMetric metric,
                         std::size_t time_index = 0, unsigned threads = 1) {
  if (a.particles() != b.particles()) throw DimensionError("pairwise_cost supports equal-size ensembles only");
  if (a.times != b.times) throw DimensionError("path ensembles are on different time grids");
  if (metric == PathMetric::state_l2_at_time) {
    if (time_index >= a.frames.size()) throw DimensionError("time index outside the path grid");
    return pairwise_cost(a.frames[time_index], b.frames[time_index], threads);
  }
  const std::size_t n = a.particles();
  CostMatrix c(n);
  parallel_for(n, threads, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      double worst = 0.0;
      for (std::size_t f = 0; f < a.frames.size(); ++f)
        worst = std::max(worst, state_distance_sq(a.frames[f], i, b.frames[f], j));
      c.at(i, j) = worst;
    }
  });
  return c;
}

inline double wasserstein2_squared(const CostMatrix& cost) {
  if (cost.n == 0) throw DimensionError("W2 of empty ensembles");
  const auto r = solve_assignment(cost.values, cost.n);
  return std::max(0.0, r.cost / static_cast<double>(cost.n));
}

inline double wasserstein2(const CostMatrix& cost) { return std::sqrt(wasserstein2_squared(cost)); }

// `count` distinct indices from [0, n) by partial Fisher-Yates.
inline std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw ConfigError("subsample larger than the ensemble");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SequentialRng rng(seed);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(n - k));
    std::swap(idx[k], idx[j]);
  }
  idx.resize(count);
  return idx;
}

inline VectorEnsemble select_particles(const VectorEnsemble& e, const std::vector<std::size_t>& idx) {
  VectorEnsemble out(idx.size(), e.dim());
  for (std::size_t k = 0; k < idx.size(); ++k) std::copy(e[idx[k]].begin(), e[idx[k]].end(), out[k].begin());
  return out;
}

template <class Field>
ParticleEnsemble<Field> select_particles(const ParticleEnsemble<Field>& e, const std::vector<std::size_t>& idx) {
  ParticleEnsemble<Field> out;
  out.states.reserve(idx.size());
  for (auto i : idx) out.states.push_back(e[i]);
  return out;
}

template <class Ensemble>
PathEnsemble<Ensemble> select_paths(const PathEnsemble<Ensemble>& p, const std::vector<std::size_t>& idx) {
  PathEnsemble<Ensemble> out;
  out.times = p.times;
  out.spec_hash = p.spec_hash;
  out.seed = p.seed;
  for (const auto& f : p.frames) out.frames.push_back(select_particles(f, idx));
  return out;
}

// W2^2 on path space between `subsample` particles drawn without replacement
// from the N-particle run and from the reference run (the surrogate for the
// limit law). Averaging over seeds is the caller's job.
template <class Ensemble>
double chaos_statistic(const PathEnsemble<Ensemble>& system, const PathEnsemble<Ensemble>& reference,
                       std::size_t subsample, std::uint64_t seed, unsigned threads = 1) {
  if (subsample == 0 || subsample > system.particles() || subsample > reference.particles())
    throw ConfigError("subsample must be in [1, min(N, N_ref)]");
  if (system.times != reference.times) throw DimensionError("system and reference are on different time grids");
  const auto a = select_paths(system, subsample_indices(system.particles(), subsample, derive_seed(seed, 1)));
  const auto b = select_paths(reference, subsample_indices(reference.particles(), subsample, derive_seed(seed, 2)));
  return wasserstein2_squared(pairwise_cost(a, b, PathMetric::path_sup_l2, 0, threads));
}

}  // namespace mvlab
