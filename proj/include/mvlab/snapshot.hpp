#pragma once

// Binary snapshot of a particle ensemble at one time. Little-endian:
//
//   "MVLABSNP"        8 bytes magic
//   u32 version (1)   u32 equation tag   u32 M   u32 spatial dimension
//   u64 N             f64 L   f64 dt   f64 t
//   then per particle, per component, per k (row-major over k1, k2): f64 re, f64 im
//
// Velocity snapshots have two components, scalar snapshots one.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/particles.hpp"
#include "mvlab/spectral.hpp"

namespace mvlab {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

struct SnapshotHeader {
  std::uint32_t version = 1;
  Equation equation = Equation::navier_stokes_2d;
  SpectralGrid grid;
  std::uint64_t particles = 0;
  double dt = 0.0;
  double time = 0.0;
};

template <class Field>
struct Snapshot {
  SnapshotHeader header;
  ParticleEnsemble<Field> ensemble;
};

namespace detail {

inline constexpr char snapshot_magic[8] = {'M', 'V', 'L', 'A', 'B', 'S', 'N', 'P'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ConfigError("snapshot truncated");
  return v;
}

inline void put_coeffs(std::ostream& os, const std::vector<Complex>& c) {
  for (const auto& z : c) {
    put(os, z.real());
    put(os, z.imag());
  }
}

inline void get_coeffs(std::istream& is, std::vector<Complex>& c) {
  for (auto& z : c) {
    const double re = get<double>(is);
    const double im = get<double>(is);
    z = Complex{re, im};
  }
}

}  // namespace detail

template <class Field>
void write_snapshot(const std::string& path, Equation eq, const ParticleEnsemble<Field>& e, double dt, double t) {
  if (e.size() == 0) throw DimensionError("cannot snapshot an empty ensemble");
  const SpectralGrid& g = FieldTraits<Field>::grid(e[0]);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open snapshot for writing: " + path);
  os.write(detail::snapshot_magic, 8);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(eq));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.modes));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.dimension));
  detail::put<std::uint64_t>(os, e.size());
  detail::put(os, g.length);
  detail::put(os, dt);
  detail::put(os, t);
  for (const auto& f : e.states) {
    require_same_grid(FieldTraits<Field>::grid(f), g);
    if constexpr (std::is_same_v<Field, SpectralVelocityField>) {
      detail::put_coeffs(os, f.component(0));
      detail::put_coeffs(os, f.component(1));
    } else {
      detail::put_coeffs(os, f.coeffs);
    }
  }
  if (!os) throw Error("snapshot write failed: " + path);
}

inline SnapshotHeader read_snapshot_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::snapshot_magic, 8) != 0)
    throw ConfigError("not a snapshot file (bad magic)");
  SnapshotHeader h;
  h.version = detail::get<std::uint32_t>(is);
  if (h.version != 1) throw ConfigError("unsupported snapshot version " + std::to_string(h.version));
  const auto eq = detail::get<std::uint32_t>(is);
  if (eq > 2) throw ConfigError("unknown equation tag in snapshot");
  h.equation = static_cast<Equation>(eq);
  h.grid.modes = static_cast<int>(detail::get<std::uint32_t>(is));
  h.grid.dimension = static_cast<int>(detail::get<std::uint32_t>(is));
  h.particles = detail::get<std::uint64_t>(is);
  h.grid.length = detail::get<double>(is);
  h.dt = detail::get<double>(is);
  h.time = detail::get<double>(is);
  validate(h.grid);
  return h;
}

inline SnapshotHeader read_snapshot_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open snapshot: " + path);
  return read_snapshot_header(is);
}

template <class Field>
Snapshot<Field> read_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open snapshot: " + path);
  Snapshot<Field> s;
  s.header = read_snapshot_header(is);
  constexpr bool velocity = std::is_same_v<Field, SpectralVelocityField>;
  if (velocity != (s.header.equation == Equation::navier_stokes_2d))
    throw ConfigError("snapshot holds a different field type");
  s.ensemble.states.reserve(s.header.particles);
  for (std::uint64_t i = 0; i < s.header.particles; ++i) {
    if constexpr (velocity) {
      VectorCoefficients raw(s.header.grid);
      detail::get_coeffs(is, raw.comp[0]);
      detail::get_coeffs(is, raw.comp[1]);
      s.ensemble.states.push_back(leray_project(std::move(raw)));
    } else {
      ScalarSpectralField f(s.header.grid);
      detail::get_coeffs(is, f.coeffs);
      s.ensemble.states.push_back(std::move(f));
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ConfigError("trailing bytes in snapshot");
  return s;
}

}  // namespace mvlab
