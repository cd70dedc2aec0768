#pragma once

// Truncated Fourier fields on the periodic torus [0, L)^d and the operators
// the particle engines need: Leray projection, Stokes operator, the projected
// convection term, Sobolev pairings and the scalar symbols used by
// Cahn-Hilliard and Kuramoto-Sivashinsky.
//
// Layout: retained wavenumbers k in {-M..M}^d, stored row-major with k1 as
// the slow index, i.e. idx = (k1 + M) * (2M + 1) + (k2 + M). Physical
// wavenumbers are kappa = 2 pi k / L. Fourier coefficients follow
// u(x) = sum_k u_k exp(i kappa . x), so the L^2 pairing is the normalized one,
// (u, v) = |O|^{-1} int u . v dx = sum_k Re(u_k conj(v_k)).

#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/core.hpp"
#include "mvlab/fft.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

struct SpectralGrid {
  int modes = 1;
  double length = 2.0 * std::numbers::pi;
  int dimension = 2;

  int side() const { return 2 * modes + 1; }
  std::size_t size() const {
    const auto s = static_cast<std::size_t>(side());
    return dimension == 1 ? s : s * s;
  }
  std::size_t index(int k1, int k2 = 0) const {
    if (dimension == 1) return static_cast<std::size_t>(k1 + modes);
    return static_cast<std::size_t>(k1 + modes) * static_cast<std::size_t>(side()) +
           static_cast<std::size_t>(k2 + modes);
  }
  double scale() const { return 2.0 * std::numbers::pi / length; }
  double kappa_sq(int k1, int k2 = 0) const {
    const double s = scale();
    return s * s * static_cast<double>(k1 * k1 + k2 * k2);
  }

  // f(idx, k1, k2) over every retained mode; k2 = 0 in one dimension.
  template <class F>
  void for_each_mode(F&& f) const {
    if (dimension == 1) {
      for (int k = -modes; k <= modes; ++k) f(index(k), k, 0);
      return;
    }
    std::size_t idx = 0;
    for (int k1 = -modes; k1 <= modes; ++k1)
      for (int k2 = -modes; k2 <= modes; ++k2) f(idx++, k1, k2);
  }

  bool operator==(const SpectralGrid&) const = default;
};

inline void validate(const SpectralGrid& g) {
  if (g.modes < 1) throw ConfigError("spectral grid needs at least one mode");
  if (!(g.length > 0.0)) throw ConfigError("domain length must be positive");
  if (g.dimension != 1 && g.dimension != 2) throw ConfigError("spectral grid dimension must be 1 or 2");
}

inline void require_same_grid(const SpectralGrid& a, const SpectralGrid& b) {
  if (!(a == b)) throw DimensionError("spectral grids do not match");
}

// Physical grid size that makes products of `degree` retained fields alias-free
// on the retained modes: n > (degree + 1) M.
inline int dealiased_size(int modes, int degree) {
  return fft_friendly_size((degree + 1) * modes + 1);
}

// ---------------------------------------------------------------------------
// Scalar fields

struct ScalarSpectralField {
  SpectralGrid grid;
  std::vector<Complex> coeffs;

  ScalarSpectralField() = default;
  explicit ScalarSpectralField(const SpectralGrid& g) : grid(g), coeffs(g.size()) { validate(g); }

  Complex& at(int k1, int k2 = 0) { return coeffs[grid.index(k1, k2)]; }
  const Complex& at(int k1, int k2 = 0) const { return coeffs[grid.index(k1, k2)]; }

  ScalarSpectralField& operator+=(const ScalarSpectralField& o) {
    require_same_grid(grid, o.grid);
    for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] += o.coeffs[i];
    return *this;
  }
  ScalarSpectralField& operator-=(const ScalarSpectralField& o) {
    require_same_grid(grid, o.grid);
    for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] -= o.coeffs[i];
    return *this;
  }
  ScalarSpectralField& operator*=(double s) {
    for (auto& c : coeffs) c *= s;
    return *this;
  }
  void axpy(double a, const ScalarSpectralField& x) {
    require_same_grid(grid, x.grid);
    for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] += a * x.coeffs[i];
  }
  bool operator==(const ScalarSpectralField&) const = default;
};

inline ScalarSpectralField operator+(ScalarSpectralField a, const ScalarSpectralField& b) { return a += b; }
inline ScalarSpectralField operator-(ScalarSpectralField a, const ScalarSpectralField& b) { return a -= b; }
inline ScalarSpectralField operator*(double s, ScalarSpectralField a) { return a *= s; }

// ---------------------------------------------------------------------------
// Vector fields. VectorCoefficients is unconstrained; SpectralVelocityField can
// only be produced by leray_project, so holding one means the incompressibility
// and zero-mean invariants hold.

struct VectorCoefficients {
  SpectralGrid grid;
  std::array<std::vector<Complex>, 2> comp;

  VectorCoefficients() = default;
  explicit VectorCoefficients(const SpectralGrid& g) : grid(g) {
    validate(g);
    if (g.dimension != 2) throw DimensionError("vector fields live on the 2D torus");
    comp[0].assign(g.size(), Complex{});
    comp[1].assign(g.size(), Complex{});
  }

  VectorCoefficients& operator+=(const VectorCoefficients& o) {
    require_same_grid(grid, o.grid);
    for (int c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < comp[c].size(); ++i) comp[c][i] += o.comp[c][i];
    return *this;
  }
  VectorCoefficients& operator-=(const VectorCoefficients& o) {
    require_same_grid(grid, o.grid);
    for (int c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < comp[c].size(); ++i) comp[c][i] -= o.comp[c][i];
    return *this;
  }
  VectorCoefficients& operator*=(double s) {
    for (auto& v : comp)
      for (auto& c : v) c *= s;
    return *this;
  }
  void axpy(double a, const VectorCoefficients& x) {
    require_same_grid(grid, x.grid);
    for (int c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < comp[c].size(); ++i) comp[c][i] += a * x.comp[c][i];
  }
  bool operator==(const VectorCoefficients&) const = default;
};

inline VectorCoefficients operator+(VectorCoefficients a, const VectorCoefficients& b) { return a += b; }
inline VectorCoefficients operator-(VectorCoefficients a, const VectorCoefficients& b) { return a -= b; }
inline VectorCoefficients operator*(double s, VectorCoefficients a) { return a *= s; }

class SpectralVelocityField;
SpectralVelocityField leray_project(VectorCoefficients raw);

class SpectralVelocityField {
 public:
  SpectralVelocityField() = default;
  static SpectralVelocityField zero(const SpectralGrid& g) {
    SpectralVelocityField f;
    f.data_ = VectorCoefficients(g);
    return f;
  }

  const SpectralGrid& grid() const { return data_.grid; }
  const VectorCoefficients& raw() const { return data_; }
  const std::vector<Complex>& component(int c) const { return data_.comp[static_cast<std::size_t>(c)]; }
  Complex at(int c, int k1, int k2) const { return component(c)[data_.grid.index(k1, k2)]; }

  bool operator==(const SpectralVelocityField&) const = default;

 private:
  friend SpectralVelocityField leray_project(VectorCoefficients raw);
  VectorCoefficients data_;
};

inline VectorCoefficients operator+(const SpectralVelocityField& a, const SpectralVelocityField& b) {
  return a.raw() + b.raw();
}
inline VectorCoefficients operator-(const SpectralVelocityField& a, const SpectralVelocityField& b) {
  return a.raw() - b.raw();
}

namespace detail {

// Truncate toward zero to `bits` significant bits; symmetric in sign.
inline double truncate_mantissa(double x, int bits) {
  if (x == 0.0 || !std::isfinite(x)) return x;
  if (std::abs(x) >= std::numeric_limits<double>::min()) {
    // Normal number: clear the low 53 - bits fraction bits.
    const std::uint64_t mask = ~((std::uint64_t{1} << (53 - bits)) - 1);
    return std::bit_cast<double>(std::bit_cast<std::uint64_t>(x) & mask);
  }
  int e = 0;
  const double m = std::frexp(x, &e);
  return std::ldexp(std::trunc(std::ldexp(m, bits)), e - bits);
}

inline Complex truncate_mantissa(Complex z, int bits) {
  return {truncate_mantissa(z.real(), bits), truncate_mantissa(z.imag(), bits)};
}

inline Complex divergence_at(int k1, int k2, Complex u1, Complex u2) {
  return static_cast<double>(k1) * u1 + static_cast<double>(k2) * u2;
}

}  // namespace detail

// Per mode k != 0 keeps the component orthogonal to k; mode 0 is zeroed.
// A mode whose coefficient divergence already evaluates to exactly zero is
// left untouched, so the projection is bit-exactly idempotent. Otherwise the
// output is written as w * (-k2, k1); when plain rounding of that product
// leaves a nonzero divergence residue, w is first truncated to
// 53 - bit_width(M) bits so both products are exact and k . u == 0 holds in
// floating point.
inline SpectralVelocityField leray_project(VectorCoefficients raw) {
  const SpectralGrid& g = raw.grid;
  if (g.dimension != 2) throw DimensionError("leray_project needs a 2D vector field");
  const int bits = 53 - static_cast<int>(std::bit_width(static_cast<unsigned>(g.modes)));
  auto& u1 = raw.comp[0];
  auto& u2 = raw.comp[1];
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    if (k1 == 0 && k2 == 0) {
      u1[i] = Complex{};
      u2[i] = Complex{};
      return;
    }
    if (detail::divergence_at(k1, k2, u1[i], u2[i]) == Complex{}) return;
    const double fk1 = k1, fk2 = k2;
    Complex w = (-fk2 * u1[i] + fk1 * u2[i]) / (fk1 * fk1 + fk2 * fk2);
    Complex a = -fk2 * w, b = fk1 * w;
    if (detail::divergence_at(k1, k2, a, b) != Complex{}) {
      w = detail::truncate_mantissa(w, bits);
      a = -fk2 * w;
      b = fk1 * w;
    }
    u1[i] = a;
    u2[i] = b;
  });
  SpectralVelocityField out;
  out.data_ = std::move(raw);
  return out;
}

// Largest |k . u_k| over retained modes in coefficient arithmetic.
inline double max_coefficient_divergence(const VectorCoefficients& u) {
  double worst = 0.0;
  u.grid.for_each_mode([&](std::size_t i, int k1, int k2) {
    worst = std::max(worst, std::abs(detail::divergence_at(k1, k2, u.comp[0][i], u.comp[1][i])));
  });
  return worst;
}

// ---------------------------------------------------------------------------
// Pairings and norms

namespace detail {

// |kappa|^(2 order); order < 0 excludes the mean mode.
inline bool sobolev_weight(const SpectralGrid& g, int k1, int k2, int order, double& w) {
  if (order == 0) {
    w = 1.0;
    return true;
  }
  if (k1 == 0 && k2 == 0) return false;
  const double base = g.kappa_sq(k1, k2);
  w = 1.0;
  for (int i = 0; i < std::abs(order); ++i) w *= base;
  if (order < 0) w = 1.0 / w;
  return true;
}

// Re(a conj(b))
inline double real_dot(Complex a, Complex b) { return a.real() * b.real() + a.imag() * b.imag(); }

}  // namespace detail

inline double inner_product(const ScalarSpectralField& u, const ScalarSpectralField& v, int order) {
  require_same_grid(u.grid, v.grid);
  CompensatedSum acc;
  u.grid.for_each_mode([&](std::size_t i, int k1, int k2) {
    double w;
    if (!detail::sobolev_weight(u.grid, k1, k2, order, w)) return;
    acc.add(w * detail::real_dot(u.coeffs[i], v.coeffs[i]));
  });
  return acc.value();
}

inline double inner_product(const VectorCoefficients& u, const VectorCoefficients& v, int order) {
  require_same_grid(u.grid, v.grid);
  CompensatedSum acc;
  u.grid.for_each_mode([&](std::size_t i, int k1, int k2) {
    double w;
    if (!detail::sobolev_weight(u.grid, k1, k2, order, w)) return;
    acc.add(w * (detail::real_dot(u.comp[0][i], v.comp[0][i]) + detail::real_dot(u.comp[1][i], v.comp[1][i])));
  });
  return acc.value();
}

inline double inner_product(const SpectralVelocityField& u, const SpectralVelocityField& v, int order) {
  return inner_product(u.raw(), v.raw(), order);
}

// (sum_k |kappa|^(2m) |u_k|^2)^(1/2); m = 0 is the L^2 norm, m = 1 the H^1
// seminorm (a norm on mean-free fields), m = -1 the dual norm.
template <class Field>
double sobolev_norm(const Field& u, int order) {
  return std::sqrt(std::max(0.0, inner_product(u, u, order)));
}

template <class Field>
double l2_norm_sq(const Field& u) {
  return inner_product(u, u, 0);
}

inline double l2_distance_sq(const VectorCoefficients& a, const VectorCoefficients& b) {
  require_same_grid(a.grid, b.grid);
  CompensatedSum acc;
  for (int c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < a.comp[c].size(); ++i) acc.add(std::norm(a.comp[c][i] - b.comp[c][i]));
  return acc.value();
}
inline double l2_distance_sq(const SpectralVelocityField& a, const SpectralVelocityField& b) {
  return l2_distance_sq(a.raw(), b.raw());
}
inline double l2_distance_sq(const ScalarSpectralField& a, const ScalarSpectralField& b) {
  require_same_grid(a.grid, b.grid);
  CompensatedSum acc;
  for (std::size_t i = 0; i < a.coeffs.size(); ++i) acc.add(std::norm(a.coeffs[i] - b.coeffs[i]));
  return acc.value();
}

// ---------------------------------------------------------------------------
// Physical-space transforms. Two real fields travel through one complex
// transform as a + i b.

namespace detail {

inline int wrap(int k, int n) { return k < 0 ? k + n : k; }

inline std::size_t physical_size(const SpectralGrid& g, int n) {
  return g.dimension == 1 ? static_cast<std::size_t>(n) : static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
}

inline std::size_t buffer_index(const SpectralGrid& g, int n, int k1, int k2) {
  if (g.dimension == 1) return static_cast<std::size_t>(wrap(k1, n));
  return static_cast<std::size_t>(wrap(k1, n)) * static_cast<std::size_t>(n) + static_cast<std::size_t>(wrap(k2, n));
}

// Physical values a(x) + i b(x) on an n^d grid from spectral a, b, written
// into `buf`.
inline void pack_to_physical(const SpectralGrid& g, int n, const std::vector<Complex>& a, const std::vector<Complex>* b,
                             std::vector<Complex>& buf) {
  buf.assign(physical_size(g, n), Complex{});
  const Complex I{0.0, 1.0};
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    buf[buffer_index(g, n, k1, k2)] = b ? a[i] + I * (*b)[i] : a[i];
  });
  fft_inplace(buf, g.dimension, n, FftDirection::backward);
}

inline std::vector<Complex> pack_to_physical(const SpectralGrid& g, int n, const std::vector<Complex>& a,
                                             const std::vector<Complex>* b) {
  std::vector<Complex> buf;
  pack_to_physical(g, n, a, b, buf);
  return buf;
}

// Inverse of pack_to_physical: splits the transform of p(x) + i q(x) into the
// retained coefficients of p and q. Output is conjugate-symmetric bit-exactly.
// `buf` is overwritten.
inline void unpack_from_physical(const SpectralGrid& g, int n, std::vector<Complex>& buf, std::vector<Complex>& p,
                                 std::vector<Complex>* q) {
  fft_inplace(buf, g.dimension, n, FftDirection::forward);
  const double inv = 1.0 / static_cast<double>(physical_size(g, n));
  p.assign(g.size(), Complex{});
  if (q) q->assign(g.size(), Complex{});
  const Complex I{0.0, 1.0};
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const Complex z = buf[buffer_index(g, n, k1, k2)] * inv;
    const Complex zm = std::conj(buf[buffer_index(g, n, -k1, -k2)] * inv);
    p[i] = 0.5 * (z + zm);
    if (q) (*q)[i] = -0.5 * I * (z - zm);
  });
}

// Per-thread scratch for the padded grids, so the hot loop does not allocate.
struct PhysicalWorkspace {
  std::vector<Complex> a, b, c;
};

inline PhysicalWorkspace& workspace() {
  thread_local PhysicalWorkspace ws;
  return ws;
}

}  // namespace detail

// Real physical values of a scalar field on an n^d grid (row-major, axis 0 = x1).
inline std::vector<double> to_physical(const ScalarSpectralField& f, int n) {
  const auto buf = detail::pack_to_physical(f.grid, n, f.coeffs, nullptr);
  std::vector<double> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i].real();
  return out;
}

// Max |Im u(x)| over the grid for a scalar field; zero for a reality-symmetric
// field up to rounding.
inline double imaginary_residue(const ScalarSpectralField& f, int n) {
  const auto buf = detail::pack_to_physical(f.grid, n, f.coeffs, nullptr);
  double worst = 0.0;
  for (const auto& z : buf) worst = std::max(worst, std::abs(z.imag()));
  return worst;
}

inline ScalarSpectralField from_physical(const SpectralGrid& g, int n, const std::vector<double>& values) {
  if (values.size() != detail::physical_size(g, n)) throw DimensionError("physical array size mismatch");
  std::vector<Complex> buf(values.begin(), values.end());
  ScalarSpectralField out(g);
  detail::unpack_from_physical(g, n, buf, out.coeffs, nullptr);
  return out;
}

inline std::array<std::vector<double>, 2> to_physical(const VectorCoefficients& u, int n) {
  const auto buf = detail::pack_to_physical(u.grid, n, u.comp[0], &u.comp[1]);
  std::array<std::vector<double>, 2> out;
  out[0].resize(buf.size());
  out[1].resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out[0][i] = buf[i].real();
    out[1][i] = buf[i].imag();
  }
  return out;
}

inline VectorCoefficients vector_from_physical(const SpectralGrid& g, int n, const std::vector<double>& a,
                                               const std::vector<double>& b) {
  if (a.size() != detail::physical_size(g, n) || b.size() != a.size())
    throw DimensionError("physical array size mismatch");
  std::vector<Complex> buf(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) buf[i] = {a[i], b[i]};
  VectorCoefficients out(g);
  detail::unpack_from_physical(g, n, buf, out.comp[0], &out.comp[1]);
  return out;
}

// ---------------------------------------------------------------------------
// Linear operators

inline SpectralVelocityField stokes_apply(const SpectralVelocityField& u) {
  VectorCoefficients out = u.raw();
  const SpectralGrid& g = u.grid();
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const double s = -g.kappa_sq(k1, k2);
    out.comp[0][i] *= s;
    out.comp[1][i] *= s;
  });
  return leray_project(std::move(out));
}

enum class ScalarOp { laplacian, bilaplacian, dx, dx2, dx4 };

inline const char* to_string(ScalarOp op) {
  switch (op) {
    case ScalarOp::laplacian: return "laplacian";
    case ScalarOp::bilaplacian: return "bilaplacian";
    case ScalarOp::dx: return "dx";
    case ScalarOp::dx2: return "dx2";
    case ScalarOp::dx4: return "dx4";
  }
  return "?";
}

inline Complex scalar_symbol(const SpectralGrid& g, ScalarOp op, int k1, int k2) {
  const double ksq = g.kappa_sq(k1, k2);
  switch (op) {
    case ScalarOp::laplacian: return -ksq;
    case ScalarOp::bilaplacian: return ksq * ksq;
    case ScalarOp::dx: return Complex{0.0, g.scale() * k1};
    case ScalarOp::dx2: return -ksq;
    case ScalarOp::dx4: return ksq * ksq;
  }
  return 0.0;
}

inline ScalarSpectralField scalar_op_apply(const ScalarSpectralField& f, ScalarOp op) {
  const bool axial = op == ScalarOp::dx || op == ScalarOp::dx2 || op == ScalarOp::dx4;
  if (axial && f.grid.dimension != 1)
    throw UnsupportedOpError(std::string("operator ") + to_string(op) + " is defined for 1D fields only");
  ScalarSpectralField out = f;
  f.grid.for_each_mode([&](std::size_t i, int k1, int k2) { out.coeffs[i] *= scalar_symbol(f.grid, op, k1, k2); });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinear terms

// Leray-projected (u . grad) v, dealiased so every product of retained modes
// is computed exactly before truncation back to the retained set.
namespace detail {

// (u . grad) v on the retained modes, before the Leray projection.
inline VectorCoefficients convection(const SpectralVelocityField& u, const SpectralVelocityField& v) {
  require_same_grid(u.grid(), v.grid());
  const SpectralGrid& g = u.grid();
  const int n = dealiased_size(g.modes, 2);
  const Complex I{0.0, 1.0};
  std::array<std::array<std::vector<Complex>, 2>, 2> grad;  // grad[c][j] = d_j v_c
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < 2; ++j) grad[c][j].assign(g.size(), Complex{});
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const double kap[2] = {g.scale() * k1, g.scale() * k2};
    for (int c = 0; c < 2; ++c)
      for (int j = 0; j < 2; ++j) grad[c][j][i] = I * kap[j] * v.component(c)[i];
  });
  auto& ws = workspace();
  pack_to_physical(g, n, u.component(0), &u.component(1), ws.a);
  pack_to_physical(g, n, grad[0][0], &grad[0][1], ws.b);
  pack_to_physical(g, n, grad[1][0], &grad[1][1], ws.c);
  for (std::size_t p = 0; p < ws.a.size(); ++p) {
    const double a1 = ws.a[p].real(), a2 = ws.a[p].imag();
    const double w1 = a1 * ws.b[p].real() + a2 * ws.b[p].imag();
    const double w2 = a1 * ws.c[p].real() + a2 * ws.c[p].imag();
    ws.a[p] = {w1, w2};
  }
  VectorCoefficients out(g);
  unpack_from_physical(g, n, ws.a, out.comp[0], &out.comp[1]);
  return out;
}

}  // namespace detail

inline SpectralVelocityField bilinear_B(const SpectralVelocityField& u, const SpectralVelocityField& v) {
  return leray_project(detail::convection(u, v));
}

inline SpectralVelocityField bilinear_B(const SpectralVelocityField& u) { return bilinear_B(u, u); }

// Polynomial c0 + c1 x + ... + cp x^p.
struct Polynomial {
  std::vector<double> coeffs;

  int degree() const {
    for (int d = static_cast<int>(coeffs.size()) - 1; d >= 0; --d)
      if (coeffs[static_cast<std::size_t>(d)] != 0.0) return d;
    return 0;
  }
  double operator()(double x) const {
    double acc = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * x + *it;
    return acc;
  }
  double derivative(double x) const {
    double acc = 0.0;
    for (std::size_t d = coeffs.size(); d-- > 1;) acc = acc * x + static_cast<double>(d) * coeffs[d];
    return acc;
  }
  bool operator==(const Polynomial&) const = default;

  // Derivative of the double-well potential: x^3 - x.
  static Polynomial double_well() { return Polynomial{{0.0, -1.0, 0.0, 1.0}}; }
};

// Admissible polynomial degree for phi: (d + 4) / d from the Cahn-Hilliard
// growth condition, i.e. 5 in one dimension and 3 in two.
inline int max_phi_degree(int dimension) { return dimension == 1 ? 5 : 3; }

inline void validate_phi(const Polynomial& phi, int dimension) {
  if (phi.degree() > max_phi_degree(dimension))
    throw ConfigError("phi has degree " + std::to_string(phi.degree()) + ", above the admissible bound " +
                      std::to_string(max_phi_degree(dimension)) + " for dimension " + std::to_string(dimension));
}

// phi(u) evaluated pointwise on a grid fine enough that the degree-p product
// is alias-free on the retained modes, then truncated.
inline ScalarSpectralField nonlinearity_phi(const ScalarSpectralField& f, const Polynomial& phi) {
  validate_phi(phi, f.grid.dimension);
  const int p = phi.degree();
  if (p <= 1) {
    const double c0 = phi.coeffs.empty() ? 0.0 : phi.coeffs[0];
    const double c1 = phi.coeffs.size() > 1 ? phi.coeffs[1] : 0.0;
    ScalarSpectralField out = f;
    if (c1 != 1.0) out *= c1;
    if (c0 != 0.0) out.at(0, 0) += c0;
    return out;
  }
  const int n = dealiased_size(f.grid.modes, p);
  auto& buf = detail::workspace().a;
  detail::pack_to_physical(f.grid, n, f.coeffs, nullptr, buf);
  for (auto& z : buf) z = phi(z.real());
  ScalarSpectralField out(f.grid);
  detail::unpack_from_physical(f.grid, n, buf, out.coeffs, nullptr);
  return out;
}

// Burgers term u du/dx for 1D fields.
inline ScalarSpectralField burgers_term(const ScalarSpectralField& u) {
  if (u.grid.dimension != 1) throw UnsupportedOpError("burgers term is defined for 1D fields only");
  const ScalarSpectralField ux = scalar_op_apply(u, ScalarOp::dx);
  const int n = dealiased_size(u.grid.modes, 2);
  auto& buf = detail::workspace().a;
  detail::pack_to_physical(u.grid, n, u.coeffs, &ux.coeffs, buf);
  for (auto& z : buf) z = z.real() * z.imag();
  ScalarSpectralField out(u.grid);
  detail::unpack_from_physical(u.grid, n, buf, out.coeffs, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Random fields for samplers and tests. Amplitudes decay like |k|^-decay
// (|k| in integer wavenumbers) and are zero above `max_mode` (sup norm).

inline VectorCoefficients random_vector_coefficients(const SpectralGrid& g, SequentialRng& rng, double decay,
                                                     int max_mode, double amplitude = 1.0) {
  VectorCoefficients raw(g);
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const bool upper = k1 > 0 || (k1 == 0 && k2 > 0);
    if (!upper || std::max(std::abs(k1), std::abs(k2)) > max_mode) return;
    const double a = amplitude * std::pow(std::sqrt(static_cast<double>(k1 * k1 + k2 * k2)), -decay);
    for (int c = 0; c < 2; ++c) {
      const Complex z{a * rng.normal(), a * rng.normal()};
      raw.comp[c][i] = z;
      raw.comp[c][g.index(-k1, -k2)] = std::conj(z);
    }
  });
  return raw;
}

inline SpectralVelocityField random_velocity_field(const SpectralGrid& g, SequentialRng& rng, double decay,
                                                   int max_mode, double amplitude = 1.0) {
  return leray_project(random_vector_coefficients(g, rng, decay, max_mode, amplitude));
}

inline ScalarSpectralField random_scalar_field(const SpectralGrid& g, SequentialRng& rng, double decay, int max_mode,
                                               double amplitude = 1.0, bool with_mean = false) {
  ScalarSpectralField f(g);
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    if (k1 == 0 && k2 == 0) {
      if (with_mean) f.coeffs[i] = amplitude * rng.normal();
      return;
    }
    const bool upper = k1 > 0 || (k1 == 0 && k2 > 0);
    if (!upper || std::max(std::abs(k1), std::abs(k2)) > max_mode) return;
    const double a = amplitude * std::pow(std::sqrt(static_cast<double>(k1 * k1 + k2 * k2)), -decay);
    const Complex z{a * rng.normal(), a * rng.normal()};
    f.coeffs[i] = z;
    f.coeffs[g.index(-k1, -k2)] = std::conj(z);
  });
  return f;
}

// Embeds a field into a grid with at least as many modes (zero padding) or
// truncates to fewer modes.
inline ScalarSpectralField resample(const ScalarSpectralField& f, int modes) {
  SpectralGrid g = f.grid;
  g.modes = modes;
  ScalarSpectralField out(g);
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    if (std::abs(k1) <= f.grid.modes && std::abs(k2) <= f.grid.modes) out.coeffs[i] = f.at(k1, k2);
  });
  return out;
}

inline SpectralVelocityField resample(const SpectralVelocityField& f, int modes) {
  SpectralGrid g = f.grid();
  g.modes = modes;
  VectorCoefficients out(g);
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    if (std::abs(k1) <= f.grid().modes && std::abs(k2) <= f.grid().modes) {
      out.comp[0][i] = f.at(0, k1, k2);
      out.comp[1][i] = f.at(1, k1, k2);
    }
  });
  return leray_project(std::move(out));
}

}  // namespace mvlab
