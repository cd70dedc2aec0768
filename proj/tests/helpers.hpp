#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "mvlab/spectral.hpp"

namespace testing_helpers {

using mvlab::Complex;
using mvlab::SpectralGrid;

inline SpectralGrid grid2(int modes, double length = 2.0 * M_PI) { return SpectralGrid{modes, length, 2}; }
inline SpectralGrid grid1(int modes, double length = 2.0 * M_PI) { return SpectralGrid{modes, length, 1}; }

// Random velocity field built with std::mt19937_64, independent of the
// library's samplers. Coefficients on |k|_inf <= max_mode.
inline mvlab::SpectralVelocityField velocity(const SpectralGrid& g, std::mt19937_64& gen, int max_mode,
                                             double decay = 1.0) {
  std::normal_distribution<double> n01;
  mvlab::VectorCoefficients raw(g);
  for (int k1 = -g.modes; k1 <= g.modes; ++k1)
    for (int k2 = -g.modes; k2 <= g.modes; ++k2) {
      if (!(k1 > 0 || (k1 == 0 && k2 > 0))) continue;
      if (std::max(std::abs(k1), std::abs(k2)) > max_mode) continue;
      const double a = std::pow(static_cast<double>(k1 * k1 + k2 * k2), -decay / 2.0);
      for (int c = 0; c < 2; ++c) {
        const Complex z{a * n01(gen), a * n01(gen)};
        raw.comp[c][g.index(k1, k2)] = z;
        raw.comp[c][g.index(-k1, -k2)] = std::conj(z);
      }
    }
  return mvlab::leray_project(std::move(raw));
}

inline mvlab::ScalarSpectralField scalar(const SpectralGrid& g, std::mt19937_64& gen, int max_mode,
                                         double decay = 1.0, bool mean = false) {
  std::normal_distribution<double> n01;
  mvlab::ScalarSpectralField f(g);
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    if (k1 == 0 && k2 == 0) {
      if (mean) f.coeffs[i] = n01(gen);
      return;
    }
    if (!(k1 > 0 || (k1 == 0 && k2 > 0))) return;
    if (std::max(std::abs(k1), std::abs(k2)) > max_mode) return;
    const double a = std::pow(static_cast<double>(k1 * k1 + k2 * k2), -decay / 2.0);
    f.coeffs[i] = Complex{a * n01(gen), a * n01(gen)};
    f.coeffs[g.index(-k1, -k2)] = std::conj(f.coeffs[i]);
  });
  return f;
}

// Value of sum_k c_k e^{i kappa.x} at x by direct summation.
inline Complex evaluate(const SpectralGrid& g, const std::vector<Complex>& c, double x1, double x2 = 0.0) {
  Complex acc{};
  g.for_each_mode([&](std::size_t i, int k1, int k2) {
    const double phase = g.scale() * (k1 * x1 + k2 * x2);
    acc += c[i] * Complex{std::cos(phase), std::sin(phase)};
  });
  return acc;
}

// Unprojected (u . grad) v on the retained modes by direct convolution
// over all pairs p + q = k.
inline mvlab::VectorCoefficients convolution_convection(const mvlab::SpectralVelocityField& u,
                                                        const mvlab::SpectralVelocityField& v) {
  const SpectralGrid& g = u.grid();
  mvlab::VectorCoefficients out(g);
  const int m = g.modes;
  const Complex I{0.0, 1.0};
  for (int p1 = -m; p1 <= m; ++p1)
    for (int p2 = -m; p2 <= m; ++p2)
      for (int q1 = -m; q1 <= m; ++q1)
        for (int q2 = -m; q2 <= m; ++q2) {
          const int k1 = p1 + q1, k2 = p2 + q2;
          if (std::abs(k1) > m || std::abs(k2) > m) continue;
          const Complex adv = u.at(0, p1, p2) * (I * g.scale() * double(q1)) +
                              u.at(1, p1, p2) * (I * g.scale() * double(q2));
          for (int c = 0; c < 2; ++c) out.comp[c][g.index(k1, k2)] += adv * v.at(c, q1, q2);
        }
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mvlab_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_helpers
