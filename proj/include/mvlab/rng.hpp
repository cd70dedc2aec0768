#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (stream key, counter), so results do not depend on which thread asks or in
// which order. Philox4x32-10 (Salmon et al., SC'11) with the published
// multipliers and Weyl constants.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "mvlab/core.hpp"

namespace mvlab {

using PhiloxCounter = std::array<std::uint32_t, 4>;

inline PhiloxCounter philox4x32(PhiloxCounter ctr, std::uint64_t key64) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  std::uint32_t k0 = static_cast<std::uint32_t>(key64);
  std::uint32_t k1 = static_cast<std::uint32_t>(key64 >> 32);
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return ctr;
}

// 53-bit uniform in the open interval (0, 1).
inline double u64_to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// A keyed stream. draw(a, b, c) is addressable: the same (key, a, b, c) always
// yields the same pair of standard normals.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t key() const { return key_; }

  std::array<double, 2> uniform2(std::uint64_t a, std::uint32_t b, std::uint32_t c = 0) const {
    const auto out = philox4x32({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), b, c}, key_);
    const std::uint64_t w0 = (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
    const std::uint64_t w1 = (static_cast<std::uint64_t>(out[2]) << 32) | out[3];
    return {u64_to_open_unit(w0), u64_to_open_unit(w1)};
  }

  // Box-Muller on one Philox block.
  std::array<double, 2> normal2(std::uint64_t a, std::uint32_t b, std::uint32_t c = 0) const {
    const auto [u1, u2] = uniform2(a, b, c);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(theta), r * std::sin(theta)};
  }

 private:
  std::uint64_t key_;
};

// Sequential convenience wrapper for places where draw order is fixed by the
// caller (samplers, subsampling).
class SequentialRng {
 public:
  explicit SequentialRng(std::uint64_t key) : rng_(key) {}

  double uniform() {
    if (!have_uniform_) {
      pending_uniform_ = rng_.uniform2(counter_++, 0x55u);
      have_uniform_ = true;
      return pending_uniform_[0];
    }
    have_uniform_ = false;
    return pending_uniform_[1];
  }

  double normal() {
    if (!have_normal_) {
      pending_normal_ = rng_.normal2(counter_++, 0xAAu);
      have_normal_ = true;
      return pending_normal_[0];
    }
    have_normal_ = false;
    return pending_normal_[1];
  }

  // Uniform integer in [0, n), n > 0.
  std::uint64_t below(std::uint64_t n) {
    const double u = uniform();
    const auto v = static_cast<std::uint64_t>(u * static_cast<double>(n));
    return v >= n ? n - 1 : v;
  }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
  std::array<double, 2> pending_uniform_{};
  std::array<double, 2> pending_normal_{};
  bool have_uniform_ = false;
  bool have_normal_ = false;
};

}  // namespace mvlab
