#pragma once

// Thin FFTW wrapper. Plans are created once per (rank, size, direction) under a
// mutex and executed with the new-array interface, which FFTW documents as
// thread-safe. FFTW_UNALIGNED keeps the chosen codelets independent of buffer
// alignment so identical inputs give identical bits on every call.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "mvlab/core.hpp"

namespace mvlab {

using Complex = std::complex<double>;

enum class FftDirection { forward, backward };

namespace detail {

class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int rank, int n, FftDirection dir) {
    const auto key = std::make_tuple(rank, n, dir);
    std::lock_guard lock(mutex_);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    const std::size_t total = rank == 1 ? static_cast<std::size_t>(n)
                                        : static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
    std::vector<Complex> scratch(total);
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    const int sign = dir == FftDirection::forward ? FFTW_FORWARD : FFTW_BACKWARD;
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = rank == 1 ? fftw_plan_dft_1d(n, buf, buf, sign, flags)
                               : fftw_plan_dft_2d(n, n, buf, buf, sign, flags);
    if (plan == nullptr) throw Error("FFTW failed to create a plan");
    plans_.emplace(key, plan);
    return plan;
  }

  PlanCache(const PlanCache&) = delete;
  PlanCache& operator=(const PlanCache&) = delete;

 private:
  PlanCache() = default;
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  std::mutex mutex_;
  std::map<std::tuple<int, int, FftDirection>, fftw_plan> plans_;
};

}  // namespace detail

// In-place unnormalized transform of an n (rank 1) or n x n (rank 2,
// row-major) array. Forward uses exp(-i k x), backward exp(+i k x).
inline void fft_inplace(std::vector<Complex>& data, int rank, int n, FftDirection dir) {
  const std::size_t expected = rank == 1 ? static_cast<std::size_t>(n)
                                         : static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  if (data.size() != expected) throw DimensionError("fft buffer size does not match plan");
  fftw_plan plan = detail::PlanCache::instance().get(rank, n, dir);
  auto* buf = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(plan, buf, buf);
}

// Smallest n >= minimum whose only prime factors are 2, 3 and 5.
inline int fft_friendly_size(int minimum) {
  for (int n = std::max(minimum, 1);; ++n) {
    int m = n;
    for (int p : {2, 3, 5})
      while (m % p == 0) m /= p;
    if (m == 1) return n;
  }
}

}  // namespace mvlab
