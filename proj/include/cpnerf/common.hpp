#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace cpnerf {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

[[noreturn]] inline void fail_numeric(const std::string& msg) {
  throw std::runtime_error(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. One generator per consumer, seeded by mixing a base seed
// with a stream id, so adding a consumer never shifts another's stream.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x51AF'3C1Dull));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() { return uniform_(gen_); }                  // [0,1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(gen_); }
  double normal(double mean, double std) { return mean + std * normal(); }
  // [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }
  uint64_t next_u64() { return gen_(); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Thread control. parallel_for partitions [0,n) by index; every index is
// processed by exactly one worker with a fixed inner order, so results do not
// depend on the thread count. Safe to call from multiple threads at once
// (each call runs serial in that case, OpenMP regions do not nest here).
// ---------------------------------------------------------------------------

namespace detail {
inline int& thread_count_ref() {
  static int n = 0;  // 0 = uninitialized -> hardware_concurrency
  return n;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_count_ref() = n > 0 ? n : 1; }

inline int num_threads() {
  int n = detail::thread_count_ref();
  if (n <= 0) {
    unsigned hc = std::thread::hardware_concurrency();
    n = hc > 0 ? static_cast<int>(hc) : 1;
    detail::thread_count_ref() = n;
  }
  return n;
}

template <typename Fn>
inline void parallel_for(int64_t n, Fn&& fn, int64_t grain = 1024) {
  if (n <= 0) return;
  int threads = num_threads();
#if defined(_OPENMP)
  bool nested = omp_in_parallel();
#else
  bool nested = false;
#endif
  if (threads <= 1 || n < 2 * grain || nested) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(threads)
  for (int64_t i = 0; i < n; ++i) fn(i);
#else
  for (int64_t i = 0; i < n; ++i) fn(i);
#endif
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

inline double sqr(double x) { return x * x; }

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// Standard normal CDF.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse standard normal CDF (Acklam's rational approximation plus one
// Halley polish step; ~1e-15 relative accuracy over (0,1)).
inline double norm_cdf_inv(double p) {
  check(p > 0.0 && p < 1.0, "norm_cdf_inv: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= phigh) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley step against erfc
  double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace cpnerf
