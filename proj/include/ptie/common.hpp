#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ptie {

// ----------------------------- errors -----------------------------
// One exception family; the CLI maps them onto its exit codes.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct VocabError : DataError {
  using DataError::DataError;
};

struct NumericError : Error {
  using Error::Error;
};

struct ShapeError : NumericError {
  using NumericError::NumericError;
};

// ----------------------------- rng -----------------------------
// mt19937_64 with hand-rolled distributions. std:: distributions are
// implementation-defined, which would break run reproducibility across
// toolchains.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t below(int64_t n) {
    return static_cast<int64_t>((static_cast<__uint128_t>(gen_()) *
                                 static_cast<__uint128_t>(n)) >>
                                64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    const double u = uniform() * 6.283185307179586476925286766559;
    const double r = std::sqrt(-2.0 * std::log(1.0 - uniform()));
    spare_ = std::sin(u) * r;
    has_spare_ = true;
    return mean + stddev * std::cos(u) * r;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[below(i + 1)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Splits a seed into independent sub-streams (model init, shuffling, ...).
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// ----------------------------- threading -----------------------------

inline int hardware_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

// Static partition over [0, n). Callers must write disjoint outputs; with
// that, results are identical for any thread count.
template <class F>
void parallel_for(int64_t n, F&& fn, int64_t grain = 1) {
  if (n <= 0) return;
#ifdef _OPENMP
  if (n >= 2 * grain && omp_get_max_threads() > 1 && !omp_in_parallel()) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  (void)grain;
  for (int64_t i = 0; i < n; ++i) fn(i);
}

// ----------------------------- misc -----------------------------

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace ptie
