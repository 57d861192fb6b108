#pragma once

// Seeded value generator for property tests and random workloads.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace nnscene::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::uint64_t u64() { return rng_(); }
  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(rng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * (static_cast<double>(rng_() >> 11) * 0x1.0p-53);
  }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  bool coin(double p = 0.5) { return uniform() < p; }
  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(integer(0, static_cast<std::int64_t>(v.size()) - 1))];
  }

  std::vector<float> gaussian_floats(std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(normal());
    return v;
  }
  /// `rows` unit vectors of length `dim`.
  std::vector<float> unit_rows(std::size_t rows, std::size_t dim) {
    std::vector<float> v = gaussian_floats(rows * dim);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < dim; ++i) s += double(v[r * dim + i]) * v[r * dim + i];
      const double inv = 1.0 / std::sqrt(s);
      for (std::size_t i = 0; i < dim; ++i) v[r * dim + i] = static_cast<float>(v[r * dim + i] * inv);
    }
    return v;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace nnscene::testing
