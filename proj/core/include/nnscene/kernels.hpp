#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace nnscene {

/// Inner product with a fixed 8-lane accumulation order. Every scoring path
/// (exact scan, reordering, k-means) goes through this function so equal
/// inputs give bit-identical scores.
inline float dot(const float* a, const float* b, std::size_t n) noexcept {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

inline float dot(std::span<const float> a, std::span<const float> b) noexcept {
  return dot(a.data(), b.data(), a.size());
}

inline float squared_l2(const float* a, const float* b, std::size_t n) noexcept {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

/// L2 norm accumulated in double.
inline double l2_norm(std::span<const float> v) noexcept {
  double s = 0.0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

/// Writes v / ||v|| into out; returns false (out untouched) for a zero vector.
inline bool normalize_to(std::span<const float> v, std::span<float> out) noexcept {
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) return false;
  const double inv = 1.0 / n;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return true;
}

}  // namespace nnscene
