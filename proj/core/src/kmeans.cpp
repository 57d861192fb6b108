#include "nnscene/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nnscene/errors.hpp"
#include "nnscene/kernels.hpp"
#include "nnscene/parallel.hpp"

namespace nnscene {
namespace {

// Distance used for seeding and re-seeding; for unit vectors squared L2 is
// 2 - 2 * dot, so one definition serves both metrics.
float point_distance(const float* a, const float* b, std::uint32_t dim) { return squared_l2(a, b, dim); }

void renormalize(std::span<float> c) {
  double n2 = 0.0;
  for (float x : c) n2 += double(x) * x;
  if (n2 <= 0.0) return;
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& x : c) x = static_cast<float>(x * inv);
}

}  // namespace

std::vector<std::uint32_t> assign_to_centroids(std::span<const float> points, std::size_t n,
                                               std::uint32_t dim, std::span<const float> centroids,
                                               std::uint32_t k, KMeansMetric metric,
                                               std::size_t threads) {
  std::vector<std::uint32_t> out(n);
  constexpr std::size_t kChunk = 1024;
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(
      chunks,
      [&](std::size_t chunk) {
        const std::size_t lo = chunk * kChunk, hi = std::min(n, lo + kChunk);
        for (std::size_t i = lo; i < hi; ++i) {
          const float* p = points.data() + i * dim;
          std::uint32_t best = 0;
          if (metric == KMeansMetric::kSpherical) {
            float best_score = -std::numeric_limits<float>::infinity();
            for (std::uint32_t c = 0; c < k; ++c) {
              const float s = dot(p, centroids.data() + std::size_t{c} * dim, dim);
              if (s > best_score) {
                best_score = s;
                best = c;
              }
            }
          } else {
            float best_d = std::numeric_limits<float>::infinity();
            for (std::uint32_t c = 0; c < k; ++c) {
              const float d = squared_l2(p, centroids.data() + std::size_t{c} * dim, dim);
              if (d < best_d) {
                best_d = d;
                best = c;
              }
            }
          }
          out[i] = best;
        }
      },
      threads);
  return out;
}

std::vector<float> kmeans(std::span<const float> points, std::size_t n, std::uint32_t dim,
                          const KMeansOptions& options, Rng& rng) {
  const std::uint32_t k = options.k;
  if (n == 0 || k == 0) throw ConfigError("k-means needs at least one point and one centroid");
  if (points.size() != n * dim) throw ShapeError("k-means point buffer size mismatch");
  std::vector<float> centroids(std::size_t{k} * dim);

  // k-means++ seeding.
  std::vector<float> d2(n, std::numeric_limits<float>::infinity());
  std::size_t first = rng() % n;
  std::copy_n(points.data() + first * dim, dim, centroids.data());
  for (std::uint32_t c = 1; c < k; ++c) {
    const float* prev = centroids.data() + std::size_t{c - 1} * dim;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], point_distance(points.data() + i * dim, prev, dim));
      total += d2[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double target = uniform01(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0 && d2[i] > 0.0f) {
          pick = i;
          break;
        }
      }
      // Rounding can run past the end; fall back to the last point with mass.
      if (d2[pick] == 0.0f) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0f) {
            pick = i;
            break;
          }
        }
      }
    } else {
      pick = rng() % n;
    }
    std::copy_n(points.data() + pick * dim, dim, centroids.data() + std::size_t{c} * dim);
  }
  if (options.metric == KMeansMetric::kSpherical) {
    for (std::uint32_t c = 0; c < k; ++c) renormalize({centroids.data() + std::size_t{c} * dim, dim});
  }

  std::vector<double> sums(std::size_t{k} * dim);
  std::vector<std::size_t> counts(k);
  for (std::uint32_t it = 0; it < options.iterations; ++it) {
    const auto assign = assign_to_centroids(points, n, dim, centroids, k, options.metric, options.threads);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = points.data() + i * dim;
      double* s = sums.data() + std::size_t{assign[i]} * dim;
      for (std::uint32_t d = 0; d < dim; ++d) s[d] += p[d];
      ++counts[assign[i]];
    }

    std::vector<std::uint32_t> empty;
    for (std::uint32_t c = 0; c < k; ++c) {
      float* dst = centroids.data() + std::size_t{c} * dim;
      if (counts[c] == 0) {
        empty.push_back(c);
        continue;
      }
      for (std::uint32_t d = 0; d < dim; ++d) dst[d] = static_cast<float>(sums[std::size_t{c} * dim + d] / counts[c]);
      if (options.metric == KMeansMetric::kSpherical) renormalize({dst, dim});
    }
    if (!empty.empty()) {
      std::vector<std::pair<float, std::size_t>> far(n);
      for (std::size_t i = 0; i < n; ++i) {
        far[i] = {point_distance(points.data() + i * dim, centroids.data() + std::size_t{assign[i]} * dim, dim), i};
      }
      const std::size_t take = std::min(empty.size(), n);
      std::partial_sort(far.begin(), far.begin() + static_cast<std::ptrdiff_t>(take), far.end(),
                        [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      for (std::size_t e = 0; e < empty.size(); ++e) {
        const std::size_t src = far[e % take].second;
        std::copy_n(points.data() + src * dim, dim, centroids.data() + std::size_t{empty[e]} * dim);
        if (options.metric == KMeansMetric::kSpherical) renormalize({centroids.data() + std::size_t{empty[e]} * dim, dim});
      }
    }
  }
  return centroids;
}

}  // namespace nnscene
