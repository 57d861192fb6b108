#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nnscene/random.hpp"

namespace nnscene {

enum class KMeansMetric {
  /// Centroids renormalized to unit length, assignment by largest inner product.
  kSpherical,
  /// Plain Lloyd iterations under squared L2.
  kEuclidean,
};

struct KMeansOptions {
  std::uint32_t k = 16;
  std::uint32_t iterations = 10;
  KMeansMetric metric = KMeansMetric::kEuclidean;
  std::size_t threads = 1;
};

/// k-means++ seeding followed by Lloyd iterations over `n` row-major points
/// of `dim` floats. Returns k x dim centroids. When the data has fewer than k
/// distinct points the surplus centroids duplicate existing ones. Empty
/// clusters are re-seeded from the points farthest from their centroid.
std::vector<float> kmeans(std::span<const float> points, std::size_t n, std::uint32_t dim,
                          const KMeansOptions& options, Rng& rng);

/// Index of the best centroid per point (largest dot for kSpherical, smallest
/// squared L2 otherwise); ties go to the lower centroid index.
std::vector<std::uint32_t> assign_to_centroids(std::span<const float> points, std::size_t n,
                                               std::uint32_t dim, std::span<const float> centroids,
                                               std::uint32_t k, KMeansMetric metric,
                                               std::size_t threads = 1);

}  // namespace nnscene
