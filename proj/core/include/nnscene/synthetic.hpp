#pragma once

// Deterministic synthetic scenes used as a stand-in for encoder output.

#include <cstdint>
#include <vector>

#include "nnscene/feature_store.hpp"

namespace nnscene {

enum class SceneLayout {
  /// Horizontal or vertical bands of classes (one orientation per image).
  kStripes,
  /// Nearest-seed regions; produces convex corners between classes.
  kVoronoi,
};

struct SyntheticSceneOptions {
  std::uint32_t num_images = 8;
  std::uint32_t height = 8;  // patches
  std::uint32_t width = 8;   // patches
  std::uint32_t dim = 64;
  std::uint32_t num_classes = 4;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  /// Every epoch redraws the feature noise over the same scenes.
  std::uint32_t num_epochs = 1;
  Task task = Task::kSegmentation;
  SceneLayout layout = SceneLayout::kStripes;
  /// Probability that a band/region is IGNORE instead of a class.
  double ignore_probability = 0.0;
  std::uint64_t first_image_id = 0;
  /// Shared across seeds so prompt and query sets live in the same space.
  std::uint64_t prototype_seed = 0x9e3779b97f4a7c15ull;
};

/// num_classes orthonormal unit rows of length dim (row-major). Requires
/// num_classes <= dim.
std::vector<float> class_prototypes(std::uint32_t dim, std::uint32_t num_classes,
                                    std::uint64_t prototype_seed);

/// Segmentation set: each patch feature is
/// normalize(prototype[class] + N(0, noise_sigma^2) per dimension); pixel
/// labels are constant inside a patch. The depth variant maps a smooth
/// per-image depth field onto an arc between two prototypes and leaves a
/// random rectangle of pixels invalid in some images. Throws ConfigError
/// when num_classes > dim.
FeatureSet generate_synthetic_scenes(const SyntheticSceneOptions& options);

FeatureSet generate_synthetic_scene_set(std::uint32_t num_images, std::uint32_t height,
                                        std::uint32_t width, std::uint32_t dim,
                                        std::uint32_t num_classes, double noise_sigma,
                                        std::uint64_t seed);

/// Per-patch class ids of a synthetic segmentation image (kIgnoreClass for
/// ignored patches), read back from its pixel labels.
std::vector<std::uint16_t> patch_classes(const LabeledImage& image, std::uint32_t patch_size = kPatchSize);

/// Unit vectors drawn from a mixture of `num_clusters` von-Mises-like blobs:
/// normalize(center + N(0, spread^2 / dim)). Used for index benchmarks.
std::vector<float> clustered_unit_vectors(std::size_t count, std::uint32_t dim,
                                          std::size_t num_clusters, double spread,
                                          std::uint64_t seed, std::uint64_t center_seed);

}  // namespace nnscene
