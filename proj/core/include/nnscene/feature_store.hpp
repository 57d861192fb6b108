#pragma once

// Feature grids, pixel labels, per-patch labels and the HBFS feature-set file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace nnscene {

enum class Task : std::uint8_t { kSegmentation = 0, kDepth = 1 };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);

inline constexpr std::uint32_t kPatchSize = 16;
inline constexpr std::uint16_t kIgnoreClass = 0xFFFF;

/// Shape of a per-patch label vector.
///   segmentation: [hist_0 .. hist_{C-1}, ignore_fraction]
///   depth:        [mean_depth, valid_fraction]
struct LabelSpec {
  Task task = Task::kSegmentation;
  std::uint32_t num_classes = 0;

  std::size_t channels() const noexcept {
    return task == Task::kSegmentation ? std::size_t{num_classes} + 1 : std::size_t{2};
  }
  bool operator==(const LabelSpec&) const = default;
};

/// H x W grid of D-dimensional patch features, raster order.
struct FeatureGrid {
  std::uint64_t image_id = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t dim = 0;
  std::vector<float> features;

  std::size_t num_patches() const noexcept { return std::size_t{height} * width; }
  std::span<const float> row(std::size_t patch) const {
    return {features.data() + patch * dim, dim};
  }
  /// Throws ShapeError / Error when sizes disagree or a value is not finite.
  void validate() const;
  bool operator==(const FeatureGrid&) const = default;
};

/// Ground truth at pixel resolution. Segmentation uses `classes`
/// (kIgnoreClass allowed); depth uses `depth` + `valid` (0/1 per pixel).
struct PixelLabels {
  Task task = Task::kSegmentation;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint16_t> classes;
  std::vector<float> depth;
  std::vector<std::uint8_t> valid;

  static PixelLabels segmentation(std::uint32_t height, std::uint32_t width,
                                  std::vector<std::uint16_t> classes);
  static PixelLabels depth_map(std::uint32_t height, std::uint32_t width,
                               std::vector<float> depth, std::vector<std::uint8_t> valid);

  std::size_t num_pixels() const noexcept { return std::size_t{height} * width; }
  void validate(std::uint32_t num_classes) const;
  bool operator==(const PixelLabels&) const = default;
};

/// Label of one feature-grid location: the average of its pixel labels.
class PatchLabel {
 public:
  PatchLabel() = default;
  static PatchLabel segmentation(std::vector<float> histogram, float ignore_fraction);
  static PatchLabel depth(float mean_depth, float valid_fraction);
  static PatchLabel from_channels(const LabelSpec& spec, std::span<const float> channels);

  Task task() const noexcept { return task_; }
  std::span<const float> channels() const noexcept { return channels_; }
  std::span<const float> histogram() const;
  float ignore_fraction() const;
  float mean_depth() const;
  float valid_fraction() const;

  bool operator==(const PatchLabel&) const = default;

 private:
  Task task_ = Task::kSegmentation;
  std::vector<float> channels_;
};

/// Flat H x W grid of patch labels, channel layout per LabelSpec.
struct PatchLabelGrid {
  LabelSpec spec;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> data;

  PatchLabelGrid() = default;
  PatchLabelGrid(LabelSpec spec, std::uint32_t height, std::uint32_t width);

  std::size_t size() const noexcept { return std::size_t{height} * width; }
  std::span<const float> channels(std::size_t patch) const {
    return {data.data() + patch * spec.channels(), spec.channels()};
  }
  std::span<float> channels(std::size_t patch) {
    return {data.data() + patch * spec.channels(), spec.channels()};
  }
  PatchLabel label(std::size_t patch) const { return PatchLabel::from_channels(spec, channels(patch)); }
};

/// Averages each patch_size x patch_size pixel block into a PatchLabel.
/// Segmentation averages one-hot vectors, IGNORE pixels go to ignore_fraction;
/// depth averages valid pixels and records the valid fraction (mean 0 when
/// no pixel is valid). Throws ShapeError unless labels are exactly
/// (patch_size*H) x (patch_size*W).
PatchLabelGrid patchify_labels(const PixelLabels& labels, std::uint32_t height,
                               std::uint32_t width, std::uint32_t num_classes,
                               std::uint32_t patch_size = kPatchSize);

struct LabeledImage {
  FeatureGrid grid;
  PixelLabels labels;
  bool operator==(const LabeledImage&) const = default;
};

/// Annotated prompt: one collection of images per augmentation epoch. All
/// epochs hold the same number of images.
struct FeatureSet {
  Task task = Task::kSegmentation;
  std::uint32_t num_classes = 0;  // 0 for depth
  std::uint32_t dim = 0;
  std::uint32_t patch_size = kPatchSize;
  std::vector<std::vector<LabeledImage>> epochs;

  std::size_t num_epochs() const noexcept { return epochs.size(); }
  std::size_t num_images() const noexcept { return epochs.empty() ? 0 : epochs.front().size(); }
  LabelSpec label_spec() const { return {task, task == Task::kSegmentation ? num_classes : 0}; }
  void validate() const;
  bool operator==(const FeatureSet&) const = default;
};

inline constexpr std::string_view kFeatureSetMagic = "HBFS0001";
inline constexpr std::uint32_t kFeatureSetVersion = 1;

std::vector<std::uint8_t> encode_feature_set(const FeatureSet& set);
/// Throws ParseError (with offset) on bad magic, version mismatch, truncation
/// or trailing bytes. Never returns a partial set.
FeatureSet decode_feature_set(std::span<const std::uint8_t> bytes);

void write_feature_set(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet read_feature_set(const std::filesystem::path& path);

}  // namespace nnscene
