#include "nnscene/feature_store.hpp"

#include <cmath>
#include <string>

#include "nnscene/binary_io.hpp"
#include "nnscene/errors.hpp"

namespace nnscene {

std::string_view to_string(Task task) {
  return task == Task::kSegmentation ? "segmentation" : "depth";
}

Task parse_task(std::string_view name) {
  if (name == "segmentation" || name == "seg") return Task::kSegmentation;
  if (name == "depth") return Task::kDepth;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected segmentation|depth)");
}

void FeatureGrid::validate() const {
  if (height == 0 || width == 0 || dim == 0) {
    throw ShapeError("feature grid " + std::to_string(image_id) + " has a zero dimension");
  }
  if (features.size() != num_patches() * dim) {
    throw ShapeError("feature grid " + std::to_string(image_id) + ": expected " +
                     std::to_string(num_patches() * dim) + " values, got " +
                     std::to_string(features.size()));
  }
  for (float v : features) {
    if (!std::isfinite(v)) {
      throw Error("feature grid " + std::to_string(image_id) + " contains a non-finite value");
    }
  }
}

PixelLabels PixelLabels::segmentation(std::uint32_t height, std::uint32_t width,
                                      std::vector<std::uint16_t> classes) {
  PixelLabels out;
  out.task = Task::kSegmentation;
  out.height = height;
  out.width = width;
  out.classes = std::move(classes);
  return out;
}

PixelLabels PixelLabels::depth_map(std::uint32_t height, std::uint32_t width,
                                   std::vector<float> depth, std::vector<std::uint8_t> valid) {
  PixelLabels out;
  out.task = Task::kDepth;
  out.height = height;
  out.width = width;
  out.depth = std::move(depth);
  out.valid = std::move(valid);
  return out;
}

void PixelLabels::validate(std::uint32_t num_classes) const {
  const std::size_t n = num_pixels();
  if (task == Task::kSegmentation) {
    if (classes.size() != n) throw ShapeError("segmentation labels: pixel count mismatch");
    for (auto c : classes) {
      if (c != kIgnoreClass && c >= num_classes) {
        throw Error("segmentation label " + std::to_string(c) + " >= num_classes " +
                    std::to_string(num_classes));
      }
    }
  } else {
    if (depth.size() != n || valid.size() != n) throw ShapeError("depth labels: pixel count mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      if (valid[i] > 1) throw Error("depth validity mask must be 0/1");
      if (valid[i] && !std::isfinite(depth[i])) throw Error("non-finite depth at a valid pixel");
    }
  }
}

PatchLabel PatchLabel::segmentation(std::vector<float> histogram, float ignore_fraction) {
  PatchLabel out;
  out.task_ = Task::kSegmentation;
  out.channels_ = std::move(histogram);
  out.channels_.push_back(ignore_fraction);
  return out;
}

PatchLabel PatchLabel::depth(float mean_depth, float valid_fraction) {
  PatchLabel out;
  out.task_ = Task::kDepth;
  out.channels_ = {mean_depth, valid_fraction};
  return out;
}

PatchLabel PatchLabel::from_channels(const LabelSpec& spec, std::span<const float> channels) {
  if (channels.size() != spec.channels()) throw ShapeError("patch label channel count mismatch");
  PatchLabel out;
  out.task_ = spec.task;
  out.channels_.assign(channels.begin(), channels.end());
  return out;
}

std::span<const float> PatchLabel::histogram() const {
  if (task_ != Task::kSegmentation) throw Error("histogram() on a depth label");
  return std::span<const float>(channels_).first(channels_.size() - 1);
}

float PatchLabel::ignore_fraction() const {
  if (task_ != Task::kSegmentation) throw Error("ignore_fraction() on a depth label");
  return channels_.back();
}

float PatchLabel::mean_depth() const {
  if (task_ != Task::kDepth) throw Error("mean_depth() on a segmentation label");
  return channels_[0];
}

float PatchLabel::valid_fraction() const {
  if (task_ != Task::kDepth) throw Error("valid_fraction() on a segmentation label");
  return channels_[1];
}

PatchLabelGrid::PatchLabelGrid(LabelSpec s, std::uint32_t h, std::uint32_t w)
    : spec(s), height(h), width(w), data(std::size_t{h} * w * s.channels(), 0.0f) {}

PatchLabelGrid patchify_labels(const PixelLabels& labels, std::uint32_t height,
                               std::uint32_t width, std::uint32_t num_classes,
                               std::uint32_t patch_size) {
  if (patch_size == 0) throw ShapeError("patch size must be positive");
  if (labels.height != std::uint64_t{height} * patch_size ||
      labels.width != std::uint64_t{width} * patch_size) {
    throw ShapeError("labels are " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " px but the grid is " +
                     std::to_string(height) + "x" + std::to_string(width) + " patches of " +
                     std::to_string(patch_size) + " px");
  }
  const std::size_t expected = labels.num_pixels();
  const LabelSpec spec{labels.task, labels.task == Task::kSegmentation ? num_classes : 0};
  PatchLabelGrid out(spec, height, width);
  const double block = double(patch_size) * patch_size;

  if (labels.task == Task::kSegmentation) {
    if (labels.classes.size() != expected) throw ShapeError("segmentation labels: pixel count mismatch");
    std::vector<std::uint32_t> counts(num_classes + 1);
    for (std::uint32_t py = 0; py < height; ++py) {
      for (std::uint32_t px = 0; px < width; ++px) {
        std::fill(counts.begin(), counts.end(), 0u);
        for (std::uint32_t y = 0; y < patch_size; ++y) {
          const std::size_t base = (std::size_t{py} * patch_size + y) * labels.width + std::size_t{px} * patch_size;
          for (std::uint32_t x = 0; x < patch_size; ++x) {
            const std::uint16_t c = labels.classes[base + x];
            if (c == kIgnoreClass) {
              ++counts[num_classes];
            } else if (c < num_classes) {
              ++counts[c];
            } else {
              throw Error("segmentation label " + std::to_string(c) + " >= num_classes " +
                          std::to_string(num_classes));
            }
          }
        }
        auto dst = out.channels(std::size_t{py} * width + px);
        for (std::size_t c = 0; c <= num_classes; ++c) dst[c] = static_cast<float>(counts[c] / block);
      }
    }
  } else {
    if (labels.depth.size() != expected || labels.valid.size() != expected) {
      throw ShapeError("depth labels: pixel count mismatch");
    }
    for (std::uint32_t py = 0; py < height; ++py) {
      for (std::uint32_t px = 0; px < width; ++px) {
        double sum = 0.0;
        std::uint32_t n_valid = 0;
        for (std::uint32_t y = 0; y < patch_size; ++y) {
          const std::size_t base = (std::size_t{py} * patch_size + y) * labels.width + std::size_t{px} * patch_size;
          for (std::uint32_t x = 0; x < patch_size; ++x) {
            if (labels.valid[base + x]) {
              sum += labels.depth[base + x];
              ++n_valid;
            }
          }
        }
        auto dst = out.channels(std::size_t{py} * width + px);
        dst[0] = n_valid ? static_cast<float>(sum / n_valid) : 0.0f;
        dst[1] = static_cast<float>(n_valid / block);
      }
    }
  }
  return out;
}

void FeatureSet::validate() const {
  if (epochs.empty()) throw ShapeError("feature set needs at least one epoch");
  if (task == Task::kDepth && num_classes != 0) throw ShapeError("depth feature set must have num_classes = 0");
  const std::size_t n = epochs.front().size();
  for (const auto& epoch : epochs) {
    if (epoch.size() != n) throw ShapeError("every epoch must hold the same number of images");
    for (const auto& img : epoch) {
      img.grid.validate();
      if (img.grid.dim != dim) throw ShapeError("feature grid dimension differs from the set");
      if (img.labels.task != task) throw ShapeError("label task differs from the set");
      if (img.labels.height != img.grid.height * patch_size ||
          img.labels.width != img.grid.width * patch_size) {
        throw ShapeError("pixel labels are not patch_size x the feature grid");
      }
      img.labels.validate(num_classes);
    }
  }
}

namespace {

void put_bitset(io::ByteWriter& w, const std::vector<std::uint8_t>& valid) {
  std::vector<std::uint8_t> bits((valid.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  w.put_array<std::uint8_t>(bits);
}

std::vector<std::uint8_t> get_bitset(io::ByteReader& r, std::size_t n) {
  const std::uint8_t* bits = r.take((n + 7) / 8, "depth validity bitset");
  std::vector<std::uint8_t> valid(n);
  for (std::size_t i = 0; i < n; ++i) valid[i] = (bits[i / 8] >> (i % 8)) & 1u;
  return valid;
}

}  // namespace

std::vector<std::uint8_t> encode_feature_set(const FeatureSet& set) {
  set.validate();
  if (set.patch_size != kPatchSize) {
    throw ConfigError("HBFS version 1 stores 16x16 patches only");
  }
  io::ByteWriter w;
  w.magic(kFeatureSetMagic);
  w.put<std::uint32_t>(kFeatureSetVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(set.task));
  w.put<std::uint32_t>(set.dim);
  w.put<std::uint32_t>(set.task == Task::kSegmentation ? set.num_classes : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.num_epochs()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.num_images()));
  for (const auto& epoch : set.epochs) {
    for (const auto& img : epoch) {
      w.put<std::uint64_t>(img.grid.image_id);
      w.put<std::uint32_t>(img.grid.height);
      w.put<std::uint32_t>(img.grid.width);
      w.put_array<float>(img.grid.features);
      if (set.task == Task::kSegmentation) {
        w.put_array<std::uint16_t>(img.labels.classes);
      } else {
        w.put_array<float>(img.labels.depth);
        put_bitset(w, img.labels.valid);
      }
    }
  }
  return std::move(w).take();
}

FeatureSet decode_feature_set(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kFeatureSetMagic, "HBFS");
  const std::uint64_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFeatureSetVersion) {
    throw ParseError("HBFS version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kFeatureSetVersion) + ")",
                     version_at);
  }
  FeatureSet set;
  const std::uint64_t task_at = r.offset();
  const auto task = r.get<std::uint8_t>("task");
  if (task > 1) throw ParseError("unknown task code " + std::to_string(task), task_at);
  set.task = static_cast<Task>(task);
  set.dim = r.get<std::uint32_t>("dim");
  set.num_classes = r.get<std::uint32_t>("num_classes");
  const std::uint64_t epochs_at = r.offset();
  const auto num_epochs = r.get<std::uint32_t>("num_epochs");
  const auto num_images = r.get<std::uint32_t>("num_images");
  if (num_epochs == 0) throw ParseError("HBFS must contain at least one epoch", epochs_at);
  if (set.dim == 0 && num_images > 0) throw ParseError("zero feature dimension", epochs_at);
  if (set.task == Task::kDepth && set.num_classes != 0) {
    throw ParseError("depth set with non-zero num_classes", epochs_at);
  }
  if (set.task == Task::kSegmentation && set.num_classes >= kIgnoreClass) {
    throw ParseError("num_classes collides with the IGNORE id", epochs_at);
  }

  set.epochs.resize(num_epochs);
  for (auto& epoch : set.epochs) {
    epoch.reserve(std::min<std::size_t>(num_images, r.remaining() / 16 + 1));
    for (std::uint32_t i = 0; i < num_images; ++i) {
      LabeledImage img;
      img.grid.image_id = r.get<std::uint64_t>("image_id");
      const std::uint64_t dims_at = r.offset();
      img.grid.height = r.get<std::uint32_t>("height");
      img.grid.width = r.get<std::uint32_t>("width");
      img.grid.dim = set.dim;
      if (img.grid.height == 0 || img.grid.width == 0) throw ParseError("zero grid dimension", dims_at);
      const std::uint64_t patches = io::checked_mul(img.grid.height, img.grid.width, dims_at);
      const std::uint64_t n_feat = io::checked_mul(patches, set.dim, dims_at);
      const std::uint64_t pixels = io::checked_mul(patches, std::uint64_t{kPatchSize} * kPatchSize, dims_at);
      if (io::checked_mul(n_feat, sizeof(float), dims_at) > r.remaining()) {
        throw ParseError("truncated payload: features of image " + std::to_string(img.grid.image_id),
                         r.offset());
      }
      img.grid.features.resize(n_feat);
      const std::uint64_t feat_at = r.offset();
      r.get_array<float>(img.grid.features, "features");
      for (float v : img.grid.features) {
        if (!std::isfinite(v)) throw ParseError("non-finite feature value", feat_at);
      }
      img.labels.task = set.task;
      img.labels.height = img.grid.height * kPatchSize;
      img.labels.width = img.grid.width * kPatchSize;
      const std::uint64_t labels_at = r.offset();
      if (set.task == Task::kSegmentation) {
        if (io::checked_mul(pixels, sizeof(std::uint16_t), labels_at) > r.remaining()) {
          throw ParseError("truncated payload: labels of image " + std::to_string(img.grid.image_id),
                           labels_at);
        }
        img.labels.classes.resize(pixels);
        r.get_array<std::uint16_t>(img.labels.classes, "class labels");
        for (auto c : img.labels.classes) {
          if (c != kIgnoreClass && c >= set.num_classes) {
            throw ParseError("class id " + std::to_string(c) + " out of range", labels_at);
          }
        }
      } else {
        if (io::checked_mul(pixels, sizeof(float), labels_at) > r.remaining()) {
          throw ParseError("truncated payload: depth of image " + std::to_string(img.grid.image_id),
                           labels_at);
        }
        img.labels.depth.resize(pixels);
        r.get_array<float>(img.labels.depth, "depth");
        img.labels.valid = get_bitset(r, pixels);
        for (std::size_t p = 0; p < pixels; ++p) {
          if (img.labels.valid[p] && !std::isfinite(img.labels.depth[p])) {
            throw ParseError("non-finite depth at a valid pixel", labels_at);
          }
        }
      }
      epoch.push_back(std::move(img));
    }
  }
  if (!r.at_end()) throw ParseError("trailing bytes after the last image", r.offset());
  return set;
}

void write_feature_set(const FeatureSet& set, const std::filesystem::path& path) {
  io::write_file(path, encode_feature_set(set));
}

FeatureSet read_feature_set(const std::filesystem::path& path) {
  return decode_feature_set(io::read_file(path));
}

}  // namespace nnscene
