#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "nnscene/binary_io.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/kernels.hpp"
#include "nnscene/memory_bank.hpp"
#include "nnscene/parallel.hpp"

namespace nnscene {
namespace {

constexpr double kEmptyPatchPenalty = 1e6;

}  // namespace

void MemoryBank::append(std::span<const float> feature, std::span<const float> label_channels,
                        Provenance from) {
  if (feature.size() != dim) throw ShapeError("bank key has the wrong dimension");
  if (label_channels.size() != spec.channels()) throw ShapeError("bank value has the wrong channel count");
  const std::size_t at = keys.size();
  keys.resize(at + dim);
  if (!normalize_to(feature, std::span<float>(keys.data() + at, dim))) {
    keys.resize(at);
    throw Error("cannot L2-normalize a zero feature (image " + std::to_string(from.image_id) +
                ", patch " + std::to_string(from.patch_index) + ")");
  }
  values.insert(values.end(), label_channels.begin(), label_channels.end());
  provenance.push_back(from);
}

void MemoryBank::validate() const {
  if (dim == 0) throw ShapeError("bank dimension must be positive");
  if (keys.size() != size() * dim || values.size() != size() * spec.channels()) {
    throw ShapeError("bank arrays disagree with the row count");
  }
  for (std::size_t r = 0; r < size(); ++r) {
    const double n = l2_norm(key(r));
    if (std::abs(n - 1.0) > 1e-5) throw Error("bank key " + std::to_string(r) + " is not unit norm");
  }
}

std::uint64_t features_per_image(std::uint64_t capacity, std::uint64_t num_images,
                                 std::uint64_t aug_epochs) {
  if (num_images == 0 || aug_epochs == 0) return 0;
  return capacity / (num_images * aug_epochs);
}

std::uint64_t required_bank_length(std::uint64_t num_images, std::uint64_t height,
                                   std::uint64_t width) {
  return num_images * height * width;
}

std::vector<double> segmentation_patch_scores(const PatchLabelGrid& labels,
                                              std::span<const double> jitter) {
  if (labels.spec.task != Task::kSegmentation) throw Error("segmentation_patch_scores needs segmentation labels");
  const std::size_t n = labels.size();
  if (jitter.size() != n) throw ShapeError("one jitter value per patch is required");
  const std::uint32_t classes = labels.spec.num_classes;

  std::vector<std::uint64_t> kappa(classes, 0);
  for (std::size_t j = 0; j < n; ++j) {
    auto h = labels.channels(j);
    for (std::uint32_t c = 0; c < classes; ++c) kappa[c] += h[c] > 0.0f;
  }
  std::vector<double> scores(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto h = labels.channels(j);
    std::uint64_t class_score = 0;
    bool empty = true;
    for (std::uint32_t c = 0; c < classes; ++c) {
      if (h[c] > 0.0f) {
        class_score += kappa[c];
        empty = false;
      }
    }
    scores[j] = double(class_score) * jitter[j] + (empty ? kEmptyPatchPenalty : 0.0);
  }
  return scores;
}

std::vector<double> segmentation_patch_scores(const PatchLabelGrid& labels, Rng& rng) {
  std::vector<double> jitter(labels.size());
  for (auto& x : jitter) x = uniform01(rng);
  return segmentation_patch_scores(labels, jitter);
}

std::vector<std::uint32_t> lowest_scores(std::span<const double> scores, std::size_t n) {
  if (n > scores.size()) throw ConfigError("cannot select more patches than the grid holds");
  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  auto by_score = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), by_score);
  order.resize(n);
  return order;
}

std::vector<std::uint32_t> select_patches(const PatchLabelGrid& labels, std::size_t n, Rng& rng) {
  if (n > labels.size()) {
    throw ConfigError("select_patches: n = " + std::to_string(n) + " exceeds " +
                      std::to_string(labels.size()) + " patches");
  }
  if (labels.spec.task == Task::kSegmentation) {
    const auto scores = segmentation_patch_scores(labels, rng);
    return lowest_scores(scores, n);
  }
  std::vector<std::uint32_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0u);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_partition(order.begin(), order.end(),
                        [&](std::uint32_t p) { return labels.channels(p)[1] > 0.0f; });
  order.resize(n);
  return order;
}

MemoryBank build_bank(const FeatureSet& set, const SamplerConfig& cfg, BankBuildReport* report,
                      std::size_t threads) {
  if (cfg.capacity == 0) throw ConfigError("memory bank capacity must be >= 1");
  if (cfg.aug_epochs == 0) throw ConfigError("aug_epochs must be >= 1");
  if (cfg.aug_epochs > set.num_epochs()) {
    throw ConfigError("aug_epochs = " + std::to_string(cfg.aug_epochs) + " but the feature set has " +
                      std::to_string(set.num_epochs()) + " epoch(s)");
  }
  set.validate();

  const std::size_t num_images = set.num_images();
  const LabelSpec spec = set.label_spec();
  MemoryBank bank;
  bank.dim = set.dim;
  bank.spec = spec;
  BankBuildReport local_report;

  if (set.task == Task::kSegmentation) {
    for (const auto& img : set.epochs.front()) {
      // class_score <= H*W*C must stay below the empty-patch penalty.
      if (double(img.grid.num_patches()) * set.num_classes >= kEmptyPatchPenalty) {
        throw ConfigError("grid of " + std::to_string(img.grid.num_patches()) + " patches x " +
                          std::to_string(set.num_classes) +
                          " classes can outscore the empty-patch penalty");
      }
    }
  }

  std::uint64_t n_per_image = 0;
  if (cfg.downsample && num_images > 0) {
    n_per_image = features_per_image(cfg.capacity, num_images, cfg.aug_epochs);
    if (n_per_image == 0) {
      throw ConfigError("n_per_image = 0: capacity " + std::to_string(cfg.capacity) + " < " +
                        std::to_string(num_images) + " images x " + std::to_string(cfg.aug_epochs) +
                        " epochs; unusable bank configuration");
    }
    local_report.n_per_image = n_per_image;
  }

  // Per (epoch, image) selections, computed independently then concatenated.
  struct Slot {
    PatchLabelGrid labels;
    std::vector<std::uint32_t> picked;
  };
  const std::size_t jobs = std::size_t{cfg.aug_epochs} * num_images;
  std::vector<Slot> slots(jobs);
  parallel_for(
      jobs,
      [&](std::size_t job) {
        const std::size_t e = job / num_images, i = job % num_images;
        const LabeledImage& img = set.epochs[e][i];
        Slot& slot = slots[job];
        slot.labels = patchify_labels(img.labels, img.grid.height, img.grid.width, spec.num_classes,
                                      set.patch_size);
        if (cfg.downsample) {
          Rng rng = make_stream(cfg.seed, img.grid.image_id, e);
          const std::size_t n = std::min<std::uint64_t>(n_per_image, img.grid.num_patches());
          slot.picked = select_patches(slot.labels, n, rng);
        } else {
          slot.picked.resize(img.grid.num_patches());
          std::iota(slot.picked.begin(), slot.picked.end(), 0u);
        }
      },
      threads);

  std::size_t total = 0;
  for (const auto& s : slots) total += s.picked.size();
  const std::size_t rows = std::min<std::uint64_t>(total, cfg.capacity);
  bank.keys.reserve(rows * bank.dim);
  bank.values.reserve(rows * spec.channels());
  bank.provenance.reserve(rows);

  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t e = job / num_images, i = job % num_images;
    const LabeledImage& img = set.epochs[e][i];
    for (std::uint32_t p : slots[job].picked) {
      if (bank.size() >= cfg.capacity) {
        ++local_report.truncated;
        continue;
      }
      bank.append(img.grid.row(p), slots[job].labels.channels(p),
                  Provenance{img.grid.image_id, static_cast<std::uint32_t>(e), p});
    }
  }
  if (report) *report = local_report;
  return bank;
}

std::vector<std::uint8_t> encode_bank(const MemoryBank& bank) {
  io::ByteWriter w;
  w.magic(kBankMagic);
  w.put<std::uint32_t>(bank.dim);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(bank.spec.task));
  w.put<std::uint32_t>(bank.spec.num_classes);
  w.put<std::uint64_t>(bank.size());
  w.put_array<float>(bank.keys);
  w.put_array<float>(bank.values);
  for (const auto& p : bank.provenance) {
    w.put<std::uint64_t>(p.image_id);
    w.put<std::uint32_t>(p.epoch);
    w.put<std::uint32_t>(p.patch_index);
  }
  return std::move(w).take();
}

MemoryBank decode_bank(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  io::ByteReader r(bytes);
  r.expect_magic(kBankMagic, "HBMB");
  MemoryBank bank;
  const std::uint64_t header_at = r.offset();
  bank.dim = r.get<std::uint32_t>("dim");
  const auto task = r.get<std::uint8_t>("task");
  if (task > 1) throw ParseError("unknown task code " + std::to_string(task), header_at + 4);
  bank.spec.task = static_cast<Task>(task);
  bank.spec.num_classes = r.get<std::uint32_t>("num_classes");
  const auto rows = r.get<std::uint64_t>("row count");
  if (bank.dim == 0) throw ParseError("zero bank dimension", header_at);
  if (bank.spec.task == Task::kDepth && bank.spec.num_classes != 0) {
    throw ParseError("depth bank with non-zero num_classes", header_at);
  }
  const std::uint64_t key_bytes = io::checked_mul(io::checked_mul(rows, bank.dim, r.offset()), 4, r.offset());
  const std::uint64_t value_bytes =
      io::checked_mul(io::checked_mul(rows, bank.spec.channels(), r.offset()), 4, r.offset());
  const std::uint64_t prov_bytes = io::checked_mul(rows, 16, r.offset());
  if (key_bytes + value_bytes + prov_bytes > r.remaining()) {
    throw ParseError("truncated payload: bank of " + std::to_string(rows) + " rows", r.offset());
  }
  bank.keys.resize(rows * bank.dim);
  r.get_array<float>(bank.keys, "keys");
  bank.values.resize(rows * bank.spec.channels());
  r.get_array<float>(bank.values, "values");
  bank.provenance.resize(rows);
  for (auto& p : bank.provenance) {
    p.image_id = r.get<std::uint64_t>("provenance image_id");
    p.epoch = r.get<std::uint32_t>("provenance epoch");
    p.patch_index = r.get<std::uint32_t>("provenance patch_index");
  }
  if (consumed) {
    *consumed = static_cast<std::size_t>(r.offset());
  } else if (!r.at_end()) {
    throw ParseError("trailing bytes after the bank section", r.offset());
  }
  return bank;
}

}  // namespace nnscene
