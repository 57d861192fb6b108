#include "nnscene/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "nnscene/errors.hpp"
#include "nnscene/random.hpp"

namespace nnscene {
namespace {

constexpr std::uint64_t kLayoutTag = 1;
constexpr std::uint64_t kNoiseTag = 2;
constexpr std::uint64_t kDepthTag = 3;
constexpr double kMinDepth = 0.5;
constexpr double kMaxDepth = 10.0;

void normalize_into(std::span<const double> v, std::span<float> out) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = n2 > 0.0 ? 1.0 / std::sqrt(n2) : 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
}

// Per-patch class ids (kIgnoreClass for ignored bands/regions).
std::vector<std::uint16_t> draw_layout(const SyntheticSceneOptions& o, Rng& rng) {
  const std::uint32_t h = o.height, w = o.width;
  std::vector<std::uint16_t> cls(std::size_t{h} * w);
  auto pick_class = [&](int previous) -> std::uint16_t {
    if (o.ignore_probability > 0.0 && uniform01(rng) < o.ignore_probability) return kIgnoreClass;
    if (o.num_classes == 1) return 0;
    std::uint16_t c;
    do {
      c = static_cast<std::uint16_t>(rng() % o.num_classes);
    } while (int(c) == previous);
    return c;
  };

  if (o.layout == SceneLayout::kStripes) {
    const bool horizontal = (rng() & 1u) != 0;
    const std::uint32_t extent = horizontal ? h : w;
    const std::uint32_t max_band = std::max<std::uint32_t>(1, extent / 3);
    std::vector<std::uint16_t> band_class(extent);
    int previous = -1;
    for (std::uint32_t start = 0; start < extent;) {
      const std::uint32_t len = 1 + static_cast<std::uint32_t>(rng() % max_band);
      const std::uint16_t c = pick_class(previous);
      previous = c;
      for (std::uint32_t i = start; i < std::min(extent, start + len); ++i) band_class[i] = c;
      start += len;
    }
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) cls[std::size_t{y} * w + x] = band_class[horizontal ? y : x];
    }
  } else {
    const std::uint32_t num_seeds = 3 + static_cast<std::uint32_t>(rng() % 4);
    std::vector<double> sy(num_seeds), sx(num_seeds);
    std::vector<std::uint16_t> sc(num_seeds);
    for (std::uint32_t s = 0; s < num_seeds; ++s) {
      sy[s] = uniform01(rng) * h;
      sx[s] = uniform01(rng) * w;
      sc[s] = pick_class(-1);
    }
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) {
        double best = 1e300;
        std::uint32_t arg = 0;
        for (std::uint32_t s = 0; s < num_seeds; ++s) {
          const double dy = y + 0.5 - sy[s], dx = x + 0.5 - sx[s];
          const double d = dy * dy + dx * dx;
          if (d < best) {
            best = d;
            arg = s;
          }
        }
        cls[std::size_t{y} * w + x] = sc[arg];
      }
    }
  }
  return cls;
}

struct DepthField {
  double base, gy, gx, amp, fy, fx, phase;
  bool has_hole;
  std::uint32_t hole_y0, hole_y1, hole_x0, hole_x1;  // pixel rectangle, half-open

  double at(double y01, double x01) const {
    const double v = base + gy * y01 + gx * x01 +
                     amp * std::sin(2.0 * std::numbers::pi * (fy * y01 + fx * x01) + phase);
    return std::clamp(v, kMinDepth, kMaxDepth);
  }
};

DepthField draw_depth_field(std::uint32_t hp, std::uint32_t wp, Rng& rng) {
  DepthField f{};
  f.base = 1.0 + 3.0 * uniform01(rng);
  f.gy = 4.0 * uniform01(rng);
  f.gx = 2.0 * uniform01(rng) - 1.0;
  f.amp = 0.8 * uniform01(rng);
  f.fy = 0.5 + uniform01(rng);
  f.fx = 0.5 + uniform01(rng);
  f.phase = 2.0 * std::numbers::pi * uniform01(rng);
  f.has_hole = uniform01(rng) < 0.5;
  const auto pick = [&](std::uint32_t extent, std::uint32_t& lo, std::uint32_t& hi) {
    lo = static_cast<std::uint32_t>(uniform01(rng) * extent * 0.7);
    hi = std::min(extent, lo + 1 + static_cast<std::uint32_t>(uniform01(rng) * extent * 0.3));
  };
  pick(hp, f.hole_y0, f.hole_y1);
  pick(wp, f.hole_x0, f.hole_x1);
  return f;
}

void check_options(const SyntheticSceneOptions& o) {
  if (o.height == 0 || o.width == 0 || o.dim == 0) throw ConfigError("synthetic grid dimensions must be positive");
  if (o.num_epochs == 0) throw ConfigError("synthetic set needs at least one epoch");
  if (o.noise_sigma < 0.0 || !std::isfinite(o.noise_sigma)) throw ConfigError("noise_sigma must be finite and >= 0");
  if (o.task == Task::kSegmentation) {
    if (o.num_classes == 0) throw ConfigError("num_classes must be positive");
    if (o.num_classes > o.dim) {
      throw ConfigError("num_classes (" + std::to_string(o.num_classes) + ") exceeds feature dim (" +
                        std::to_string(o.dim) + "): prototypes must be orthonormal");
    }
    if (o.num_classes >= kIgnoreClass) throw ConfigError("too many classes");
  } else if (o.dim < 2) {
    throw ConfigError("depth scenes need dim >= 2");
  }
}

}  // namespace

std::vector<float> class_prototypes(std::uint32_t dim, std::uint32_t num_classes,
                                    std::uint64_t prototype_seed) {
  if (num_classes > dim) throw ConfigError("num_classes exceeds feature dim");
  Rng rng = make_stream(prototype_seed, dim, num_classes);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> basis(std::size_t{num_classes} * dim);
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    std::span<double> v(basis.data() + std::size_t{c} * dim, dim);
    for (;;) {
      for (auto& x : v) x = gauss(rng);
      // Two passes of Gram-Schmidt keep the rows orthogonal to ~1e-16.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::uint32_t p = 0; p < c; ++p) {
          std::span<const double> u(basis.data() + std::size_t{p} * dim, dim);
          double d = 0.0;
          for (std::uint32_t i = 0; i < dim; ++i) d += u[i] * v[i];
          for (std::uint32_t i = 0; i < dim; ++i) v[i] -= d * u[i];
        }
      }
      double n2 = 0.0;
      for (double x : v) n2 += x * x;
      if (n2 > 1e-6) {
        const double inv = 1.0 / std::sqrt(n2);
        for (auto& x : v) x *= inv;
        break;
      }
    }
  }
  return {basis.begin(), basis.end()};
}

FeatureSet generate_synthetic_scenes(const SyntheticSceneOptions& o) {
  check_options(o);
  FeatureSet set;
  set.task = o.task;
  set.num_classes = o.task == Task::kSegmentation ? o.num_classes : 0;
  set.dim = o.dim;
  set.patch_size = kPatchSize;
  set.epochs.resize(o.num_epochs);

  const std::uint32_t proto_count = o.task == Task::kSegmentation ? o.num_classes : 2;
  const std::vector<float> protos = class_prototypes(o.dim, proto_count, o.prototype_seed);
  const std::uint32_t hp = o.height * kPatchSize, wp = o.width * kPatchSize;
  const std::size_t patches = std::size_t{o.height} * o.width;

  for (std::uint32_t i = 0; i < o.num_images; ++i) {
    const std::uint64_t image_id = o.first_image_id + i;
    PixelLabels labels;
    // Underlying per-patch signal: prototype mixture coefficients.
    std::vector<double> mix_a(patches), mix_b(patches);
    std::vector<std::uint16_t> layout;

    if (o.task == Task::kSegmentation) {
      Rng layout_rng = make_stream(o.seed, i, 0, kLayoutTag);
      layout = draw_layout(o, layout_rng);
      std::vector<std::uint16_t> px(std::size_t{hp} * wp);
      for (std::uint32_t y = 0; y < hp; ++y) {
        for (std::uint32_t x = 0; x < wp; ++x) {
          px[std::size_t{y} * wp + x] = layout[std::size_t{y / kPatchSize} * o.width + x / kPatchSize];
        }
      }
      labels = PixelLabels::segmentation(hp, wp, std::move(px));
    } else {
      Rng depth_rng = make_stream(o.seed, i, 0, kDepthTag);
      const DepthField field = draw_depth_field(hp, wp, depth_rng);
      std::vector<float> depth(std::size_t{hp} * wp);
      std::vector<std::uint8_t> valid(depth.size(), 1);
      for (std::uint32_t y = 0; y < hp; ++y) {
        for (std::uint32_t x = 0; x < wp; ++x) {
          const std::size_t p = std::size_t{y} * wp + x;
          depth[p] = static_cast<float>(field.at((y + 0.5) / hp, (x + 0.5) / wp));
          if (field.has_hole && y >= field.hole_y0 && y < field.hole_y1 && x >= field.hole_x0 &&
              x < field.hole_x1) {
            valid[p] = 0;
          }
        }
      }
      for (std::size_t p = 0; p < patches; ++p) {
        const std::uint32_t py = static_cast<std::uint32_t>(p / o.width), pxx = static_cast<std::uint32_t>(p % o.width);
        double sum = 0.0;
        for (std::uint32_t y = 0; y < kPatchSize; ++y) {
          for (std::uint32_t x = 0; x < kPatchSize; ++x) {
            sum += depth[std::size_t{py * kPatchSize + y} * wp + pxx * kPatchSize + x];
          }
        }
        const double t = (sum / (kPatchSize * kPatchSize) - kMinDepth) / (kMaxDepth - kMinDepth);
        const double angle = 0.5 * std::numbers::pi * std::clamp(t, 0.0, 1.0);
        mix_a[p] = std::cos(angle);
        mix_b[p] = std::sin(angle);
      }
      labels = PixelLabels::depth_map(hp, wp, std::move(depth), std::move(valid));
    }

    for (std::uint32_t e = 0; e < o.num_epochs; ++e) {
      Rng noise_rng = make_stream(o.seed, i, e, kNoiseTag);
      std::normal_distribution<double> gauss(0.0, 1.0);
      FeatureGrid grid;
      grid.image_id = image_id;
      grid.height = o.height;
      grid.width = o.width;
      grid.dim = o.dim;
      grid.features.resize(patches * o.dim);
      std::vector<double> v(o.dim);
      for (std::size_t p = 0; p < patches; ++p) {
        std::span<float> out(grid.features.data() + p * o.dim, o.dim);
        if (o.task == Task::kSegmentation) {
          // Ignored patches still carry a feature: use the prototype of a
          // pseudo-class derived from the patch index.
          const std::uint16_t c = layout[p] == kIgnoreClass ? static_cast<std::uint16_t>(p % o.num_classes) : layout[p];
          const float* proto = protos.data() + std::size_t{c} * o.dim;
          if (o.noise_sigma == 0.0) {
            std::copy(proto, proto + o.dim, out.begin());
            continue;
          }
          for (std::uint32_t d = 0; d < o.dim; ++d) v[d] = proto[d] + o.noise_sigma * gauss(noise_rng);
        } else {
          const float* pa = protos.data();
          const float* pb = protos.data() + o.dim;
          for (std::uint32_t d = 0; d < o.dim; ++d) {
            v[d] = mix_a[p] * pa[d] + mix_b[p] * pb[d] + o.noise_sigma * gauss(noise_rng);
          }
        }
        normalize_into(v, out);
      }
      set.epochs[e].push_back(LabeledImage{std::move(grid), labels});
    }
  }
  return set;
}

FeatureSet generate_synthetic_scene_set(std::uint32_t num_images, std::uint32_t height,
                                        std::uint32_t width, std::uint32_t dim,
                                        std::uint32_t num_classes, double noise_sigma,
                                        std::uint64_t seed) {
  SyntheticSceneOptions o;
  o.num_images = num_images;
  o.height = height;
  o.width = width;
  o.dim = dim;
  o.num_classes = num_classes;
  o.noise_sigma = noise_sigma;
  o.seed = seed;
  return generate_synthetic_scenes(o);
}

std::vector<std::uint16_t> patch_classes(const LabeledImage& image, std::uint32_t patch_size) {
  const auto& g = image.grid;
  std::vector<std::uint16_t> out(g.num_patches());
  for (std::uint32_t y = 0; y < g.height; ++y) {
    for (std::uint32_t x = 0; x < g.width; ++x) {
      out[std::size_t{y} * g.width + x] =
          image.labels.classes[std::size_t{y} * patch_size * image.labels.width + std::size_t{x} * patch_size];
    }
  }
  return out;
}

std::vector<float> clustered_unit_vectors(std::size_t count, std::uint32_t dim,
                                          std::size_t num_clusters, double spread,
                                          std::uint64_t seed, std::uint64_t center_seed) {
  if (dim == 0 || num_clusters == 0) throw ConfigError("clustered_unit_vectors: dim and num_clusters must be positive");
  std::vector<double> centers(num_clusters * dim);
  {
    Rng rng = make_stream(center_seed, num_clusters, dim, 11);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t c = 0; c < num_clusters; ++c) {
      double n2 = 0.0;
      for (std::uint32_t d = 0; d < dim; ++d) {
        const double g = gauss(rng);
        centers[c * dim + d] = g;
        n2 += g * g;
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (std::uint32_t d = 0; d < dim; ++d) centers[c * dim + d] *= inv;
    }
  }
  std::vector<float> out(count * dim);
  Rng rng = make_stream(seed, count, dim, 12);
  std::normal_distribution<double> gauss(0.0, spread / std::sqrt(double(dim)));
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = rng() % num_clusters;
    for (std::uint32_t d = 0; d < dim; ++d) v[d] = centers[c * dim + d] + gauss(rng);
    normalize_into(v, std::span<float>(out.data() + i * dim, dim));
  }
  return out;
}

}  // namespace nnscene
