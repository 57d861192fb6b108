#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "nnscene/decoder.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/memory_bank.hpp"
#include "nnscene/synthetic.hpp"
#include "test_support.hpp"

namespace nnscene {
namespace {

using testing::for_all;
using testing::Gen;

const LabelSpec kSeg2{Task::kSegmentation, 2};
const LabelSpec kDepthSpec{Task::kDepth, 0};

TEST(AttentionWeights, HandEvaluatedSoftmax) {
  const std::vector<double> s{1.0, 0.0};
  const auto w = attention_weights(s, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(w[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(w[1], 1.0 / (e + 1.0), 1e-15);
  const auto sharp = attention_weights(s, 0.02);
  EXPECT_NEAR(sharp[1], std::exp(-50.0) / (1.0 + std::exp(-50.0)), 1e-30);
  EXPECT_THROW(attention_weights({}, 1.0), ShapeError);
}

TEST(AttentionWeightsProperty, ProbabilityVector) {
  for_all(100, 61, [](Gen& g) {
    std::vector<double> s(static_cast<std::size_t>(g.integer(1, 60)));
    for (auto& x : s) x = g.uniform(-1.0, 1.0);
    const auto w = attention_weights(s, g.pick(std::vector<double>{1e-4, 0.02, 0.1, 1.0, 10.0}));
    double total = 0.0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  });
}

TEST(DecodePatch, SingleNeighborReturnsItsLabel) {
  const std::vector<float> label{0.25f, 0.5f, 0.25f};
  const std::vector<ScoredLabel> nb{{0.3, label}};
  for (double beta : {1e-3, 0.02, 1.0, 50.0}) {
    const auto out = decode_patch(kSeg2, nb, beta);
    EXPECT_NEAR(out.values[0], 1.0 / 3.0, 1e-7);
    EXPECT_NEAR(out.values[1], 2.0 / 3.0, 1e-7);
    EXPECT_FALSE(out.flagged);
  }
  const std::vector<float> clean{0.4f, 0.6f, 0.0f};
  const std::vector<ScoredLabel> one{{-0.7, clean}};
  const auto out = decode_patch(kSeg2, one, 0.02);
  const double total = double(0.4f) + double(0.6f);
  EXPECT_NEAR(out.values[0], double(0.4f) / total, 1e-12);
  EXPECT_NEAR(out.values[1], double(0.6f) / total, 1e-12);
}

TEST(DecodePatch, TwoNeighborsUnitTemperature) {
  const std::vector<float> a{1, 0, 0}, b{0, 1, 0};
  const std::vector<ScoredLabel> nb{{1.0, a}, {0.0, b}};
  const auto out = decode_patch(kSeg2, nb, 1.0);
  EXPECT_NEAR(out.values[0], 0.73106, 1e-5);
  EXPECT_NEAR(out.values[1], 0.26894, 1e-5);
}

TEST(DecodePatch, TwoNeighborsSharpTemperature) {
  const std::vector<float> a{1, 0, 0}, b{0, 1, 0};
  const std::vector<ScoredLabel> nb{{1.0, a}, {0.0, b}};
  const auto out = decode_patch(kSeg2, nb, 0.02);
  EXPECT_NEAR(out.values[0], 1.0, 1e-15);
  EXPECT_NEAR(out.values[1], 1.9287e-22, 1e-25);
}

TEST(DecodePatch, IgnoreMassRemovedAndRenormalized) {
  const std::vector<float> a{0.5f, 0.0f, 0.5f}, b{0.0f, 0.25f, 0.75f};
  const std::vector<ScoredLabel> nb{{0.5, a}, {0.5, b}};
  const auto out = decode_patch(kSeg2, nb, 1.0);
  EXPECT_NEAR(out.values[0], 2.0 / 3.0, 1e-7);
  EXPECT_NEAR(out.values[1], 1.0 / 3.0, 1e-7);
}

TEST(DecodePatch, AllIgnoreIsUniformAndFlagged) {
  const std::vector<float> ign{0.0f, 0.0f, 1.0f};
  const std::vector<ScoredLabel> nb{{0.9, ign}, {0.1, ign}};
  const auto out = decode_patch(kSeg2, nb, 0.02);
  EXPECT_TRUE(out.flagged);
  EXPECT_EQ(out.values, (std::vector<double>{0.5, 0.5}));
}

TEST(DecodePatch, DepthWeightsByValidity) {
  const std::vector<float> a{2.0f, 1.0f}, b{10.0f, 0.0f}, c{4.0f, 0.5f};
  const std::vector<ScoredLabel> nb{{0.0, a}, {0.0, b}, {0.0, c}};
  const auto out = decode_patch(kDepthSpec, nb, 1.0);
  EXPECT_NEAR(out.values[0], (2.0 * 1.0 + 4.0 * 0.5) / 1.5, 1e-7);
  EXPECT_FALSE(out.flagged);
  const std::vector<ScoredLabel> invalid{{0.3, b}};
  const auto flagged = decode_patch(kDepthSpec, invalid, 1.0);
  EXPECT_TRUE(flagged.flagged);
  EXPECT_EQ(flagged.values[0], 0.0);
}

TEST(DecodePatch, WrongChannelCountRejected) {
  const std::vector<float> a{1.0f, 0.0f};
  const std::vector<ScoredLabel> nb{{1.0, a}};
  EXPECT_THROW(decode_patch(kSeg2, nb, 1.0), ShapeError);
}

TEST(DecodePatchProperty, NeighborOrderDoesNotMatter) {
  for_all(60, 62, [](Gen& g) {
    const auto classes = static_cast<std::uint32_t>(g.integer(1, 5));
    const LabelSpec spec{Task::kSegmentation, classes};
    auto bank = testing::random_bank(g, static_cast<std::size_t>(g.integer(1, 40)), 4, spec);
    std::vector<ScoredLabel> nb;
    for (std::size_t r = 0; r < bank.size(); ++r) nb.push_back({g.uniform(-1.0, 1.0), bank.value(r)});
    const double beta = g.pick(std::vector<double>{0.02, 0.1, 1.0});
    const auto a = decode_patch(spec, nb, beta);
    std::reverse(nb.begin(), nb.end());
    std::rotate(nb.begin(), nb.begin() + static_cast<std::ptrdiff_t>(nb.size() / 2), nb.end());
    const auto b = decode_patch(spec, nb, beta);
    for (std::size_t c = 0; c < classes; ++c) EXPECT_NEAR(a.values[c], b.values[c], 1e-6);
  });
}

TEST(DecodePatchProperty, LowTemperatureSelectsNearest) {
  for_all(60, 63, [](Gen& g) {
    const LabelSpec spec{Task::kSegmentation, 3};
    auto bank = testing::random_bank(g, static_cast<std::size_t>(g.integer(2, 30)), 4, spec);
    std::vector<ScoredLabel> nb;
    for (std::size_t r = 0; r < bank.size(); ++r) {
      nb.push_back({g.uniform(-1.0, 0.5), bank.value(r)});
    }
    const std::size_t best = static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(nb.size()) - 1));
    double second = -1.0;
    for (std::size_t r = 0; r < nb.size(); ++r) {
      if (r != best) second = std::max(second, nb[r].score);
    }
    nb[best].score = second + g.uniform(0.011, 0.5);
    const auto out = decode_patch(spec, nb, 1e-4);
    const auto own = decode_patch(spec, std::span(&nb[best], 1), 1.0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.values[c], own.values[c], 1e-3);
  });
}

TEST(Upsample, ConstantStaysConstant) {
  const std::vector<float> v(3 * 4 * 2, 5.0f);
  for (float x : upsample_bilinear(v, 3, 4, 2, 48, 64)) EXPECT_EQ(x, 5.0f);
}

TEST(Upsample, TwoValueRowToWidthFour) {
  const std::vector<float> v{0.0f, 1.0f};
  const auto out = upsample_bilinear(v, 1, 2, 1, 1, 4);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_FLOAT_EQ(out[0], 0.0f);
  EXPECT_FLOAT_EQ(out[1], 0.25f);
  EXPECT_FLOAT_EQ(out[2], 0.75f);
  EXPECT_FLOAT_EQ(out[3], 1.0f);
}

TEST(Upsample, Rejections) {
  const std::vector<float> v{1.0f};
  EXPECT_THROW(upsample_bilinear(v, 1, 1, 1, 0, 4), ConfigError);
  EXPECT_THROW(upsample_bilinear(v, 1, 2, 1, 2, 4), ShapeError);
}

/// Per-pixel bilinear oracle written from the half-pixel sampling formula.
std::vector<double> naive_bilinear(const std::vector<float>& v, int h, int w, int c, int oh, int ow) {
  auto sample = [](int pos, int out_n, int n, int& i0, int& i1) {
    double s = (pos + 0.5) * n / out_n - 0.5;
    s = std::clamp(s, 0.0, double(n - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, n - 1);
    return s - i0;
  };
  std::vector<double> out(std::size_t(oh) * ow * c);
  for (int y = 0; y < oh; ++y) {
    int y0, y1;
    const double fy = sample(y, oh, h, y0, y1);
    for (int x = 0; x < ow; ++x) {
      int x0, x1;
      const double fx = sample(x, ow, w, x0, x1);
      for (int ch = 0; ch < c; ++ch) {
        auto at = [&](int yy, int xx) { return double(v[(std::size_t(yy) * w + xx) * c + ch]); };
        out[(std::size_t(y) * ow + x) * c + ch] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                                   fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  }
  return out;
}

TEST(UpsampleProperty, MatchesNaiveOracle) {
  for_all(40, 64, [](Gen& g) {
    const int h = static_cast<int>(g.integer(1, 5)), w = static_cast<int>(g.integer(1, 5));
    const int c = static_cast<int>(g.integer(1, 3));
    const int oh = static_cast<int>(g.integer(1, 40)), ow = static_cast<int>(g.integer(1, 40));
    const auto v = g.gaussian_floats(std::size_t(h) * w * c);
    const auto out = upsample_bilinear(v, h, w, c, oh, ow);
    const auto ref = naive_bilinear(v, h, w, c, oh, ow);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5);
  });
}

TEST(UpsampleProperty, ScaleTwoPreservesMean) {
  for_all(40, 65, [](Gen& g) {
    const int h = static_cast<int>(g.integer(1, 6)), w = static_cast<int>(g.integer(1, 6));
    const auto v = g.gaussian_floats(std::size_t(h) * w);
    const auto out = upsample_bilinear(v, h, w, 1, 2 * h, 2 * w);
    double a = 0.0, b = 0.0;
    for (float x : v) a += x;
    for (float x : out) b += x;
    EXPECT_NEAR(a / v.size(), b / out.size(), 1e-6);
  });
}

TEST(Finalize, ArgmaxAndTies) {
  const std::vector<float> dist{0.0f, 1.0f, 0.0f, 0.5f, 0.5f, 0.0f};
  const auto p = finalize_prediction(dist, 1, 2, LabelSpec{Task::kSegmentation, 3});
  EXPECT_EQ(p.classes, (std::vector<std::uint16_t>{1, 0}));
  EXPECT_EQ(p.distribution, dist);
  const std::vector<float> depth{1.5f, -0.0f, 3.25f, 1e-30f};
  const auto d = finalize_prediction(depth, 2, 2, kDepthSpec);
  ASSERT_EQ(d.depth.size(), 4u);
  EXPECT_EQ(std::memcmp(d.depth.data(), depth.data(), sizeof(float) * 4), 0);
}

std::shared_ptr<const MemoryBank> self_bank(const FeatureSet& set) {
  SamplerConfig cfg;
  cfg.capacity = 1'000'000;
  cfg.aug_epochs = 1;
  cfg.downsample = false;
  return std::make_shared<const MemoryBank>(build_bank(set, cfg));
}

TEST(DecodeImage, SelfRetrievalRecoversLabels) {
  SyntheticSceneOptions o;
  o.num_images = 3;
  o.layout = SceneLayout::kVoronoi;
  o.ignore_probability = 0.2;
  const auto set = generate_synthetic_scenes(o);
  const auto bank = self_bank(set);
  const auto index = AnnIndex::build_exact(bank);
  DecodeConfig cfg;
  cfg.k = 1;
  for (const auto& img : set.epochs[0]) {
    const auto out = decode_image(img.grid, index, cfg);
    const auto labels = patchify_labels(img.labels, img.grid.height, img.grid.width, o.num_classes);
    for (std::size_t p = 0; p < img.grid.num_patches(); ++p) {
      const PatchLabel label = labels.label(p);
      const auto hist = label.histogram();
      double real = 0.0;
      for (float x : hist) real += x;
      if (real == 0.0) {
        EXPECT_TRUE(out.flagged[p]);
        continue;
      }
      for (std::uint32_t c = 0; c < o.num_classes; ++c) EXPECT_NEAR(out.values[p * 4 + c], hist[c] / real, 1e-6);
    }
  }
}

TEST(DecodeImage, PatchAccuracyOnSyntheticQueries) {
  const auto prompt = generate_synthetic_scene_set(16, 8, 8, 64, 4, 0.1, 100);
  SyntheticSceneOptions qo;
  qo.num_images = 8;
  qo.seed = 200;
  qo.first_image_id = 1000;
  const auto query = generate_synthetic_scenes(qo);
  const auto index = AnnIndex::build_exact(self_bank(prompt));
  for (const auto& img : query.epochs[0]) {
    const auto out = decode_image(img.grid, index, DecodeConfig{});
    const auto truth = patch_classes(img);
    for (std::size_t p = 0; p < truth.size(); ++p) {
      const auto* row = &out.values[p * 4];
      EXPECT_EQ(std::max_element(row, row + 4) - row, truth[p]);
    }
  }
}

TEST(DecodeImage, EmptyGridAndDimMismatch) {
  const auto set = generate_synthetic_scene_set(1, 2, 2, 8, 2, 0.1, 1);
  const auto index = AnnIndex::build_exact(self_bank(set));
  FeatureGrid empty;
  empty.dim = 8;
  EXPECT_TRUE(decode_image(empty, index, DecodeConfig{}).values.empty());
  FeatureGrid wrong{0, 1, 1, 4, {1, 0, 0, 0}};
  EXPECT_THROW(decode_image(wrong, index, DecodeConfig{}), ShapeError);
  DecodeConfig bad;
  bad.temperature = 0.0;
  EXPECT_THROW(decode_image(set.epochs[0][0].grid, index, bad), ConfigError);
}

TEST(DecodeFidelityProperty, FullBankMatchesDenseOracle) {
  for_all(12, 66, [](Gen& g) {
    const std::uint32_t dim = g.coin() ? 16 : 64;
    const LabelSpec spec = g.coin(0.7) ? LabelSpec{Task::kSegmentation, static_cast<std::uint32_t>(g.integer(1, 6))}
                                       : LabelSpec{Task::kDepth, 0};
    const auto rows = static_cast<std::size_t>(g.integer(1, 1500));
    auto bank = std::make_shared<const MemoryBank>(testing::random_bank(g, rows, dim, spec));
    const auto index = AnnIndex::build_exact(bank);
    FeatureGrid grid{0, 2, 3, dim, g.gaussian_floats(6 * dim)};
    DecodeConfig cfg;
    cfg.k = rows;
    cfg.temperature = g.pick(std::vector<double>{0.02, 0.1, 1.0});
    const auto out = decode_image(grid, index, cfg);
    for (std::size_t p = 0; p < 6; ++p) {
      const std::vector<float> q(grid.features.begin() + p * dim, grid.features.begin() + (p + 1) * dim);
      const auto ref = testing::dense_decode_oracle(*bank, q, cfg.temperature);
      for (std::size_t c = 0; c < ref.size(); ++c) EXPECT_NEAR(out.values[p * ref.size() + c], ref[c], 1e-5);
    }
  });
}

TEST(Predict, DistributionsSumToOne) {
  const auto set = generate_synthetic_scene_set(2, 4, 4, 16, 3, 0.2, 3);
  const auto index = AnnIndex::build_exact(self_bank(set));
  const auto preds = predict_feature_set(set, index, DecodeConfig{});
  ASSERT_EQ(preds.size(), 2u);
  for (const auto& p : preds) {
    EXPECT_EQ(p.height, 64u);
    EXPECT_EQ(p.width, 64u);
    for (std::size_t px = 0; px < std::size_t{p.height} * p.width; ++px) {
      double s = 0.0;
      for (std::uint32_t c = 0; c < 3; ++c) s += p.distribution[px * 3 + c];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Predict, TaskMismatchRejected) {
  const auto set = generate_synthetic_scene_set(1, 2, 2, 8, 2, 0.1, 1);
  const auto index = AnnIndex::build_exact(self_bank(set));
  SyntheticSceneOptions o;
  o.task = Task::kDepth;
  o.num_classes = 0;
  o.dim = 8;
  EXPECT_THROW(predict_feature_set(generate_synthetic_scenes(o), index, DecodeConfig{}), ConfigError);
  const auto three = generate_synthetic_scene_set(1, 2, 2, 8, 3, 0.1, 1);
  EXPECT_THROW(predict_feature_set(three, index, DecodeConfig{}), ConfigError);
}

TEST(Hbpr, RoundTripSegmentationAndDepth) {
  const auto set = generate_synthetic_scene_set(2, 2, 3, 8, 3, 0.1, 2);
  const auto index = AnnIndex::build_exact(self_bank(set));
  const auto preds = predict_feature_set(set, index, DecodeConfig{});
  const auto with = decode_predictions(encode_predictions(preds, true));
  EXPECT_EQ(with, preds);
  const auto without = decode_predictions(encode_predictions(preds, false));
  ASSERT_EQ(without.size(), 2u);
  EXPECT_TRUE(without[0].distribution.empty());
  EXPECT_EQ(without[0].classes, preds[0].classes);

  SyntheticSceneOptions o;
  o.task = Task::kDepth;
  o.num_classes = 0;
  o.num_images = 2;
  o.dim = 8;
  const auto dset = generate_synthetic_scenes(o);
  const auto didx = AnnIndex::build_exact(self_bank(dset));
  const auto dpreds = predict_feature_set(dset, didx, DecodeConfig{});
  testing::TempDir dir;
  write_predictions(dir / "d.hbpr", dpreds, true);
  EXPECT_EQ(read_predictions(dir / "d.hbpr"), dpreds);
}

TEST(Hbpr, CorruptionRejected) {
  const auto set = generate_synthetic_scene_set(1, 1, 2, 8, 2, 0.1, 2);
  const auto index = AnnIndex::build_exact(self_bank(set));
  const auto bytes = encode_predictions(predict_feature_set(set, index, DecodeConfig{}), true);
  for (std::size_t cut = 0; cut < bytes.size(); cut += 101) {
    EXPECT_THROW(decode_predictions(std::span(bytes.data(), cut)), ParseError);
  }
  auto bad = bytes;
  bad[2] = '?';
  EXPECT_THROW(decode_predictions(bad), ParseError);
}

}  // namespace
}  // namespace nnscene
