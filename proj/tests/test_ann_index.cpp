#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "nnscene/ann_index.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/kernels.hpp"
#include "nnscene/synthetic.hpp"
#include "test_support.hpp"

namespace nnscene {
namespace {

using testing::for_all;
using testing::Gen;

std::shared_ptr<const MemoryBank> bank_from_keys(const std::vector<float>& keys, std::uint32_t dim) {
  MemoryBank bank;
  bank.dim = dim;
  bank.spec = {Task::kSegmentation, 2};
  const std::size_t rows = keys.size() / dim;
  const std::vector<float> ch{1.0f, 0.0f, 0.0f};
  for (std::size_t r = 0; r < rows; ++r) bank.append(std::span(keys.data() + r * dim, dim), ch, {r, 0, 0});
  return std::make_shared<const MemoryBank>(std::move(bank));
}

/// Naive full scan in double: (score, row) sorted by score desc, row asc.
std::vector<std::pair<double, std::uint32_t>> full_scan(const MemoryBank& bank, std::span<const float> q) {
  double qn = 0.0;
  for (float x : q) qn += double(x) * x;
  qn = std::sqrt(qn);
  std::vector<std::pair<double, std::uint32_t>> all;
  for (std::uint32_t r = 0; r < bank.size(); ++r) {
    double s = 0.0;
    for (std::uint32_t i = 0; i < bank.dim; ++i) s += double(bank.keys[r * bank.dim + i]) * q[i];
    all.emplace_back(s / qn, r);
  }
  std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  return all;
}

TEST(ExactIndex, OrthonormalBasis) {
  const std::vector<float> keys{1, 0, 0, 0, 1, 0, 0, 0, 1};
  const auto index = AnnIndex::build_exact(bank_from_keys(keys, 3));
  const std::vector<float> q{0, 1, 0};
  const auto hits = index.search(q, 1);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].row, 1u);
  EXPECT_EQ(hits[0].score, 1.0f);
}

TEST(ExactIndex, KEqualsBankSizeReturnsTotalOrder) {
  Gen g(1);
  const auto index = AnnIndex::build_exact(bank_from_keys(g.unit_rows(40, 8), 8));
  const auto q = g.gaussian_floats(8);
  const auto hits = index.search(q, 40);
  ASSERT_EQ(hits.size(), 40u);
  std::set<std::uint32_t> rows;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    rows.insert(hits[i].row);
    if (i > 0) {
      EXPECT_GE(hits[i - 1].score, hits[i].score);
    }
  }
  EXPECT_EQ(rows.size(), 40u);
}

TEST(ExactIndex, SaturatesWhenKExceedsBank) {
  Gen g(2);
  const auto index = AnnIndex::build_exact(bank_from_keys(g.unit_rows(5, 4), 4));
  EXPECT_EQ(index.search(g.gaussian_floats(4), 30).size(), 5u);
}

TEST(ExactIndex, TiesGoToLowerRow) {
  const std::vector<float> keys{1, 0, 0, 1, 1, 0, 0, 1};
  const auto index = AnnIndex::build_exact(bank_from_keys(keys, 2));
  const std::vector<float> q{1, 0};
  const auto hits = index.search(q, 4);
  EXPECT_EQ(hits[0].row, 0u);
  EXPECT_EQ(hits[1].row, 2u);
  EXPECT_EQ(hits[2].row, 1u);
  EXPECT_EQ(hits[3].row, 3u);
}

TEST(ExactIndex, Rejections) {
  EXPECT_THROW(AnnIndex::build_exact(std::make_shared<const MemoryBank>()), ConfigError);
  Gen g(3);
  const auto index = AnnIndex::build_exact(bank_from_keys(g.unit_rows(5, 4), 4));
  EXPECT_THROW(index.search(std::vector<float>(4, 0.0f), 1), Error);
  EXPECT_THROW(index.search(std::vector<float>{1, 0, 0, NAN}, 1), Error);
  EXPECT_THROW(index.search(std::vector<float>(3, 1.0f), 1), ShapeError);
  EXPECT_THROW(index.search(std::vector<float>(4, 1.0f), 0), ConfigError);
}

TEST(ExactIndexProperty, MatchesFullScanOracle) {
  for_all(40, 41, [](Gen& g) {
    const auto dim = static_cast<std::uint32_t>(g.pick(std::vector<std::int64_t>{3, 8, 16, 64}));
    const auto rows = static_cast<std::size_t>(g.integer(1, 700));
    const auto bank = bank_from_keys(g.unit_rows(rows, dim), dim);
    const auto index = AnnIndex::build_exact(bank);
    const auto k = static_cast<std::size_t>(g.integer(1, 50));
    const auto q = g.gaussian_floats(dim);
    const auto hits = index.search(q, k);
    const auto oracle = full_scan(*bank, q);
    ASSERT_EQ(hits.size(), std::min(k, rows));
    for (std::size_t i = 0; i < hits.size(); ++i) {
      EXPECT_NEAR(hits[i].score, oracle[i].first, 1e-6);
      const double own = std::find_if(oracle.begin(), oracle.end(), [&](auto p) { return p.second == hits[i].row; })->first;
      EXPECT_NEAR(hits[i].score, own, 1e-6);
    }
  });
}

TEST(ExactIndexProperty, BatchMatchesSingleQueriesAcrossThreads) {
  Gen g(42);
  const std::uint32_t dim = 16;
  const auto index = AnnIndex::build_exact(bank_from_keys(g.unit_rows(3000, dim), dim));
  const auto queries = g.gaussian_floats(150 * dim);
  const auto one = index.search_batch(queries, 10, {}, 1);
  const auto four = index.search_batch(queries, 10, {}, 4);
  EXPECT_EQ(one, four);
  for (std::size_t i = 0; i < 150; i += 17) {
    EXPECT_EQ(index.search(std::span(queries.data() + i * dim, dim), 10), one[i]);
  }
}

TEST(IndexParams, ScaledForBankSize) {
  const auto p = IndexParams::scaled_for(100'000);
  EXPECT_EQ(p.num_leaves, 158u);
  EXPECT_EQ(p.leaves_to_search, 10u);
  EXPECT_EQ(p.dims_per_block, 4u);
  EXPECT_EQ(p.reorder_n, 120u);
  EXPECT_EQ(IndexParams::scaled_for(1).num_leaves, 1u);
  EXPECT_EQ(IndexParams::scaled_for(1).leaves_to_search, 1u);
  EXPECT_EQ(IndexParams::scaled_for(10 * 512 * 512), IndexParams::large_bank());
  const auto big = IndexParams::large_bank();
  EXPECT_EQ(big.num_leaves, 512u);
  EXPECT_EQ(big.leaves_to_search, 32u);
  EXPECT_EQ(big.dims_per_block, 4u);
  EXPECT_EQ(big.reorder_n, 120u);
}

TEST(IndexParams, Validation) {
  IndexParams p;
  p.num_leaves = 4;
  p.leaves_to_search = 2;
  EXPECT_NO_THROW(p.validate(8, 10));
  EXPECT_THROW(p.validate(8, 3), ConfigError);
  EXPECT_THROW(p.validate(6, 10), ConfigError);
  p.leaves_to_search = 5;
  EXPECT_THROW(p.validate(8, 10), ConfigError);
  p.leaves_to_search = 0;
  EXPECT_THROW(p.validate(8, 10), ConfigError);
}

TEST(QuantizedIndex, TooManyLeavesRejected) {
  Gen g(4);
  IndexParams p;
  p.num_leaves = 20;
  p.leaves_to_search = 1;
  EXPECT_THROW(AnnIndex::build_quantized(bank_from_keys(g.unit_rows(10, 8), 8), p), ConfigError);
}

TEST(QuantizedIndexProperty, SingleLeafFullReorderEqualsExact) {
  for_all(10, 43, [](Gen& g) {
    const std::uint32_t dim = g.coin() ? 16 : 64;
    const auto rows = static_cast<std::size_t>(g.integer(20, 800));
    const auto bank = bank_from_keys(g.unit_rows(rows, dim), dim);
    IndexParams p;
    p.num_leaves = 1;
    p.leaves_to_search = 1;
    p.reorder_n = static_cast<std::uint32_t>(rows);
    p.seed = g.u64();
    const auto q_index = AnnIndex::build_quantized(bank, p);
    const auto exact = AnnIndex::build_exact(bank);
    const auto queries = g.gaussian_floats(20 * dim);
    const auto k = static_cast<std::size_t>(g.integer(1, 40));
    EXPECT_EQ(q_index.search_batch(queries, k), exact.search_batch(queries, k));
  });
}

TEST(QuantizedIndex, FullBlockCodebookReconstructsDistinctKeys) {
  Gen g(44);
  const std::uint32_t dim = 8;
  const auto keys = g.unit_rows(16, dim);
  const auto bank = bank_from_keys(keys, dim);
  IndexParams p;
  p.num_leaves = 1;
  p.leaves_to_search = 1;
  p.dims_per_block = dim;
  p.kmeans_iters = 20;
  const auto index = AnnIndex::build_quantized(bank, p);
  ASSERT_EQ(index.num_blocks(), 1u);
  for (std::uint32_t r = 0; r < 16; ++r) {
    const auto rec = index.reconstruct(r);
    for (std::uint32_t i = 0; i < dim; ++i) EXPECT_NEAR(rec[i], bank->keys[r * dim + i], 1e-6);
  }
}

TEST(QuantizedIndex, EveryRowInExactlyOneLeaf) {
  Gen g(45);
  const auto bank = bank_from_keys(g.unit_rows(2000, 16), 16);
  IndexParams p;
  p.num_leaves = 23;
  p.leaves_to_search = 3;
  const auto index = AnnIndex::build_quantized(bank, p);
  std::vector<int> seen(2000, 0);
  for (std::uint32_t l = 0; l < index.num_leaves(); ++l) {
    for (auto r : index.leaf_rows(l)) ++seen[r];
    EXPECT_NEAR(l2_norm(index.centroid(l)), 1.0, 1e-5);
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(QuantizedIndex, SelfMatchFoundWithScoreOne) {
  Gen g(46);
  const std::uint32_t dim = 32;
  const auto keys = clustered_unit_vectors(5000, dim, 64, 0.5, 1, 2);
  const auto bank = bank_from_keys(keys, dim);
  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(5000));
  std::size_t found = 0;
  for (std::uint32_t r = 0; r < 5000; r += 97) {
    const auto hits = index.search(std::span(keys.data() + r * dim, dim), 5);
    if (hits[0].row == r) {
      ++found;
      EXPECT_NEAR(hits[0].score, 1.0f, 1e-6);
    }
  }
  EXPECT_EQ(found, 52u);
}

TEST(QuantizedIndex, DeterministicBuild) {
  Gen g(47);
  const auto bank = bank_from_keys(g.unit_rows(3000, 16), 16);
  IndexParams p = IndexParams::scaled_for(3000);
  p.seed = 9;
  EXPECT_EQ(AnnIndex::build_quantized(bank, p).encode(), AnnIndex::build_quantized(bank, p).encode());
  EXPECT_EQ(AnnIndex::build_quantized(bank, p, 1).encode(), AnnIndex::build_quantized(bank, p, 3).encode());
  IndexParams other = p;
  other.seed = 10;
  EXPECT_NE(AnnIndex::build_quantized(bank, p).encode(), AnnIndex::build_quantized(bank, other).encode());
}

TEST(QuantizedIndex, ReorderBelowKRejected) {
  Gen g(48);
  const auto bank = bank_from_keys(g.unit_rows(500, 8), 8);
  IndexParams p = IndexParams::scaled_for(500);
  p.reorder_n = 5;
  const auto index = AnnIndex::build_quantized(bank, p);
  EXPECT_THROW(index.search(g.gaussian_floats(8), 10), ConfigError);
  EXPECT_NO_THROW(index.search(g.gaussian_floats(8), 10, SearchParams{0, 10}));
}

double mean_recall(const AnnIndex& approx, const AnnIndex& exact, std::span<const float> queries, std::size_t k,
                   SearchParams sp) {
  const auto a = approx.search_batch(queries, k, sp);
  const auto e = exact.search_batch(queries, k);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += recall_at_k(a[i], e[i], k);
  return total / double(a.size());
}

TEST(QuantizedIndex, RecallNonDecreasingInProbesAndReorder) {
  const std::uint32_t dim = 32;
  const auto keys = clustered_unit_vectors(20'000, dim, 256, 0.8, 3, 4);
  const auto queries = clustered_unit_vectors(200, dim, 256, 0.8, 5, 4);
  const auto bank = bank_from_keys(keys, dim);
  const auto exact = AnnIndex::build_exact(bank);
  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(keys.size() / dim));
  // Every candidate is rescored exactly, so more probes only add candidates.
  double prev = 0.0;
  for (std::uint32_t probe : {1u, 2u, 4u, 8u, 16u, 32u}) {
    const double r = mean_recall(index, exact, queries, 10, {probe, 20'000});
    EXPECT_GE(r, prev) << "probe " << probe;
    prev = r;
  }
  prev = 0.0;
  for (std::uint32_t reorder : {10u, 20u, 40u, 80u, 160u, 320u}) {
    const double r = mean_recall(index, exact, queries, 10, {4, reorder});
    EXPECT_GE(r, prev) << "reorder " << reorder;
    prev = r;
  }
}

TEST(QuantizedIndex, RecallOnClusteredKeys) {
  const std::uint32_t dim = 64;
  const auto keys = clustered_unit_vectors(20'000, dim, 256, 0.5, 6, 7);
  const auto queries = clustered_unit_vectors(200, dim, 256, 0.5, 8, 7);
  const auto bank = bank_from_keys(keys, dim);
  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(20'000));
  EXPECT_GE(mean_recall(index, AnnIndex::build_exact(bank), queries, 30, {}), 0.95);
}

TEST(QuantizedIndex, ConcurrentSearchMatchesSerial) {
  Gen g(49);
  const auto bank = bank_from_keys(g.unit_rows(4000, 16), 16);
  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(4000));
  const auto queries = g.gaussian_floats(100 * 16);
  EXPECT_EQ(index.search_batch(queries, 20, {}, 1), index.search_batch(queries, 20, {}, 4));
}

TEST(HbixCodec, RoundTripPreservesSearch) {
  Gen g(50);
  const auto bank = bank_from_keys(g.unit_rows(1500, 16), 16);
  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(1500));
  const auto bytes = index.encode();
  const auto back = AnnIndex::decode(bytes, bank);
  EXPECT_EQ(back.encode(), bytes);
  EXPECT_EQ(back.params(), index.params());
  const auto queries = g.gaussian_floats(30 * 16);
  EXPECT_EQ(back.search_batch(queries, 15), index.search_batch(queries, 15));
}

TEST(HbixCodec, CorruptionRejected) {
  Gen g(51);
  const auto bank = bank_from_keys(g.unit_rows(300, 8), 8);
  const auto bytes = AnnIndex::build_quantized(bank, IndexParams::scaled_for(300)).encode();
  for (std::size_t cut = 0; cut < bytes.size(); cut += 29) {
    EXPECT_THROW(AnnIndex::decode(std::span(bytes.data(), cut), bank), ParseError);
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(AnnIndex::decode(extra, bank), ParseError);
  const auto other = bank_from_keys(g.unit_rows(301, 8), 8);
  EXPECT_THROW(AnnIndex::decode(bytes, other), Error);
}

TEST(BankFile, RoundTripWithAndWithoutIndex) {
  Gen g(52);
  testing::TempDir dir;
  const auto bank = bank_from_keys(g.unit_rows(400, 8), 8);
  write_bank_file(dir / "plain.bank", *bank, nullptr);
  const auto plain = read_bank_file(dir / "plain.bank");
  EXPECT_EQ(*plain.bank, *bank);
  EXPECT_FALSE(plain.index.has_value());

  const auto index = AnnIndex::build_quantized(bank, IndexParams::scaled_for(400));
  write_bank_file(dir / "indexed.bank", *bank, &index);
  const auto indexed = read_bank_file(dir / "indexed.bank");
  ASSERT_TRUE(indexed.index.has_value());
  EXPECT_EQ(indexed.index->encode(), index.encode());
}

TEST(RecallAtK, Examples) {
  std::vector<Neighbor> exact, approx;
  for (std::uint32_t i = 0; i < 30; ++i) exact.push_back({i, 0.0f});
  EXPECT_EQ(recall_at_k(exact, exact, 30), 1.0);
  for (std::uint32_t i = 0; i < 30; ++i) approx.push_back({100 + i, 0.0f});
  EXPECT_EQ(recall_at_k(approx, exact, 30), 0.0);
  for (std::uint32_t i = 0; i < 27; ++i) approx[i].row = i;
  EXPECT_DOUBLE_EQ(recall_at_k(approx, exact, 30), 0.9);
  EXPECT_THROW(recall_at_k(approx, std::span(exact.data(), 29), 30), ShapeError);
  approx.push_back({999, 0.0f});
  EXPECT_THROW(recall_at_k(approx, exact, 30), ShapeError);
}

}  // namespace
}  // namespace nnscene
