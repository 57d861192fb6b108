#include "nnscene/ann_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>

#include "nnscene/binary_io.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/kernels.hpp"
#include "nnscene/kmeans.hpp"
#include "nnscene/parallel.hpp"

namespace nnscene {
namespace {

constexpr std::string_view kIndexMagic = "HBIX0001";
constexpr std::size_t kScanBlock = 256;
constexpr std::uint64_t kSampleTag = 21;
constexpr std::uint64_t kLeafTag = 22;
constexpr std::uint64_t kCodebookTag = 23;

struct Candidate {
  float score;
  std::uint32_t row;
};

inline bool better(const Candidate& a, const Candidate& b) {
  return a.score > b.score || (a.score == b.score && a.row < b.row);
}

// Bounded selection of the best `cap` candidates; the heap top is the worst kept.
class TopK {
 public:
  explicit TopK(std::size_t cap) : cap_(cap) { heap_.reserve(cap); }

  void push(float score, std::uint32_t row) {
    const Candidate c{score, row};
    if (heap_.size() < cap_) {
      heap_.push_back(c);
      std::push_heap(heap_.begin(), heap_.end(), better);
    } else if (cap_ > 0 && better(c, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), better);
      heap_.back() = c;
      std::push_heap(heap_.begin(), heap_.end(), better);
    }
  }

  std::vector<Candidate> take_sorted() {
    std::sort(heap_.begin(), heap_.end(), better);
    return std::move(heap_);
  }

 private:
  std::size_t cap_;
  std::vector<Candidate> heap_;
};

void unit_query(std::span<const float> query, std::uint32_t dim, std::span<float> out) {
  if (query.size() != dim) {
    throw ShapeError("query has " + std::to_string(query.size()) + " dims, index has " + std::to_string(dim));
  }
  for (float v : query) {
    if (!std::isfinite(v)) throw Error("query contains a non-finite value");
  }
  if (!normalize_to(query, out)) throw Error("zero query vector cannot be scored by cosine similarity");
}

std::vector<Neighbor> to_neighbors(const std::vector<Candidate>& sorted, std::size_t k) {
  std::vector<Neighbor> out;
  out.reserve(std::min(k, sorted.size()));
  for (std::size_t i = 0; i < sorted.size() && i < k; ++i) out.push_back({sorted[i].row, sorted[i].score});
  return out;
}

}  // namespace

std::string_view to_string(IndexMode mode) { return mode == IndexMode::kExact ? "exact" : "quantized"; }

IndexMode parse_index_mode(std::string_view name) {
  if (name == "exact") return IndexMode::kExact;
  if (name == "quantized" || name == "ah") return IndexMode::kQuantized;
  throw ConfigError("unknown index mode '" + std::string(name) + "' (expected exact|quantized)");
}

IndexParams IndexParams::large_bank() { return IndexParams{}; }

IndexParams IndexParams::scaled_for(std::size_t bank_size) {
  IndexParams p;
  if (bank_size >= 10ull * 512 * 512) return p;
  p.num_leaves = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::lround(std::sqrt(double(bank_size)) / 2.0)));
  p.leaves_to_search = std::clamp<std::uint32_t>(
      static_cast<std::uint32_t>(std::lround(p.num_leaves * 32.0 / 512.0)), 1, p.num_leaves);
  return p;
}

void IndexParams::validate(std::uint32_t dim, std::size_t bank_size) const {
  if (num_leaves == 0) throw ConfigError("num_leaves must be >= 1");
  if (leaves_to_search == 0 || leaves_to_search > num_leaves) {
    throw ConfigError("leaves_to_search must lie in [1, num_leaves]");
  }
  if (dims_per_block == 0 || dim % dims_per_block != 0) {
    throw ConfigError("dims_per_block = " + std::to_string(dims_per_block) + " must divide dim = " + std::to_string(dim));
  }
  if (reorder_n == 0) throw ConfigError("reorder_n must be >= 1");
  if (num_leaves > bank_size) {
    throw ConfigError("num_leaves = " + std::to_string(num_leaves) + " exceeds bank size " + std::to_string(bank_size));
  }
}

AnnIndex AnnIndex::build_exact(std::shared_ptr<const MemoryBank> bank) {
  if (!bank || bank->empty()) throw ConfigError("cannot index an empty memory bank");
  if (bank->size() > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("bank too large for 32-bit row ids");
  AnnIndex index;
  index.mode_ = IndexMode::kExact;
  index.bank_ = std::move(bank);
  return index;
}

AnnIndex AnnIndex::build_quantized(std::shared_ptr<const MemoryBank> bank, const IndexParams& params,
                                   std::size_t threads) {
  if (!bank || bank->empty()) throw ConfigError("cannot index an empty memory bank");
  if (bank->size() > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("bank too large for 32-bit row ids");
  const std::uint32_t dim = bank->dim;
  const std::size_t rows = bank->size();
  params.validate(dim, rows);

  AnnIndex index;
  index.mode_ = IndexMode::kQuantized;
  index.params_ = params;
  index.bank_ = bank;
  index.num_leaves_ = params.num_leaves;
  index.num_blocks_ = dim / params.dims_per_block;
  index.code_bytes_ = (index.num_blocks_ + 1) / 2;

  // Training sample: all rows, or a seeded subset (kept in row order).
  const std::uint64_t cap = params.train_sample ? params.train_sample : IndexParams::kDefaultTrainSample;
  std::vector<float> sample_store;
  std::span<const float> train(bank->keys);
  std::size_t n_train = rows;
  if (rows > cap) {
    Rng rng = make_stream(params.seed, kSampleTag);
    std::vector<std::uint32_t> ids(rows);
    std::iota(ids.begin(), ids.end(), 0u);
    for (std::size_t i = 0; i < cap; ++i) std::swap(ids[i], ids[i + rng() % (rows - i)]);
    ids.resize(cap);
    std::sort(ids.begin(), ids.end());
    sample_store.resize(cap * dim);
    for (std::size_t i = 0; i < cap; ++i) std::copy_n(bank->keys.data() + std::size_t{ids[i]} * dim, dim, sample_store.data() + i * dim);
    train = sample_store;
    n_train = cap;
  }

  // Partition.
  {
    Rng rng = make_stream(params.seed, kLeafTag);
    KMeansOptions opt{params.num_leaves, params.kmeans_iters, KMeansMetric::kSpherical, threads};
    index.centroids_ = kmeans(train, n_train, dim, opt, rng);
    const auto leaf_of = assign_to_centroids(bank->keys, rows, dim, index.centroids_, params.num_leaves,
                                             KMeansMetric::kSpherical, threads);
    index.leaf_offsets_.assign(params.num_leaves + 1, 0);
    for (auto l : leaf_of) ++index.leaf_offsets_[l + 1];
    for (std::uint32_t l = 0; l < params.num_leaves; ++l) index.leaf_offsets_[l + 1] += index.leaf_offsets_[l];
    index.leaf_rows_.resize(rows);
    index.row_slot_.resize(rows);
    std::vector<std::uint32_t> fill(index.leaf_offsets_.begin(), index.leaf_offsets_.end() - 1);
    for (std::uint32_t r = 0; r < rows; ++r) {
      const std::uint32_t slot = fill[leaf_of[r]]++;
      index.leaf_rows_[slot] = r;
      index.row_slot_[r] = slot;
    }
  }

  // Per-block codebooks over raw key sub-vectors.
  const std::uint32_t dpb = params.dims_per_block;
  index.codebooks_.assign(std::size_t{index.num_blocks_} * kCodebookSize * dpb, 0.0f);
  std::vector<float> sub(n_train * dpb);
  for (std::uint32_t b = 0; b < index.num_blocks_; ++b) {
    for (std::size_t i = 0; i < n_train; ++i) {
      std::copy_n(train.data() + i * dim + std::size_t{b} * dpb, dpb, sub.data() + i * dpb);
    }
    Rng rng = make_stream(params.seed, kCodebookTag, b);
    const auto centers_k = static_cast<std::uint32_t>(std::min<std::size_t>(kCodebookSize, n_train));
    KMeansOptions opt{centers_k, params.kmeans_iters, KMeansMetric::kEuclidean, threads};
    const auto centers = kmeans(sub, n_train, dpb, opt, rng);
    float* book = index.codebooks_.data() + std::size_t{b} * kCodebookSize * dpb;
    for (std::uint32_t c = 0; c < kCodebookSize; ++c) {
      std::copy_n(centers.data() + std::size_t{c % centers_k} * dpb, dpb, book + std::size_t{c} * dpb);
    }
  }

  // Encode every row, stored in leaf order.
  index.codes_.assign(rows * index.code_bytes_, 0);
  parallel_for(
      (rows + 4095) / 4096,
      [&](std::size_t chunk) {
        const std::size_t lo = chunk * 4096, hi = std::min(rows, lo + 4096);
        for (std::size_t slot = lo; slot < hi; ++slot) {
          const float* key = bank->keys.data() + std::size_t{index.leaf_rows_[slot]} * dim;
          std::uint8_t* out = index.codes_.data() + slot * index.code_bytes_;
          for (std::uint32_t b = 0; b < index.num_blocks_; ++b) {
            const float* book = index.codebooks_.data() + std::size_t{b} * kCodebookSize * dpb;
            std::uint8_t best = 0;
            float best_d = std::numeric_limits<float>::infinity();
            for (std::uint32_t c = 0; c < kCodebookSize; ++c) {
              const float d = squared_l2(key + std::size_t{b} * dpb, book + std::size_t{c} * dpb, dpb);
              if (d < best_d) {
                best_d = d;
                best = static_cast<std::uint8_t>(c);
              }
            }
            out[b / 2] |= static_cast<std::uint8_t>(b % 2 == 0 ? best : best << 4);
          }
        }
      },
      threads);
  return index;
}

std::span<const float> AnnIndex::centroid(std::uint32_t leaf) const {
  return {centroids_.data() + std::size_t{leaf} * dim(), dim()};
}

std::span<const std::uint32_t> AnnIndex::leaf_rows(std::uint32_t leaf) const {
  return {leaf_rows_.data() + leaf_offsets_[leaf], leaf_offsets_[leaf + 1] - leaf_offsets_[leaf]};
}

std::span<const float> AnnIndex::codebook(std::uint32_t block) const {
  const std::size_t n = std::size_t{kCodebookSize} * params_.dims_per_block;
  return {codebooks_.data() + block * n, n};
}

std::uint8_t AnnIndex::code(std::uint32_t row, std::uint32_t block) const {
  const std::uint8_t byte = codes_[std::size_t{row_slot_.at(row)} * code_bytes_ + block / 2];
  return block % 2 == 0 ? (byte & 0x0F) : (byte >> 4);
}

std::vector<float> AnnIndex::reconstruct(std::uint32_t row) const {
  if (mode_ != IndexMode::kQuantized) throw Error("reconstruct() needs a quantized index");
  const std::uint32_t dpb = params_.dims_per_block;
  std::vector<float> out(dim());
  for (std::uint32_t b = 0; b < num_blocks_; ++b) {
    const auto book = codebook(b);
    std::copy_n(book.data() + std::size_t{code(row, b)} * dpb, dpb, out.data() + std::size_t{b} * dpb);
  }
  return out;
}

std::vector<Neighbor> AnnIndex::search_quantized(const float* q, std::size_t k, std::uint32_t probe,
                                                 std::uint32_t reorder, std::vector<float>& lut) const {
  const std::uint32_t d = dim();
  const std::uint32_t dpb = params_.dims_per_block;

  // Leaves ranked by centroid similarity; probe more than requested when the
  // chosen leaves hold fewer than k rows.
  std::vector<Candidate> leaves(num_leaves_);
  for (std::uint32_t l = 0; l < num_leaves_; ++l) leaves[l] = {dot(q, centroids_.data() + std::size_t{l} * d, d), l};
  std::sort(leaves.begin(), leaves.end(), better);
  std::size_t probed = 0, candidates = 0;
  while (probed < num_leaves_ && (probed < probe || candidates < k)) {
    const auto l = leaves[probed++].row;
    candidates += leaf_offsets_[l + 1] - leaf_offsets_[l];
  }

  // Pairwise byte tables: one 256-entry table per code byte (two blocks).
  float block_lut[2][kCodebookSize];
  lut.assign(std::size_t{code_bytes_} * 256, 0.0f);
  for (std::uint32_t byte = 0; byte < code_bytes_; ++byte) {
    for (std::uint32_t half = 0; half < 2; ++half) {
      const std::uint32_t b = byte * 2 + half;
      for (std::uint32_t c = 0; c < kCodebookSize; ++c) {
        block_lut[half][c] = b < num_blocks_
                                 ? dot(q + std::size_t{b} * dpb, codebooks_.data() + (std::size_t{b} * kCodebookSize + c) * dpb, dpb)
                                 : 0.0f;
      }
    }
    float* t = lut.data() + std::size_t{byte} * 256;
    for (std::uint32_t v = 0; v < 256; ++v) t[v] = block_lut[0][v & 15] + block_lut[1][v >> 4];
  }

  TopK shortlist(std::max<std::size_t>(reorder, k));
  for (std::size_t i = 0; i < probed; ++i) {
    const std::uint32_t l = leaves[i].row;
    const std::uint32_t begin = leaf_offsets_[l], end = leaf_offsets_[l + 1];
    const std::uint8_t* codes = codes_.data() + std::size_t{begin} * code_bytes_;
    for (std::uint32_t slot = begin; slot < end; ++slot, codes += code_bytes_) {
      float s = 0.0f;
      for (std::uint32_t byte = 0; byte < code_bytes_; ++byte) s += lut[std::size_t{byte} * 256 + codes[byte]];
      shortlist.push(s, leaf_rows_[slot]);
    }
  }

  auto picked = shortlist.take_sorted();
  for (auto& c : picked) c.score = dot(q, bank_->keys.data() + std::size_t{c.row} * d, d);
  std::sort(picked.begin(), picked.end(), better);
  return to_neighbors(picked, k);
}

std::vector<Neighbor> AnnIndex::search(std::span<const float> query, std::size_t k,
                                       const SearchParams& overrides) const {
  if (query.size() != dim()) throw ShapeError("query dimension does not match the index");
  auto batch = search_batch(query, k, overrides, 1);
  return std::move(batch.front());
}

std::vector<std::vector<Neighbor>> AnnIndex::search_batch(std::span<const float> queries, std::size_t k,
                                                          const SearchParams& overrides,
                                                          std::size_t threads) const {
  const std::uint32_t d = dim();
  if (queries.size() % d != 0) throw ShapeError("query buffer is not a multiple of the index dimension");
  if (k == 0) throw ConfigError("k must be >= 1");
  const std::size_t nq = queries.size() / d;
  std::vector<float> unit(queries.size());
  for (std::size_t i = 0; i < nq; ++i) {
    unit_query(queries.subspan(i * d, d), d, std::span<float>(unit.data() + i * d, d));
  }
  std::vector<std::vector<Neighbor>> results(nq);
  const std::size_t rows = bank_->size();

  if (mode_ == IndexMode::kExact) {
    constexpr std::size_t kQueryChunk = 64;
    const std::size_t chunks = (nq + kQueryChunk - 1) / kQueryChunk;
    parallel_for(
        chunks,
        [&](std::size_t chunk) {
          const std::size_t q0 = chunk * kQueryChunk, q1 = std::min(nq, q0 + kQueryChunk);
          std::vector<TopK> tops;
          tops.reserve(q1 - q0);
          for (std::size_t q = q0; q < q1; ++q) tops.emplace_back(std::min(k, rows));
          for (std::size_t r0 = 0; r0 < rows; r0 += kScanBlock) {
            const std::size_t r1 = std::min(rows, r0 + kScanBlock);
            for (std::size_t q = q0; q < q1; ++q) {
              const float* qv = unit.data() + q * d;
              TopK& top = tops[q - q0];
              for (std::size_t r = r0; r < r1; ++r) {
                top.push(dot(qv, bank_->keys.data() + r * d, d), static_cast<std::uint32_t>(r));
              }
            }
          }
          for (std::size_t q = q0; q < q1; ++q) results[q] = to_neighbors(tops[q - q0].take_sorted(), k);
        },
        threads);
    return results;
  }

  const std::uint32_t probe = overrides.leaves_to_search ? overrides.leaves_to_search : params_.leaves_to_search;
  const std::uint32_t reorder = overrides.reorder_n ? overrides.reorder_n : params_.reorder_n;
  if (probe > num_leaves_) throw ConfigError("leaves_to_search exceeds num_leaves");
  if (reorder < std::min(k, rows)) {
    throw ConfigError("reorder_n = " + std::to_string(reorder) + " is smaller than k = " + std::to_string(k));
  }
  parallel_for(
      nq,
      [&](std::size_t q) {
        thread_local std::vector<float> lut;
        results[q] = search_quantized(unit.data() + q * d, k, probe, reorder, lut);
      },
      threads);
  return results;
}

std::vector<std::uint8_t> AnnIndex::encode() const {
  io::ByteWriter w;
  w.magic(kIndexMagic);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(mode_));
  w.put<std::uint32_t>(dim());
  w.put<std::uint64_t>(bank_->size());
  w.put<std::uint32_t>(params_.num_leaves);
  w.put<std::uint32_t>(params_.leaves_to_search);
  w.put<std::uint32_t>(params_.dims_per_block);
  w.put<std::uint32_t>(params_.reorder_n);
  w.put<std::uint32_t>(params_.kmeans_iters);
  w.put<std::uint64_t>(params_.seed);
  w.put<std::uint64_t>(params_.train_sample);
  if (mode_ == IndexMode::kQuantized) {
    w.put_array<float>(centroids_);
    for (std::uint32_t l = 0; l < num_leaves_; ++l) w.put<std::uint32_t>(leaf_offsets_[l + 1] - leaf_offsets_[l]);
    w.put_array<std::uint32_t>(leaf_rows_);
    w.put_array<float>(codebooks_);
    w.put_array<std::uint8_t>(codes_);
  }
  return std::move(w).take();
}

AnnIndex AnnIndex::decode(std::span<const std::uint8_t> bytes, std::shared_ptr<const MemoryBank> bank) {
  io::ByteReader r(bytes);
  r.expect_magic(kIndexMagic, "HBIX");
  const std::uint64_t mode_at = r.offset();
  const auto mode = r.get<std::uint8_t>("index mode");
  if (mode > 1) throw ParseError("unknown index mode " + std::to_string(mode), mode_at);
  const std::uint64_t dims_at = r.offset();
  const auto d = r.get<std::uint32_t>("index dim");
  const auto rows = r.get<std::uint64_t>("index rows");
  if (!bank || d != bank->dim || rows != bank->size()) {
    throw ParseError("index section does not match the bank it follows", dims_at);
  }
  IndexParams p;
  p.num_leaves = r.get<std::uint32_t>("num_leaves");
  p.leaves_to_search = r.get<std::uint32_t>("leaves_to_search");
  p.dims_per_block = r.get<std::uint32_t>("dims_per_block");
  p.reorder_n = r.get<std::uint32_t>("reorder_n");
  p.kmeans_iters = r.get<std::uint32_t>("kmeans_iters");
  p.seed = r.get<std::uint64_t>("seed");
  p.train_sample = r.get<std::uint64_t>("train_sample");

  AnnIndex index = build_exact(bank);
  index.params_ = p;
  if (mode == static_cast<std::uint8_t>(IndexMode::kQuantized)) {
    const std::uint64_t params_at = r.offset();
    try {
      p.validate(d, rows);
    } catch (const ConfigError& e) {
      throw ParseError(std::string("invalid index parameters: ") + e.what(), params_at);
    }
    index.mode_ = IndexMode::kQuantized;
    index.num_leaves_ = p.num_leaves;
    index.num_blocks_ = d / p.dims_per_block;
    index.code_bytes_ = (index.num_blocks_ + 1) / 2;
    index.centroids_.resize(std::size_t{p.num_leaves} * d);
    r.get_array<float>(index.centroids_, "centroids");
    index.leaf_offsets_.assign(p.num_leaves + 1, 0);
    for (std::uint32_t l = 0; l < p.num_leaves; ++l) {
      index.leaf_offsets_[l + 1] = index.leaf_offsets_[l] + r.get<std::uint32_t>("leaf size");
    }
    const std::uint64_t rows_at = r.offset();
    if (index.leaf_offsets_.back() != rows) throw ParseError("leaf sizes do not sum to the row count", rows_at);
    index.leaf_rows_.resize(rows);
    r.get_array<std::uint32_t>(index.leaf_rows_, "leaf rows");
    index.row_slot_.assign(rows, std::numeric_limits<std::uint32_t>::max());
    for (std::uint32_t slot = 0; slot < rows; ++slot) {
      const auto row = index.leaf_rows_[slot];
      if (row >= rows || index.row_slot_[row] != std::numeric_limits<std::uint32_t>::max()) {
        throw ParseError("leaf rows are not a permutation of the bank rows", rows_at);
      }
      index.row_slot_[row] = slot;
    }
    index.codebooks_.resize(std::size_t{index.num_blocks_} * kCodebookSize * p.dims_per_block);
    r.get_array<float>(index.codebooks_, "codebooks");
    index.codes_.resize(rows * index.code_bytes_);
    r.get_array<std::uint8_t>(index.codes_, "codes");
  }
  if (!r.at_end()) throw ParseError("trailing bytes after the index section", r.offset());
  return index;
}

double recall_at_k(std::span<const Neighbor> approx, std::span<const Neighbor> exact, std::size_t k) {
  if (k == 0) throw ShapeError("recall@k needs k >= 1");
  if (approx.size() > k || exact.size() != k) {
    throw ShapeError("recall@" + std::to_string(k) + ": got " + std::to_string(approx.size()) +
                     " approximate and " + std::to_string(exact.size()) + " exact results");
  }
  std::unordered_set<std::uint32_t> truth;
  for (const auto& n : exact) truth.insert(n.row);
  std::unordered_set<std::uint32_t> seen;
  std::size_t hits = 0;
  for (const auto& n : approx) {
    if (truth.count(n.row) && seen.insert(n.row).second) ++hits;
  }
  return double(hits) / double(k);
}

void write_bank_file(const std::filesystem::path& path, const MemoryBank& bank, const AnnIndex* index) {
  auto bytes = encode_bank(bank);
  if (index) {
    if (&index->bank() != &bank && !(index->bank() == bank)) throw Error("index was built over a different bank");
    const auto section = index->encode();
    bytes.insert(bytes.end(), section.begin(), section.end());
  }
  io::write_file(path, bytes);
}

BankFile decode_bank_file(std::span<const std::uint8_t> bytes) {
  std::size_t used = 0;
  auto bank = std::make_shared<const MemoryBank>(decode_bank(bytes, &used));
  BankFile file{bank, std::nullopt};
  if (used < bytes.size()) {
    try {
      file.index = AnnIndex::decode(bytes.subspan(used), bank);
    } catch (const ParseError& e) {
      throw ParseError(std::string("HBIX section: ") + e.what(), used + e.offset());
    }
  }
  return file;
}

BankFile read_bank_file(const std::filesystem::path& path) { return decode_bank_file(io::read_file(path)); }

}  // namespace nnscene
