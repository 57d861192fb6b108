#include "nnscene/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>

#include "nnscene/binary_io.hpp"
#include "nnscene/decoder.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/synthetic.hpp"

namespace nnscene {
namespace {

constexpr std::uint64_t kQuerySeedTag = 0x51;
constexpr std::uint32_t kBenchClasses = 4;
constexpr std::string_view kCsvHeader =
    "bank_size,index_mode,k,leaves_to_search,reorder_n,mean_latency_us,p50_us,p95_us,recall_at_k,seed";

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * double(v.size())));
  return v[std::max<std::size_t>(rank, 1) - 1];
}

std::shared_ptr<const MemoryBank> synthetic_bank(std::uint64_t size, const SweepOptions& o) {
  auto bank = std::make_shared<MemoryBank>();
  bank->dim = o.dim;
  bank->spec = {Task::kSegmentation, kBenchClasses};
  bank->keys = clustered_unit_vectors(size, o.dim, o.clusters, o.spread, o.seed, o.seed);
  bank->values.assign(size * bank->spec.channels(), 0.0f);
  bank->provenance.resize(size);
  for (std::uint64_t r = 0; r < size; ++r) {
    bank->values[r * bank->spec.channels() + r % kBenchClasses] = 1.0f;
    bank->provenance[r] = {r, 0, 0};
  }
  return bank;
}

FeatureGrid query_grid(const SweepOptions& o) {
  FeatureGrid g;
  g.height = o.grid_height;
  g.width = o.grid_width;
  g.dim = o.dim;
  g.features = clustered_unit_vectors(g.num_patches(), o.dim, o.clusters, o.spread, o.seed ^ kQuerySeedTag, o.seed);
  return g;
}

struct Timing {
  double mean_us, p50_us, p95_us;
};

Timing time_decode(const FeatureGrid& grid, const AnnIndex& index, const DecodeConfig& cfg, const SweepOptions& o) {
  using clock = std::chrono::steady_clock;
  // Warm-up on one row of the grid.
  FeatureGrid warm = grid;
  warm.height = 1;
  warm.features.resize(std::size_t{grid.width} * grid.dim);
  decode_image(warm, index, cfg);

  std::vector<double> samples;
  double spent = 0.0;
  std::uint32_t inner = 1;
  while (samples.size() < o.max_samples && (samples.size() < o.min_samples || spent < o.time_budget_s)) {
    const auto t0 = clock::now();
    for (std::uint32_t i = 0; i < inner; ++i) decode_image(grid, index, cfg);
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    spent += s;
    if (s < o.min_sample_s) {
      inner *= 2;
      continue;
    }
    samples.push_back(s / inner * 1e6);
  }
  if (samples.empty()) throw Error("benchmark produced no timing samples");
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= double(samples.size());
  return {mean, percentile(samples, 0.50), percentile(samples, 0.95)};
}

double mean_recall(const AnnIndex& approx, const AnnIndex& exact, const FeatureGrid& grid, std::size_t k,
                   std::size_t threads) {
  const auto a = approx.search_batch(grid.features, k, {}, threads);
  const auto e = exact.search_batch(grid.features, k, {}, threads);
  double sum = 0.0;
  const std::size_t kk = std::min<std::size_t>(k, exact.bank().size());
  for (std::size_t q = 0; q < a.size(); ++q) sum += recall_at_k(a[q], e[q], kk);
  return sum / double(a.size());
}

}  // namespace

bool BenchRow::operator==(const BenchRow& o) const {
  auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
  return bank_size == o.bank_size && index_mode == o.index_mode && k == o.k &&
         leaves_to_search == o.leaves_to_search && reorder_n == o.reorder_n &&
         same(mean_latency_us, o.mean_latency_us) && same(p50_us, o.p50_us) && same(p95_us, o.p95_us) &&
         same(recall_at_k, o.recall_at_k) && seed == o.seed;
}

std::uint64_t estimate_bench_bytes(std::uint64_t size, std::uint32_t dim) {
  const std::uint64_t keys = size * dim * 4;
  const std::uint64_t values = size * (kBenchClasses + 1) * 4;
  const std::uint64_t provenance = size * 16;
  const std::uint64_t index = size * (dim / 8 + 12);
  return keys + values + provenance + index;
}

std::vector<BenchRow> run_latency_sweep(std::span<const std::uint64_t> sizes, const SweepOptions& o,
                                        const std::function<void(const BenchRow&)>& on_row) {
  if (sizes.empty()) throw ConfigError("no bank sizes to sweep");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) throw ConfigError("bank sizes must be >= 1");
    if (i > 0 && sizes[i] < sizes[i - 1]) throw ConfigError("bank sizes must be ascending");
  }
  const std::uint64_t need = estimate_bench_bytes(sizes.back(), o.dim);
  if (need > o.memory_budget_bytes) {
    throw ConfigError("bank size " + std::to_string(sizes.back()) + " needs about " + std::to_string(need >> 20) +
                      " MiB, over the " + std::to_string(o.memory_budget_bytes >> 20) + " MiB budget");
  }
  if (o.modes.empty()) throw ConfigError("no index modes to sweep");
  if (o.min_samples == 0 || o.max_samples < o.min_samples) throw ConfigError("bad sample counts");

  const FeatureGrid grid = query_grid(o);
  DecodeConfig cfg;
  cfg.k = o.k;
  cfg.temperature = o.temperature;
  cfg.threads = o.threads;

  std::vector<BenchRow> rows;
  for (const std::uint64_t size : sizes) {
    const auto bank = synthetic_bank(size, o);
    std::optional<AnnIndex> exact;
    auto exact_index = [&]() -> const AnnIndex& {
      if (!exact) exact = AnnIndex::build_exact(bank);
      return *exact;
    };
    for (const IndexMode mode : o.modes) {
      BenchRow row;
      row.bank_size = size;
      row.index_mode = mode;
      row.k = static_cast<std::uint32_t>(o.k);
      row.seed = o.seed;
      if (mode == IndexMode::kExact) {
        const Timing t = time_decode(grid, exact_index(), cfg, o);
        row.mean_latency_us = t.mean_us;
        row.p50_us = t.p50_us;
        row.p95_us = t.p95_us;
        row.recall_at_k = 1.0;
      } else {
        const IndexParams params = o.index_params ? *o.index_params : IndexParams::scaled_for(size);
        const AnnIndex index = AnnIndex::build_quantized(bank, params, o.threads);
        row.leaves_to_search = params.leaves_to_search;
        row.reorder_n = params.reorder_n;
        const Timing t = time_decode(grid, index, cfg, o);
        row.mean_latency_us = t.mean_us;
        row.p50_us = t.p50_us;
        row.p95_us = t.p95_us;
        row.recall_at_k = size <= o.recall_max_size ? mean_recall(index, exact_index(), grid, o.k, o.threads)
                                                    : std::numeric_limits<double>::quiet_NaN();
      }
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string emit_csv(std::span<const BenchRow> rows) {
  std::string out(kCsvHeader);
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.bank_size) + "," + std::string(to_string(r.index_mode)) + "," + std::to_string(r.k) + "," +
           std::to_string(r.leaves_to_search) + "," + std::to_string(r.reorder_n) + "," + num(r.mean_latency_us) +
           "," + num(r.p50_us) + "," + num(r.p95_us) + "," + num(r.recall_at_k) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::vector<BenchRow> parse_csv(std::string_view text) {
  std::vector<BenchRow> rows;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kCsvHeader) throw ConfigError("unexpected benchmark CSV header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 10) throw ConfigError("line " + std::to_string(line_no) + ": expected 10 fields");
    auto u64 = [&](const std::string& s) {
      char* end = nullptr;
      const auto v = std::strtoull(s.c_str(), &end, 10);
      if (s.empty() || *end) throw ConfigError("line " + std::to_string(line_no) + ": bad integer '" + s + "'");
      return static_cast<std::uint64_t>(v);
    };
    auto f64 = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || *end) throw ConfigError("line " + std::to_string(line_no) + ": bad number '" + s + "'");
      return v;
    };
    BenchRow r;
    r.bank_size = u64(f[0]);
    r.index_mode = parse_index_mode(f[1]);
    r.k = static_cast<std::uint32_t>(u64(f[2]));
    r.leaves_to_search = static_cast<std::uint32_t>(u64(f[3]));
    r.reorder_n = static_cast<std::uint32_t>(u64(f[4]));
    r.mean_latency_us = f64(f[5]);
    r.p50_us = f64(f[6]);
    r.p95_us = f64(f[7]);
    r.recall_at_k = f64(f[8]);
    r.seed = u64(f[9]);
    rows.push_back(r);
  }
  return rows;
}

std::string render_svg(std::span<const BenchRow> rows) {
  if (rows.empty()) throw ConfigError("cannot plot zero benchmark rows");
  constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 20, kTop = 30, kBottom = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, ymax = 0.0;
  for (const auto& r : rows) {
    const double x = std::log10(double(std::max<std::uint64_t>(r.bank_size, 1)));
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    ymax = std::max(ymax, r.mean_latency_us / 1000.0);
  }
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  if (!(ymax > 0.0)) ymax = 1.0;
  ymax *= 1.1;
  auto px = [&](double size) { return kLeft + (std::log10(size) - lo) / (hi - lo) * (kW - kLeft - kRight); };
  auto py = [&](double ms) { return kH - kBottom - ms / ymax * (kH - kTop - kBottom); };

  std::map<IndexMode, std::vector<const BenchRow*>> curves;
  for (const auto& r : rows) curves[r.index_mode].push_back(&r);

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
    << " " << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  for (int d = static_cast<int>(std::ceil(lo - 1e-9)); d <= static_cast<int>(std::floor(hi + 1e-9)); ++d) {
    const double x = px(std::pow(10.0, d));
    s << "<line x1=\"" << fixed(x, 2) << "\" y1=\"" << kH - kBottom << "\" x2=\"" << fixed(x, 2) << "\" y2=\""
      << kH - kBottom + 5 << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << fixed(x, 2) << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"middle\">1e" << d
      << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double ms = ymax * i / 4.0;
    s << "<text x=\"" << kLeft - 6 << "\" y=\"" << fixed(py(ms) + 4, 2) << "\" text-anchor=\"end\">" << fixed(ms, 2)
      << "</text>\n";
  }
  s << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 10
    << "\" text-anchor=\"middle\">memory bank length</text>\n";
  s << "<text x=\"16\" y=\"" << (kTop + kH - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (kTop + kH - kBottom) / 2 << ")\">latency per image (ms)</text>\n";

  int legend = 0;
  for (const auto& [mode, pts] : curves) {
    const char* color = mode == IndexMode::kExact ? "#1f77b4" : "#d62728";
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      s << (i ? " " : "") << fixed(px(double(pts[i]->bank_size)), 2) << "," << fixed(py(pts[i]->mean_latency_us / 1000.0), 2);
    }
    s << "\"/>\n";
    for (const BenchRow* p : pts) {
      s << "<circle cx=\"" << fixed(px(double(p->bank_size)), 2) << "\" cy=\"" << fixed(py(p->mean_latency_us / 1000.0), 2)
        << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    s << "<text x=\"" << kLeft + 10 << "\" y=\"" << kTop + 14 * legend << "\" fill=\"" << color << "\">"
      << to_string(mode) << "</text>\n";
    ++legend;
  }
  s << "</svg>\n";
  return s.str();
}

void emit_plot(std::span<const BenchRow> rows, const std::filesystem::path& path) {
  const std::string svg = render_svg(rows);
  const std::string csv = emit_csv(rows);
  std::filesystem::path csv_path = path;
  csv_path.replace_extension(".csv");
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(svg.data()), svg.size()));
  io::write_file(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
}

}  // namespace nnscene
