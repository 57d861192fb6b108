#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nnscene/ann_index.hpp"
#include "nnscene/bench.hpp"
#include "nnscene/binary_io.hpp"
#include "nnscene/decoder.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/feature_store.hpp"
#include "nnscene/memory_bank.hpp"
#include "nnscene/metrics.hpp"
#include "nnscene/parallel.hpp"
#include "nnscene/synthetic.hpp"
#include "nnscene/toy_trainer.hpp"

namespace nnscene::cli {
namespace {

namespace fs = std::filesystem;

struct Preset {
  std::uint64_t memory_size;
  std::uint32_t aug_epochs;
  std::size_t k;
  double temperature;
  // Leaves probed out of 512; scaled with the leaf count for smaller banks.
  std::uint32_t probe_per_512;
  std::uint32_t reorder_n;
};

constexpr Preset kDefaultPreset{10'240'000, 2, 30, 0.02, 32, 120};
constexpr Preset kLowDataPreset{20'480'000, 8, 90, 0.1, 256, 1800};

const Preset& preset_named(const std::string& name) {
  return name == "low-data" ? kLowDataPreset : kDefaultPreset;
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct SynthArgs {
  std::uint32_t images = 8;
  std::uint32_t classes = 4;
  std::uint32_t height = 8;
  std::uint32_t width = 8;
  std::uint32_t dim = 64;
  double noise = 0.1;
  std::uint32_t epochs = 2;
  std::uint64_t seed = 0;
  std::uint64_t first_id = 0;
  std::string task = "segmentation";
  std::string layout = "stripes";
  double ignore_probability = 0.0;
  std::string out = "synth.hbfs";
};

struct IndexFlags {
  std::optional<std::uint32_t> num_leaves;
  std::optional<std::uint32_t> leaves_to_search;
  std::optional<std::uint32_t> dims_per_block;
  std::optional<std::uint32_t> reorder_n;
  std::uint32_t kmeans_iters = 10;

  IndexParams resolve(std::size_t bank_size, std::uint64_t seed, const Preset& preset = kDefaultPreset) const {
    IndexParams p = IndexParams::scaled_for(bank_size);
    if (num_leaves) p.num_leaves = *num_leaves;
    if (num_leaves || preset.probe_per_512 != kDefaultPreset.probe_per_512) {
      const auto scaled = static_cast<std::uint32_t>(std::lround(p.num_leaves * (preset.probe_per_512 / 512.0)));
      p.leaves_to_search = std::clamp<std::uint32_t>(scaled, 1, p.num_leaves);
    }
    p.reorder_n = preset.reorder_n;
    if (leaves_to_search) p.leaves_to_search = *leaves_to_search;
    if (dims_per_block) p.dims_per_block = *dims_per_block;
    if (reorder_n) p.reorder_n = *reorder_n;
    p.kmeans_iters = kmeans_iters;
    p.seed = seed;
    return p;
  }
};

void add_index_flags(CLI::App* app, IndexFlags& f) {
  app->add_option("--num-leaves", f.num_leaves,
                  "Partition leaves [512 from 2,621,440 rows; round(sqrt(|M|)/2) below]");
  app->add_option("--leaves-to-search", f.leaves_to_search,
                  "Leaves probed per query [32 from 2,621,440 rows; 32/512 of the leaves below]");
  app->add_option("--dims-per-block", f.dims_per_block, "Dimensions per 4-bit code block [4]");
  app->add_option("--reorder-n", f.reorder_n, "Candidates rescored exactly [120]");
  app->add_option("--kmeans-iters", f.kmeans_iters, "Lloyd iterations for partition and codebooks");
}

struct BuildBankArgs {
  std::string features;
  std::string out;
  std::uint64_t memory_size = kDefaultPreset.memory_size;
  std::uint32_t aug_epochs = kDefaultPreset.aug_epochs;
  bool no_downsample = false;
  std::string index = "quantized";
  IndexFlags index_flags;
  std::uint64_t seed = 0;
  std::string preset = "default";
};

struct DecodeFlags {
  std::size_t k = kDefaultPreset.k;
  double temperature = kDefaultPreset.temperature;
  std::optional<std::uint32_t> leaves_to_search;
  std::optional<std::uint32_t> reorder_n;
  bool exact = false;
  std::size_t epoch = 0;
  std::string preset = "default";
};

void add_decode_flags(CLI::App* app, DecodeFlags& f, CLI::Option*& k_opt, CLI::Option*& t_opt) {
  k_opt = app->add_option("--k", f.k, "Nearest neighbors per query patch");
  t_opt = app->add_option("--temperature", f.temperature, "Softmax temperature on cosine scores");
  app->add_option("--leaves-to-search", f.leaves_to_search, "Override the stored leaves_to_search");
  app->add_option("--reorder-n", f.reorder_n, "Override the stored reorder_n");
  app->add_flag("--exact", f.exact, "Ignore the stored quantized index and scan every key");
  app->add_option("--epoch", f.epoch, "Epoch of the query feature set to decode");
  app->add_option("--preset", f.preset, "Named defaults: low-data sets k 90, temperature 0.1")
      ->check(CLI::IsMember({"default", "low-data"}));
}

struct DecodeArgs {
  std::string bank;
  std::string features;
  std::string out;
  bool with_distributions = false;
  DecodeFlags flags;
};

struct EvalArgs {
  std::string bank;
  std::string predictions;
  std::string features;
  std::string format = "kv";
  std::string report;
  DecodeFlags flags;
};

struct BenchArgs {
  std::vector<std::uint64_t> sizes{10'000, 100'000, 1'000'000, 4'000'000};
  std::vector<std::string> modes{"exact", "quantized"};
  std::string out = "bench.csv";
  std::string plot;
  std::uint32_t dim = 64;
  std::uint32_t grid = 32;
  std::size_t k = kDefaultPreset.k;
  double temperature = kDefaultPreset.temperature;
  IndexFlags index_flags;
  std::uint64_t seed = 0;
  std::size_t clusters = 1024;
  double spread = 0.5;
  std::uint64_t recall_max_size = 1'000'000;
  double memory_budget_gib = 3.0;
  std::uint32_t min_samples = 3;
  std::uint32_t max_samples = 15;
  double time_budget = 2.0;
  std::size_t threads = 1;
};

struct PretrainArgs {
  std::string config;
  std::string log = "loss.csv";
  std::string checkpoint;
  std::optional<std::uint32_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<double> lambda;
  std::optional<double> alpha;
  std::optional<double> tau;
  std::optional<std::string> pooling;
  std::optional<std::size_t> bank_size;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SyntheticSceneOptions o;
  o.num_images = a.images;
  o.num_classes = a.classes;
  o.height = a.height;
  o.width = a.width;
  o.dim = a.dim;
  o.noise_sigma = a.noise;
  o.num_epochs = a.epochs;
  o.seed = a.seed;
  o.first_image_id = a.first_id;
  o.task = parse_task(a.task);
  o.layout = a.layout == "voronoi" ? SceneLayout::kVoronoi : SceneLayout::kStripes;
  o.ignore_probability = a.ignore_probability;
  const FeatureSet set = generate_synthetic_scenes(o);
  write_feature_set(set, a.out);
  out << "wrote " << a.out << ": " << set.num_images() << " images x " << set.num_epochs() << " epochs, "
      << a.height << "x" << a.width << " patches, D=" << a.dim << "\n";
  return kExitOk;
}

int cmd_build_bank(const BuildBankArgs& a, std::ostream& out) {
  const IndexMode mode = parse_index_mode(a.index);
  const FeatureSet set = read_feature_set(a.features);
  SamplerConfig cfg;
  cfg.capacity = a.memory_size;
  cfg.aug_epochs = a.aug_epochs;
  cfg.downsample = !a.no_downsample;
  cfg.seed = a.seed;
  const std::size_t threads = default_thread_count();
  BankBuildReport report;
  auto bank = std::make_shared<const MemoryBank>(build_bank(set, cfg, &report, threads));
  if (bank->empty()) throw ConfigError("the memory bank is empty");
  std::optional<AnnIndex> index;
  if (mode == IndexMode::kQuantized) {
    const IndexParams params = a.index_flags.resolve(bank->size(), a.seed, preset_named(a.preset));
    index = AnnIndex::build_quantized(bank, params, threads);
  }
  write_bank_file(a.out, *bank, index ? &*index : nullptr);
  out << "wrote " << a.out << ": " << bank->size() << " rows, D=" << bank->dim;
  if (cfg.downsample) out << ", n_per_image=" << report.n_per_image;
  if (report.truncated > 0) out << ", truncated=" << report.truncated;
  out << ", index=" << to_string(mode);
  if (index) {
    const auto& p = index->params();
    out << " (leaves " << p.num_leaves << ", probe " << p.leaves_to_search << ", block " << p.dims_per_block
        << ", reorder " << p.reorder_n << ")";
  }
  out << "\n";
  return kExitOk;
}

struct LoadedIndex {
  BankFile file;
  std::optional<AnnIndex> exact;

  const AnnIndex& get() const { return exact ? *exact : *file.index; }
};

LoadedIndex load_index(const std::string& path, bool force_exact) {
  LoadedIndex li{read_bank_file(path), std::nullopt};
  if (force_exact || !li.file.index) li.exact = AnnIndex::build_exact(li.file.bank);
  return li;
}

DecodeConfig decode_config(const DecodeFlags& f) {
  DecodeConfig cfg;
  cfg.k = f.k;
  cfg.temperature = f.temperature;
  if (f.leaves_to_search) cfg.search.leaves_to_search = *f.leaves_to_search;
  if (f.reorder_n) cfg.search.reorder_n = *f.reorder_n;
  cfg.threads = default_thread_count();
  cfg.validate();
  return cfg;
}

int cmd_decode(const DecodeArgs& a, std::ostream& out) {
  const DecodeConfig cfg = decode_config(a.flags);
  const LoadedIndex li = load_index(a.bank, a.flags.exact);
  const FeatureSet set = read_feature_set(a.features);
  const auto preds = predict_feature_set(set, li.get(), cfg, a.flags.epoch);
  write_predictions(a.out, preds, a.with_distributions);
  out << "wrote " << a.out << ": " << preds.size() << " predictions, index=" << to_string(li.get().mode())
      << ", k=" << cfg.k << ", temperature=" << cfg.temperature << "\n";
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const FeatureSet set = read_feature_set(a.features);
  if (a.flags.epoch >= set.num_epochs()) throw ConfigError("feature set has no epoch " + std::to_string(a.flags.epoch));
  std::vector<DensePrediction> preds;
  if (!a.predictions.empty()) {
    preds = read_predictions(a.predictions);
  } else {
    const DecodeConfig cfg = decode_config(a.flags);
    const LoadedIndex li = load_index(a.bank, a.flags.exact);
    preds = predict_feature_set(set, li.get(), cfg, a.flags.epoch);
  }
  const EvalReport report = evaluate_predictions(preds, set.epochs[a.flags.epoch], set.num_classes);
  const std::string text = a.format == "csv" ? report.to_csv() : report.to_key_value();
  out << text;
  if (!a.report.empty()) write_text(a.report, text);
  return kExitOk;
}

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  SweepOptions o;
  o.modes.clear();
  for (const auto& m : a.modes) o.modes.push_back(parse_index_mode(m));
  o.dim = a.dim;
  o.grid_height = o.grid_width = a.grid;
  o.k = a.k;
  o.temperature = a.temperature;
  o.seed = a.seed;
  o.clusters = a.clusters;
  o.spread = a.spread;
  o.recall_max_size = a.recall_max_size;
  o.memory_budget_bytes = static_cast<std::uint64_t>(a.memory_budget_gib * double(1ull << 30));
  o.min_samples = a.min_samples;
  o.max_samples = a.max_samples;
  o.time_budget_s = a.time_budget;
  o.threads = a.threads;
  const auto& f = a.index_flags;
  if (f.num_leaves || f.leaves_to_search || f.dims_per_block || f.reorder_n) {
    if (!f.num_leaves) throw ConfigError("--num-leaves is required when overriding bench index parameters");
    o.index_params = f.resolve(a.sizes.empty() ? 1 : a.sizes.front(), a.seed);
  }
  out << "bank_size,index_mode,mean_latency_us,p50_us,p95_us,recall_at_k\n";
  const auto rows = run_latency_sweep(a.sizes, o, [&](const BenchRow& r) {
    out << r.bank_size << "," << to_string(r.index_mode) << "," << r.mean_latency_us << "," << r.p50_us << ","
        << r.p95_us << "," << r.recall_at_k << "\n"
        << std::flush;
  });
  write_text(a.out, emit_csv(rows));
  if (!a.plot.empty()) emit_plot(rows, a.plot);
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  using namespace nnscene::pretrain;
  TrainerConfig cfg = a.config.empty() ? TrainerConfig{} : read_trainer_config(a.config);
  if (a.steps) cfg.steps = *a.steps;
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.lr = *a.lr;
  if (a.lambda) cfg.loss.lambda = *a.lambda;
  if (a.alpha) cfg.loss.alpha = *a.alpha;
  if (a.tau) cfg.loss.tau = *a.tau;
  if (a.pooling) cfg.loss.pooling = parse_pooling_mode(*a.pooling);
  if (a.bank_size) cfg.bank_size = *a.bank_size;
  cfg.validate();
  PretrainState state = PretrainState::init(cfg);
  const auto log = run_toy_training(cfg, &state);
  write_text(a.log, loss_csv(log));
  if (!a.checkpoint.empty()) io::write_file(a.checkpoint, encode_checkpoint(state));
  const std::size_t n = log.size();
  const std::size_t w = std::min<std::size_t>(20, n);
  out << "steps=" << n;
  if (n > 0) {
    out << " first_loss=" << smoothed_loss(log, w, w) << " last_loss=" << smoothed_loss(log, n, w);
  }
  out << "\nwrote " << a.log << "\n";
  return kExitOk;
}

// Checked after parsing so that an unknown token is reported before a
// missing required option.
struct RequiredOptions {
  std::vector<std::pair<CLI::App*, CLI::Option*>> options;

  void operator()(CLI::App* app, CLI::Option* opt) {
    opt->description(opt->get_description() + " (required)");
    options.emplace_back(app, opt);
  }
  void check() const {
    for (const auto& [app, opt] : options) {
      if (app->parsed() && opt->count() == 0) throw CLI::RequiredError(opt->get_name());
    }
  }
};

void apply_preset(const std::string& name, CLI::Option* k_opt, std::size_t& k, CLI::Option* t_opt, double& t) {
  const Preset& p = preset_named(name);
  if (k_opt && k_opt->count() == 0) k = p.k;
  if (t_opt && t_opt->count() == 0) t = p.temperature;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"nnscene: nearest-neighbor retrieval for in-context dense scene understanding", "nnscene"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  app.footer("Environment: NNSCENE_THREADS sets the worker count (default: hardware threads).");

  RequiredOptions req;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic HBFS feature set");
  s->add_option("--images", synth.images, "Images per epoch");
  s->add_option("--classes", synth.classes, "Segmentation classes");
  s->add_option("--height", synth.height, "Grid height in patches");
  s->add_option("--width", synth.width, "Grid width in patches");
  s->add_option("--dim", synth.dim, "Feature dimension");
  s->add_option("--noise", synth.noise, "Per-dimension feature noise sigma");
  s->add_option("--epochs", synth.epochs, "Augmentation epochs (noise redrawn per epoch)");
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--first-id", synth.first_id, "Image id of the first image");
  s->add_option("--task", synth.task, "Task")->check(CLI::IsMember({"segmentation", "depth"}));
  s->add_option("--layout", synth.layout, "Scene layout")->check(CLI::IsMember({"stripes", "voronoi"}));
  s->add_option("--ignore-prob", synth.ignore_probability, "Probability that a region is IGNORE");
  s->add_option("-o,--out", synth.out, "Output HBFS path");

  BuildBankArgs bb;
  auto* b = app.add_subcommand("build-bank", "Build a memory bank (and index) from an HBFS feature set");
  req(b, b->add_option("-f,--features", bb.features, "Input HBFS feature set"));
  req(b, b->add_option("-o,--out", bb.out, "Output bank file"));
  auto* mem_opt = b->add_option("--memory-size", bb.memory_size, "Memory bank length |M|");
  auto* ep_opt = b->add_option("--aug-epochs", bb.aug_epochs, "Augmentation epochs stored in the bank");
  b->add_flag("--no-downsample", bb.no_downsample, "Store every patch instead of |M|/(N*E) per image");
  b->add_option("--index", bb.index, "Index stored with the bank")->check(CLI::IsMember({"exact", "quantized"}));
  add_index_flags(b, bb.index_flags);
  b->add_option("--seed", bb.seed, "Random seed for sampling and index training");
  b->add_option("--preset", bb.preset, "Named defaults: low-data sets memory 20,480,000, 8 epochs, probe 256/512 leaves, reorder 1800")
      ->check(CLI::IsMember({"default", "low-data"}));

  DecodeArgs dec;
  CLI::Option *dec_k = nullptr, *dec_t = nullptr;
  auto* d = app.add_subcommand("decode", "Decode dense predictions for a query feature set");
  req(d, d->add_option("-b,--bank", dec.bank, "Bank file"));
  req(d, d->add_option("-f,--features", dec.features, "Query HBFS feature set"));
  req(d, d->add_option("-o,--out", dec.out, "Output HBPR prediction file"));
  d->add_flag("--with-distributions", dec.with_distributions, "Store per-pixel class distributions");
  add_decode_flags(d, dec.flags, dec_k, dec_t);

  EvalArgs ev;
  CLI::Option *ev_k = nullptr, *ev_t = nullptr;
  auto* e = app.add_subcommand("eval", "Decode (or load predictions) and report mIoU / RMSE");
  auto* ev_bank = e->add_option("-b,--bank", ev.bank, "Bank file to decode against");
  auto* ev_pred = e->add_option("-p,--predictions", ev.predictions, "HBPR predictions instead of decoding");
  ev_bank->excludes(ev_pred);
  req(e, e->add_option("-f,--features", ev.features, "HBFS feature set with ground-truth labels"));
  e->add_option("--format", ev.format, "Report format")->check(CLI::IsMember({"kv", "csv"}));
  e->add_option("--report", ev.report, "Also write the report to this path");
  add_decode_flags(e, ev.flags, ev_k, ev_t);

  BenchArgs be;
  auto* bn = app.add_subcommand("bench", "Lookup latency sweep over memory bank sizes");
  bn->add_option("--sizes", be.sizes, "Bank sizes, ascending")->delimiter(',');
  bn->add_option("--modes", be.modes, "Index modes")->delimiter(',')->check(CLI::IsMember({"exact", "quantized"}));
  bn->add_option("-o,--out", be.out, "Output CSV");
  bn->add_option("--plot", be.plot, "Also write an SVG plot (and CSV alongside)");
  bn->add_option("--dim", be.dim, "Feature dimension");
  bn->add_option("--grid", be.grid, "Query image is grid x grid patches");
  bn->add_option("--k", be.k, "Nearest neighbors per query patch");
  bn->add_option("--temperature", be.temperature, "Softmax temperature");
  add_index_flags(bn, be.index_flags);
  bn->add_option("--seed", be.seed, "Random seed");
  bn->add_option("--clusters", be.clusters, "Clusters in the synthetic key distribution");
  bn->add_option("--spread", be.spread, "Cluster spread of the synthetic keys");
  bn->add_option("--recall-max-size", be.recall_max_size, "Largest size with recall measured");
  bn->add_option("--memory-budget-gib", be.memory_budget_gib, "Reject sweeps needing more memory");
  bn->add_option("--min-samples", be.min_samples, "Minimum timing samples per row");
  bn->add_option("--max-samples", be.max_samples, "Maximum timing samples per row");
  bn->add_option("--time-budget", be.time_budget, "Seconds of sampling per row after the minimum");
  bn->add_option("--threads", be.threads, "Query threads during timing");

  PretrainArgs pt;
  auto* p = app.add_subcommand("pretrain-toy", "Toy contextual pretraining run on synthetic two-view data");
  p->add_option("-c,--config", pt.config, "key=value config file");
  p->add_option("--log", pt.log, "Loss log CSV (step,total,ssl,sup)");
  p->add_option("--checkpoint", pt.checkpoint, "Write the final state here");
  p->add_option("--steps", pt.steps, "Training steps [200]");
  p->add_option("--seed", pt.seed, "Random seed [0]");
  p->add_option("--lr", pt.lr, "Gradient-descent learning rate [0.001]");
  p->add_option("--lambda", pt.lambda, "Contextualization weight [0.2]");
  p->add_option("--alpha", pt.alpha, "Retrieval cross-entropy weight [0.05]");
  p->add_option("--tau", pt.tau, "Contrastive temperature [0.1]");
  p->add_option("--pooling", pt.pooling, "Attention pooling [qkv]")->check(CLI::IsMember({"mean", "qk", "qkv"}));
  p->add_option("--bank-size", pt.bank_size, "Pretraining memory length [153600]");

  try {
    app.parse(argc, argv);
    req.check();
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*b) {
      const Preset& pr = preset_named(bb.preset);
      if (mem_opt->count() == 0) bb.memory_size = pr.memory_size;
      if (ep_opt->count() == 0) bb.aug_epochs = pr.aug_epochs;
      return cmd_build_bank(bb, out);
    }
    if (*d) {
      apply_preset(dec.flags.preset, dec_k, dec.flags.k, dec_t, dec.flags.temperature);
      return cmd_decode(dec, out);
    }
    if (*e) {
      if (ev.bank.empty() && ev.predictions.empty()) throw ConfigError("eval needs --bank or --predictions");
      apply_preset(ev.flags.preset, ev_k, ev.flags.k, ev_t, ev.flags.temperature);
      return cmd_eval(ev, out);
    }
    if (*bn) return cmd_bench(be, out);
    if (*p) return cmd_pretrain(pt, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("nnscene");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace nnscene::cli
