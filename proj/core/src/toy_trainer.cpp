#include "nnscene/toy_trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "nnscene/binary_io.hpp"
#include "nnscene/errors.hpp"

namespace nnscene::pretrain {
namespace {

constexpr std::string_view kCheckpointMagic = "HBPT0001";

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value, std::size_t line) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("line " + std::to_string(line) + ": bad value '" + std::string(value) + "' for " +
                      std::string(key));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value, std::size_t line) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("line " + std::to_string(line) + ": bad boolean '" + std::string(value) + "' for " +
                    std::string(key));
}

Mat stack_views(const std::vector<Mat>& views) {
  if (views.empty()) throw ShapeError("empty batch");
  const Eigen::Index p = views.front().rows(), d = views.front().cols();
  Mat out(p * static_cast<Eigen::Index>(views.size()), d);
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].rows() != p || views[i].cols() != d) throw ShapeError("views in a batch differ in shape");
    out.middleRows(static_cast<Eigen::Index>(i) * p, p) = views[i];
  }
  return out;
}

struct Branch {
  Var pooled;
  Var z;
  Var prediction;
};

Branch forward(const ParamVars& v, const Mat& patches, const PretrainState& state, const TrainerConfig& cfg,
               bool online) {
  ad::Tape& t = *v.enc_w.tape;
  Var h = linear(t.constant(patches), v.enc_w, v.enc_b);
  Var c = contextualize(h, state.bank, cfg.loss.lambda, cfg.loss.beta_p, v.psi_w, v.psi_b);
  Branch b;
  b.pooled = attention_pool(c, cfg.positions, cfg.loss.pooling, v.att_w, v.att_b, v.omega_w, v.omega_b);
  if (online) {
    const auto pz = project_and_predict(b.pooled, v.proj, v.pred, cfg.loss.tau);
    b.z = pz.z;
    b.prediction = pz.prediction;
  } else {
    b.z = project(b.pooled, v.proj, cfg.loss.tau);
  }
  return b;
}

bool params_equal(const PretrainParams& a, const PretrainParams& b) {
  std::vector<const Mat*> x, y;
  a.visit([&](const char*, const Mat& m) { x.push_back(&m); });
  b.visit([&](const char*, const Mat& m) { y.push_back(&m); });
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i]->rows() != y[i]->rows() || x[i]->cols() != y[i]->cols() || *x[i] != *y[i]) return false;
  }
  return true;
}

void put_params(io::ByteWriter& w, const PretrainParams& p) {
  std::uint32_t count = 0;
  p.visit([&](const char*, const Mat&) { ++count; });
  w.put<std::uint32_t>(count);
  p.visit([&](const char*, const Mat& m) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.put<double>(m(r, c));
    }
  });
}

void get_params(io::ByteReader& r, PretrainParams& p) {
  std::uint32_t expected = 0;
  p.visit([&](const char*, const Mat&) { ++expected; });
  const std::uint64_t at = r.offset();
  if (r.get<std::uint32_t>("tensor count") != expected) throw ParseError("checkpoint tensor count mismatch", at);
  p.visit([&](const char* name, Mat& m) {
    const std::uint64_t shape_at = r.offset();
    const auto rows = r.get<std::uint32_t>("rows");
    const auto cols = r.get<std::uint32_t>("cols");
    if (rows != m.rows() || cols != m.cols()) {
      throw ParseError(std::string("checkpoint tensor ") + name + " has the wrong shape", shape_at);
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.get<double>(name);
    }
  });
}

}  // namespace

void TrainerConfig::validate() const {
  loss.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch == 0 || positions == 0 || num_classes == 0) throw ConfigError("batch, positions and num_classes must be >= 1");
  if (bank_size == 0) throw ConfigError("bank_size must be >= 1");
  if (!(view_noise >= 0.0)) throw ConfigError("view_noise must be non-negative");
}

TrainerConfig parse_trainer_config(std::string_view text, TrainerConfig cfg) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto u32 = [&] { return parse_number<std::uint32_t>(key, value, line_no); };
    const auto f64 = [&] { return parse_number<double>(key, value, line_no); };
    if (key == "lambda") cfg.loss.lambda = f64();
    else if (key == "tau") cfg.loss.tau = f64();
    else if (key == "alpha") cfg.loss.alpha = f64();
    else if (key == "ema_decay") cfg.loss.ema_decay = f64();
    else if (key == "beta_p") cfg.loss.beta_p = f64();
    else if (key == "pooling") cfg.loss.pooling = parse_pooling_mode(value);
    else if (key == "bank_size") cfg.bank_size = parse_number<std::size_t>(key, value, line_no);
    else if (key == "lr") cfg.lr = f64();
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value, line_no);
    else if (key == "steps") cfg.steps = u32();
    else if (key == "batch") cfg.batch = u32();
    else if (key == "positions") cfg.positions = u32();
    else if (key == "num_classes") cfg.num_classes = u32();
    else if (key == "view_noise") cfg.view_noise = f64();
    else if (key == "phi_batch_norm") cfg.phi_batch_norm = parse_bool(key, value, line_no);
    else if (key == "input_dim") cfg.dims.input_dim = u32();
    else if (key == "dim") cfg.dims.dim = u32();
    else if (key == "value_hidden") cfg.dims.value_hidden = u32();
    else if (key == "proj_hidden") cfg.dims.proj_hidden = u32();
    else if (key == "proj_dim") cfg.dims.proj_dim = u32();
    else throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
  }
  cfg.validate();
  return cfg;
}

TrainerConfig read_trainer_config(const std::filesystem::path& path, TrainerConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_trainer_config(ss.str(), base);
}

ToyDataset::ToyDataset(const TrainerConfig& cfg, std::uint64_t seed)
    : input_dim_(cfg.dims.input_dim),
      positions_(cfg.positions),
      num_classes_(cfg.num_classes),
      view_noise_(cfg.view_noise),
      rng_(make_stream(seed, 0, 0, 2)) {
  Rng proto_rng = make_stream(seed, 0, 0, 3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  prototypes_.resize(num_classes_, std::size_t{positions_} * input_dim_);
  for (Eigen::Index i = 0; i < prototypes_.size(); ++i) prototypes_.data()[i] = gauss(proto_rng);
}

ToyBatch ToyDataset::sample(std::size_t batch) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  ToyBatch out;
  const Eigen::Index width = prototypes_.cols();
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = static_cast<int>(rng_() % num_classes_);
    Eigen::RowVectorXd image = prototypes_.row(label);
    for (Eigen::Index i = 0; i < width; ++i) image(i) += 0.5 * gauss(rng_);
    auto view = [&] {
      const double gain = 0.8 + 0.4 * uniform01(rng_);
      Mat v(positions_, input_dim_);
      for (std::uint32_t p = 0; p < positions_; ++p) {
        for (std::uint32_t d = 0; d < input_dim_; ++d) {
          v(p, d) = gain * (image(std::size_t{p} * input_dim_ + d) + view_noise_ * gauss(rng_));
        }
      }
      return v;
    };
    out.view1.push_back(view());
    out.view2.push_back(view());
    out.labels.push_back(label);
  }
  return out;
}

PretrainState PretrainState::init(const TrainerConfig& cfg) {
  cfg.validate();
  PretrainState s{PretrainParams::init(cfg.dims, cfg.phi_batch_norm, cfg.seed), {},
                  PretrainBank(cfg.bank_size, cfg.dims.dim, cfg.dims.dim), 0};
  s.xi = s.theta;
  return s;
}

bool PretrainState::operator==(const PretrainState& o) const {
  return step == o.step && bank == o.bank && params_equal(theta, o.theta) && params_equal(xi, o.xi);
}

LossBreakdown toy_loss(const PretrainState& state, const ToyBatch& batch, const TrainerConfig& cfg,
                       std::vector<Mat>* grads) {
  if (batch.view1.size() != batch.size() || batch.view2.size() != batch.size()) {
    throw ShapeError("views are not paired by image");
  }
  ad::Tape tape;
  const ParamVars th = bind(tape, state.theta, true);
  const ParamVars xi = bind(tape, state.xi, false);
  const Mat x1 = stack_views(batch.view1), x2 = stack_views(batch.view2);

  const Branch on1 = forward(th, x1, state, cfg, true);
  const Branch on2 = forward(th, x2, state, cfg, true);
  const Branch tg1 = forward(xi, x1, state, cfg, false);
  const Branch tg2 = forward(xi, x2, state, cfg, false);

  std::vector<int> pairing(batch.size());
  for (std::size_t i = 0; i < pairing.size(); ++i) pairing[i] = static_cast<int>(i);
  Var ssl = ad::add(contrastive_loss(on1.prediction, tape.constant(tg2.z.value()), pairing),
                    contrastive_loss(on2.prediction, tape.constant(tg1.z.value()), pairing));
  Var total = ssl;
  LossBreakdown out;
  if (cfg.loss.alpha > 0.0) {
    if (state.bank.empty()) throw ConfigError("supervised retrieval loss needs a non-empty memory");
    const Mat keys = state.bank.keys();
    const auto labels = state.bank.labels();
    Var ce = ad::add(
        supervised_retrieval_loss(on1.pooled, keys, labels, cfg.num_classes, batch.labels, cfg.loss.beta_p),
        supervised_retrieval_loss(on2.pooled, keys, labels, cfg.num_classes, batch.labels, cfg.loss.beta_p));
    Var sup = ad::scale(ce, cfg.loss.alpha);
    out.sup = sup.value()(0, 0);
    total = ad::add(ssl, sup);
  }
  out.ssl = ssl.value()(0, 0);
  out.total = total.value()(0, 0);

  if (grads) {
    tape.backward(total);
    grads->clear();
    for (const Var& v : th.all()) grads->push_back(v.grad());
  }
  return out;
}

void push_batch(PretrainState& state, const ToyBatch& batch, const TrainerConfig&) {
  std::vector<Mat> grids;
  grids.reserve(batch.size());
  for (const Mat& v : batch.view1) grids.push_back((v * state.xi.enc_w).rowwise() + state.xi.enc_b.row(0));
  bank_push(state.bank, grids, state.xi.phi, batch.labels);
}

LossBreakdown toy_train_step(PretrainState& state, const ToyBatch& batch, const TrainerConfig& cfg) {
  if (state.bank.empty() && (cfg.loss.lambda > 0.0 || cfg.loss.alpha > 0.0)) push_batch(state, batch, cfg);
  std::vector<Mat> grads;
  const LossBreakdown loss = toy_loss(state, batch, cfg, &grads);
  if (!std::isfinite(loss.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step + 1 << ": total=" << loss.total << " ssl=" << loss.ssl
        << " sup=" << loss.sup << " (lr=" << cfg.lr << ", lambda=" << cfg.loss.lambda << ")";
    throw NumericError(msg.str());
  }
  std::size_t i = 0;
  state.theta.visit([&](const char*, Mat& m) { m -= cfg.lr * grads[i++]; });
  ema_update(state.theta, state.xi, cfg.loss.ema_decay);
  push_batch(state, batch, cfg);
  ++state.step;
  return loss;
}

std::vector<LossRecord> run_toy_training(const TrainerConfig& cfg, PretrainState* final_state,
                                         const std::function<void(const LossRecord&)>& on_step) {
  PretrainState state = PretrainState::init(cfg);
  ToyDataset data(cfg, cfg.seed);
  std::vector<LossRecord> log;
  log.reserve(cfg.steps);
  for (std::uint32_t s = 0; s < cfg.steps; ++s) {
    const ToyBatch batch = data.sample(cfg.batch);
    LossRecord rec{s + 1ull, toy_train_step(state, batch, cfg)};
    if (on_step) on_step(rec);
    log.push_back(rec);
  }
  if (final_state) *final_state = std::move(state);
  return log;
}

double smoothed_loss(const std::vector<LossRecord>& log, std::size_t step, std::size_t window) {
  if (window == 0 || step < window || step > log.size()) throw ConfigError("smoothing window out of range");
  double sum = 0.0;
  for (std::size_t i = step - window; i < step; ++i) sum += log[i].loss.total;
  return sum / double(window);
}

std::string loss_csv(const std::vector<LossRecord>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,total,ssl,sup\n";
  for (const auto& r : log) os << r.step << "," << r.loss.total << "," << r.loss.ssl << "," << r.loss.sup << "\n";
  return os.str();
}

std::vector<std::uint8_t> encode_checkpoint(const PretrainState& state) {
  io::ByteWriter w;
  w.magic(kCheckpointMagic);
  w.put<std::uint64_t>(state.step);
  put_params(w, state.theta);
  put_params(w, state.xi);
  w.put<std::uint64_t>(state.bank.capacity());
  w.put<std::uint32_t>(state.bank.key_dim());
  w.put<std::uint32_t>(state.bank.value_dim());
  w.put<std::uint64_t>(state.bank.size());
  const Mat keys = state.bank.keys(), values = state.bank.values();
  const auto labels = state.bank.labels();
  for (Eigen::Index i = 0; i < keys.rows(); ++i) {
    for (Eigen::Index j = 0; j < keys.cols(); ++j) w.put<double>(keys(i, j));
    for (Eigen::Index j = 0; j < values.cols(); ++j) w.put<double>(values(i, j));
    w.put<std::int32_t>(labels[static_cast<std::size_t>(i)]);
  }
  return std::move(w).take();
}

PretrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainerConfig& cfg) {
  io::ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic, "HBPT");
  PretrainState state = PretrainState::init(cfg);
  state.step = r.get<std::uint64_t>("step");
  get_params(r, state.theta);
  get_params(r, state.xi);
  const std::uint64_t bank_at = r.offset();
  const auto capacity = r.get<std::uint64_t>("memory capacity");
  const auto key_dim = r.get<std::uint32_t>("key dim");
  const auto value_dim = r.get<std::uint32_t>("value dim");
  const auto size = r.get<std::uint64_t>("memory size");
  if (capacity == 0 || size > capacity) throw ParseError("memory size exceeds its capacity", bank_at);
  if (io::checked_mul(size, (std::uint64_t{key_dim} + value_dim) * 8 + 4, r.offset()) > r.remaining()) {
    throw ParseError("truncated memory section", r.offset());
  }
  state.bank = PretrainBank(capacity, key_dim, value_dim);
  for (std::uint64_t i = 0; i < size; ++i) {
    Eigen::RowVectorXd key(key_dim), value(value_dim);
    for (auto& x : key) x = r.get<double>("memory key");
    for (auto& x : value) x = r.get<double>("memory value");
    state.bank.push(key, value, r.get<std::int32_t>("memory label"));
  }
  if (!r.at_end()) throw ParseError("trailing bytes after the checkpoint", r.offset());
  return state;
}

}  // namespace nnscene::pretrain
