#include "nnscene/pretrain.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "nnscene/errors.hpp"
#include "nnscene/random.hpp"

namespace nnscene::pretrain {
namespace {

double gaussian(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, double sigma, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = sigma * gaussian(rng);
  }
  return m;
}

MlpVars bind_mlp(ad::Tape& tape, const Mlp& m, bool trainable) {
  auto put = [&](const Mat& v) { return trainable ? tape.variable(v) : tape.constant(v); };
  MlpVars out;
  out.w1 = put(m.w1);
  out.b1 = put(m.b1);
  out.w2 = put(m.w2);
  out.b2 = put(m.b2);
  out.batch_norm = m.batch_norm;
  out.act = m.act;
  if (m.batch_norm) {
    out.gamma = put(m.gamma);
    out.beta = put(m.beta);
  }
  return out;
}

void push_mlp(std::vector<Var>& out, const MlpVars& m) {
  out.insert(out.end(), {m.w1, m.b1, m.w2, m.b2});
  if (m.batch_norm) out.insert(out.end(), {m.gamma, m.beta});
}

}  // namespace

std::string_view to_string(PoolingMode mode) {
  switch (mode) {
    case PoolingMode::kMean:
      return "mean";
    case PoolingMode::kQK:
      return "qk";
    case PoolingMode::kQKV:
      return "qkv";
  }
  return "?";
}

PoolingMode parse_pooling_mode(std::string_view name) {
  if (name == "mean") return PoolingMode::kMean;
  if (name == "qk") return PoolingMode::kQK;
  if (name == "qkv") return PoolingMode::kQKV;
  throw ConfigError("unknown pooling mode '" + std::string(name) + "' (expected mean|qk|qkv)");
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
  if (!(beta_p > 0.0)) throw ConfigError("beta_p must be positive");
}

Mlp Mlp::random(std::uint32_t in, std::uint32_t hidden, std::uint32_t out, Activation act, bool batch_norm,
                std::uint64_t seed) {
  Rng rng = make_stream(seed);
  Mlp m;
  m.w1 = random_matrix(in, hidden, 1.0 / std::sqrt(double(in)), rng);
  m.b1 = random_matrix(1, hidden, 0.1, rng);
  m.w2 = random_matrix(hidden, out, 1.0 / std::sqrt(double(hidden)), rng);
  m.b2 = random_matrix(1, out, 0.1, rng);
  m.act = act;
  m.batch_norm = batch_norm;
  if (batch_norm) {
    m.gamma = Mat::Ones(1, hidden) + random_matrix(1, hidden, 0.1, rng);
    m.beta = random_matrix(1, hidden, 0.1, rng);
  }
  return m;
}

Mlp Mlp::identity(std::uint32_t dim) {
  Mlp m;
  const Mat eye = Mat::Identity(dim, dim);
  m.w1.resize(dim, 2 * dim);
  m.w1 << eye, -eye;
  m.b1 = Mat::Zero(1, 2 * dim);
  m.w2.resize(2 * dim, dim);
  m.w2 << eye, -eye;
  m.b2 = Mat::Zero(1, dim);
  m.act = Activation::kRelu;
  return m;
}

PretrainParams PretrainParams::init(const ModelDims& d, bool phi_batch_norm, std::uint64_t seed) {
  if (d.input_dim == 0 || d.dim == 0 || d.value_hidden == 0 || d.proj_hidden == 0 || d.proj_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  Rng rng = make_stream(seed, 0, 0, 1);
  PretrainParams p;
  p.enc_w = random_matrix(d.input_dim, d.dim, 1.0 / std::sqrt(double(d.input_dim)), rng);
  p.enc_b = random_matrix(1, d.dim, 0.1, rng);
  p.phi = Mlp::random(d.dim, d.value_hidden, d.dim, Activation::kRelu, phi_batch_norm, rng());
  p.psi_w = Mat::Identity(d.dim, d.dim) + random_matrix(d.dim, d.dim, 0.3 / std::sqrt(double(d.dim)), rng);
  p.psi_b = random_matrix(1, d.dim, 0.1, rng);
  p.att_w = random_matrix(d.dim, 1, 1.0 / std::sqrt(double(d.dim)), rng);
  p.att_b = random_matrix(1, 1, 0.1, rng);
  p.omega_w = Mat::Identity(d.dim, d.dim) + random_matrix(d.dim, d.dim, 0.3 / std::sqrt(double(d.dim)), rng);
  p.omega_b = random_matrix(1, d.dim, 0.1, rng);
  p.proj = Mlp::random(d.dim, d.proj_hidden, d.proj_dim, Activation::kSilu, false, rng());
  p.pred = Mlp::random(d.proj_dim, d.proj_hidden, d.proj_dim, Activation::kSilu, false, rng());
  return p;
}

std::size_t PretrainParams::num_values() const {
  std::size_t n = 0;
  visit([&](const char*, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

PretrainBank::PretrainBank(std::size_t capacity, std::uint32_t key_dim, std::uint32_t value_dim)
    : capacity_(capacity), key_dim_(key_dim), value_dim_(value_dim) {
  if (capacity == 0) throw ConfigError("pretraining memory capacity must be >= 1");
}

void PretrainBank::push(const Eigen::RowVectorXd& key, const Eigen::RowVectorXd& value, int label) {
  if (key.size() != key_dim_ || value.size() != value_dim_) throw ShapeError("memory entry has the wrong width");
  if (!key.allFinite() || !value.allFinite()) throw NumericError("non-finite memory entry");
  entries_.push_back({key, value, label});
  while (entries_.size() > capacity_) entries_.pop_front();
}

Mat PretrainBank::keys() const {
  Mat m(static_cast<Eigen::Index>(entries_.size()), key_dim_);
  for (std::size_t i = 0; i < entries_.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = entries_[i].key;
  return m;
}

Mat PretrainBank::values() const {
  Mat m(static_cast<Eigen::Index>(entries_.size()), value_dim_);
  for (std::size_t i = 0; i < entries_.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = entries_[i].value;
  return m;
}

std::vector<int> PretrainBank::labels() const {
  std::vector<int> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.label);
  return out;
}

bool PretrainBank::operator==(const PretrainBank& o) const {
  if (capacity_ != o.capacity_ || key_dim_ != o.key_dim_ || value_dim_ != o.value_dim_ ||
      entries_.size() != o.entries_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].key != o.entries_[i].key || entries_[i].value != o.entries_[i].value ||
        entries_[i].label != o.entries_[i].label) {
      return false;
    }
  }
  return true;
}

std::vector<Var> ParamVars::all() const {
  std::vector<Var> out{enc_w, enc_b};
  push_mlp(out, phi);
  out.insert(out.end(), {psi_w, psi_b, att_w, att_b, omega_w, omega_b});
  push_mlp(out, proj);
  push_mlp(out, pred);
  return out;
}

ParamVars bind(ad::Tape& tape, const PretrainParams& p, bool trainable) {
  auto put = [&](const Mat& v) { return trainable ? tape.variable(v) : tape.constant(v); };
  ParamVars v;
  v.enc_w = put(p.enc_w);
  v.enc_b = put(p.enc_b);
  v.phi = bind_mlp(tape, p.phi, trainable);
  v.psi_w = put(p.psi_w);
  v.psi_b = put(p.psi_b);
  v.att_w = put(p.att_w);
  v.att_b = put(p.att_b);
  v.omega_w = put(p.omega_w);
  v.omega_b = put(p.omega_b);
  v.proj = bind_mlp(tape, p.proj, trainable);
  v.pred = bind_mlp(tape, p.pred, trainable);
  return v;
}

Var linear(Var x, Var w, Var b) { return ad::add_row(ad::matmul(x, w), b); }

Var mlp_forward(const MlpVars& m, Var x) {
  Var h = linear(x, m.w1, m.b1);
  if (m.batch_norm) h = ad::batch_norm(h, m.gamma, m.beta);
  h = m.act == Activation::kRelu ? ad::relu(h) : ad::silu(h);
  return linear(h, m.w2, m.b2);
}

Mat mlp_forward(const Mlp& m, const Mat& x) {
  ad::Tape tape;
  const MlpVars v = bind_mlp(tape, m, false);
  return mlp_forward(v, tape.constant(x)).value();
}

void bank_push(PretrainBank& bank, std::span<const Mat> grids, const Mlp& phi, std::span<const int> labels) {
  if (grids.empty()) return;
  if (!labels.empty() && labels.size() != grids.size()) throw ShapeError("one label per pushed grid required");
  Mat keys(static_cast<Eigen::Index>(grids.size()), bank.key_dim());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i].cols() != bank.key_dim() || grids[i].rows() == 0) throw ShapeError("pushed grid has the wrong shape");
    keys.row(static_cast<Eigen::Index>(i)) = grids[i].colwise().mean();
  }
  const Mat values = mlp_forward(phi, keys);
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    bank.push(keys.row(r), values.row(r), labels.empty() ? -1 : labels[i]);
  }
}

Var memory_attention(Var q, const PretrainBank& bank, double beta_p) {
  if (bank.empty()) throw ConfigError("cross-attention over an empty memory");
  if (q.cols() != bank.key_dim()) throw ShapeError("query width does not match the memory keys");
  ad::Tape& t = *q.tape;
  const Mat keys = bank.keys().rowwise().normalized();
  Var scores = ad::scale(ad::matmul(ad::normalize_rows(q), t.constant(keys.transpose())), 1.0 / beta_p);
  return ad::matmul(ad::softmax_rows(scores), t.constant(bank.values()));
}

Var contextualize(Var q, const PretrainBank& bank, double lambda, double beta_p, Var psi_w, Var psi_b) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  Var mixed = ad::normalize_rows(q);
  if (lambda > 0.0) {
    if (bank.empty()) throw ConfigError("contextualize with lambda > 0 needs a non-empty memory");
    Var v = ad::normalize_rows(memory_attention(q, bank, beta_p));
    mixed = ad::add(ad::scale(mixed, 1.0 - lambda), ad::scale(v, lambda));
  }
  return linear(mixed, psi_w, psi_b);
}

Var attention_pool(Var c, Eigen::Index positions, PoolingMode mode, Var att_w, Var att_b, Var omega_w,
                   Var omega_b) {
  if (positions <= 0 || c.rows() == 0 || c.rows() % positions != 0) {
    throw ShapeError("attention_pool: rows must be a positive multiple of positions");
  }
  ad::Tape& t = *c.tape;
  const Eigen::Index images = c.rows() / positions;
  Var weights = mode == PoolingMode::kMean
                    ? t.constant(Mat::Constant(images, positions, 1.0 / double(positions)))
                    : ad::softmax_rows(ad::fold_rows(linear(c, att_w, att_b), positions));
  Var values = mode == PoolingMode::kQKV ? linear(c, omega_w, omega_b) : c;
  return ad::segment_weighted_sum(weights, values);
}

Var rescale(Var x, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  return ad::normalize_rows(x, 1.0 / std::sqrt(tau));
}

Var project(Var pooled, const MlpVars& proj, double tau) { return rescale(mlp_forward(proj, pooled), tau); }

Projection project_and_predict(Var pooled, const MlpVars& proj, const MlpVars& pred, double tau) {
  Var z = project(pooled, proj, tau);
  return {z, rescale(mlp_forward(pred, z), tau)};
}

Var contrastive_loss(Var preds, Var targets, std::span<const int> positive) {
  if (preds.rows() == 0) throw ShapeError("contrastive loss over an empty batch");
  if (static_cast<Eigen::Index>(positive.size()) != preds.rows()) throw ShapeError("one positive index per prediction");
  for (int j : positive) {
    if (j < 0 || j >= targets.rows()) throw ConfigError("positive index " + std::to_string(j) + " out of range");
  }
  Var logits = ad::matmul(preds, ad::transpose(targets));
  return ad::mean(ad::sub(ad::logsumexp_rows(logits), ad::pick(logits, positive)));
}

double contrastive_loss(const Mat& preds, const Mat& targets, std::span<const int> positive) {
  ad::Tape t;
  return contrastive_loss(t.constant(preds), t.constant(targets), positive).value()(0, 0);
}

Var supervised_retrieval_loss(Var pooled, const Mat& keys, std::span<const int> key_labels, std::uint32_t num_classes,
                              std::span<const int> true_labels, double beta_p) {
  if (keys.rows() == 0) throw ConfigError("supervised retrieval over an empty memory");
  if (static_cast<Eigen::Index>(key_labels.size()) != keys.rows()) throw ShapeError("one label per memory key");
  if (static_cast<Eigen::Index>(true_labels.size()) != pooled.rows()) throw ShapeError("one true label per query");
  if (keys.cols() != pooled.cols()) throw ShapeError("query width does not match the memory keys");
  Mat onehot = Mat::Zero(keys.rows(), num_classes);
  for (std::size_t i = 0; i < key_labels.size(); ++i) {
    if (key_labels[i] < 0 || key_labels[i] >= static_cast<int>(num_classes)) {
      throw ShapeError("memory label " + std::to_string(key_labels[i]) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
    onehot(static_cast<Eigen::Index>(i), key_labels[i]) = 1.0;
  }
  for (int y : true_labels) {
    if (y < 0 || y >= static_cast<int>(num_classes)) throw ShapeError("true label outside the class range");
  }
  ad::Tape& t = *pooled.tape;
  const Mat unit_keys = keys.rowwise().normalized();
  Var scores = ad::scale(ad::matmul(ad::normalize_rows(pooled), t.constant(unit_keys.transpose())), 1.0 / beta_p);
  Var y_hat = ad::matmul(ad::softmax_rows(scores), t.constant(onehot));
  return ad::scale(ad::mean(ad::log_eps(ad::pick(y_hat, true_labels), 1e-12)), -1.0);
}

void ema_update(const PretrainParams& theta, PretrainParams& xi, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must lie in [0, 1]");
  std::vector<const Mat*> src;
  std::vector<std::pair<const char*, Mat*>> dst;
  theta.visit([&](const char*, const Mat& m) { src.push_back(&m); });
  xi.visit([&](const char* name, Mat& m) { dst.emplace_back(name, &m); });
  if (src.size() != dst.size()) throw ShapeError("ema_update: parameter sets differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->rows() != dst[i].second->rows() || src[i]->cols() != dst[i].second->cols()) {
      throw ShapeError(std::string("ema_update: shape mismatch at ") + dst[i].first);
    }
  }
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = decay * *dst[i].second + (1.0 - decay) * *src[i];
}

}  // namespace nnscene::pretrain
