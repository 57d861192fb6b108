#pragma once

// Contextual pretraining mechanisms at desk scale, all in double precision
// on an autodiff tape:
//   bank_push        FIFO memory of spatially averaged target features and
//                    their value-head outputs (optionally with class labels)
//   contextualize    c = psi((1 - lambda) q/|q| + lambda v/|v|), v = cross-
//                    attention of q over the memory
//   attention_pool   softmax over per-position logits, weighted sum of omega(c)
//   project          MLP head, output rescaled to norm 1/sqrt(tau)
//   contrastive_loss InfoNCE over in-batch targets
//   supervised_retrieval_loss
//                    cross-entropy of labels retrieved from the memory

#include <array>
#include <cstdint>
#include <deque>
#include <span>
#include <string_view>
#include <vector>

#include "nnscene/autodiff.hpp"

namespace nnscene::pretrain {

using ad::Mat;
using ad::Var;

enum class PoolingMode : std::uint8_t { kMean = 0, kQK = 1, kQKV = 2 };

std::string_view to_string(PoolingMode mode);
PoolingMode parse_pooling_mode(std::string_view name);

struct LossConfig {
  double lambda = 0.2;
  double tau = 0.1;
  double alpha = 0.05;
  double ema_decay = 0.99;
  PoolingMode pooling = PoolingMode::kQKV;
  /// Temperature of the memory cross-attention.
  double beta_p = 1.0;

  void validate() const;
};

enum class Activation : std::uint8_t { kSilu = 0, kRelu = 1 };

/// Two-layer perceptron: act(bn(x W1 + b1)) W2 + b2, batch norm optional.
struct Mlp {
  Mat w1, b1, w2, b2;
  Mat gamma, beta;  // 1 x hidden, used when batch_norm
  bool batch_norm = false;
  Activation act = Activation::kSilu;

  static Mlp random(std::uint32_t in, std::uint32_t hidden, std::uint32_t out, Activation act, bool batch_norm,
                    std::uint64_t seed);
  /// ReLU MLP of hidden width 2 * dim computing relu(x) - relu(-x) = x.
  static Mlp identity(std::uint32_t dim);
};

struct ModelDims {
  std::uint32_t input_dim = 16;
  std::uint32_t dim = 8;
  std::uint32_t value_hidden = 16;
  std::uint32_t proj_hidden = 16;
  std::uint32_t proj_dim = 8;
};

/// Online parameters theta; the EMA target xi has the same layout.
struct PretrainParams {
  Mat enc_w, enc_b;      // patch encoder f: input_dim -> dim
  Mlp phi;               // value head: dim -> dim
  Mat psi_w, psi_b;      // contextual mixer: dim -> dim
  Mat att_w, att_b;      // attention logits: dim -> 1
  Mat omega_w, omega_b;  // pooling value map: dim -> dim
  Mlp proj;              // projector: dim -> proj_dim
  Mlp pred;              // predictor: proj_dim -> proj_dim

  static PretrainParams init(const ModelDims& dims, bool phi_batch_norm, std::uint64_t seed);

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }
  std::size_t num_values() const;

 private:
  using Names = std::array<const char*, 6>;
  static constexpr Names kPhiNames{"phi.w1", "phi.b1", "phi.w2", "phi.b2", "phi.gamma", "phi.beta"};
  static constexpr Names kProjNames{"proj.w1", "proj.b1", "proj.w2", "proj.b2", "proj.gamma", "proj.beta"};
  static constexpr Names kPredNames{"pred.w1", "pred.b1", "pred.w2", "pred.b2", "pred.gamma", "pred.beta"};

  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f) {
    f("enc_w", p.enc_w);
    f("enc_b", p.enc_b);
    visit_mlp(p.phi, f, kPhiNames);
    f("psi_w", p.psi_w);
    f("psi_b", p.psi_b);
    f("att_w", p.att_w);
    f("att_b", p.att_b);
    f("omega_w", p.omega_w);
    f("omega_b", p.omega_b);
    visit_mlp(p.proj, f, kProjNames);
    visit_mlp(p.pred, f, kPredNames);
  }
  template <typename M, typename F>
  static void visit_mlp(M& m, F& f, const Names& n) {
    f(n[0], m.w1);
    f(n[1], m.b1);
    f(n[2], m.w2);
    f(n[3], m.b2);
    if (m.batch_norm) {
      f(n[4], m.gamma);
      f(n[5], m.beta);
    }
  }
};

/// FIFO memory M_p: keys (spatial means), values phi(key), optional labels.
class PretrainBank {
 public:
  PretrainBank(std::size_t capacity, std::uint32_t key_dim, std::uint32_t value_dim);

  void push(const Eigen::RowVectorXd& key, const Eigen::RowVectorXd& value, int label = -1);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::uint32_t key_dim() const noexcept { return key_dim_; }
  std::uint32_t value_dim() const noexcept { return value_dim_; }

  /// Oldest entry first.
  Mat keys() const;
  Mat values() const;
  std::vector<int> labels() const;

  bool operator==(const PretrainBank&) const;

 private:
  struct Entry {
    Eigen::RowVectorXd key, value;
    int label;
  };
  std::size_t capacity_;
  std::uint32_t key_dim_;
  std::uint32_t value_dim_;
  std::deque<Entry> entries_;
};

struct MlpVars {
  Var w1, b1, w2, b2, gamma, beta;
  bool batch_norm = false;
  Activation act = Activation::kSilu;
};

/// Tape handles for every tensor of a PretrainParams.
struct ParamVars {
  Var enc_w, enc_b;
  MlpVars phi;
  Var psi_w, psi_b, att_w, att_b, omega_w, omega_b;
  MlpVars proj, pred;

  /// Same order as PretrainParams::visit.
  std::vector<Var> all() const;
};

/// Puts the parameters on `tape` as variables (trainable) or constants.
ParamVars bind(ad::Tape& tape, const PretrainParams& params, bool trainable);

Var linear(Var x, Var w, Var b);
Var mlp_forward(const MlpVars& m, Var x);
Mat mlp_forward(const Mlp& m, const Mat& x);

/// Spatial mean of every grid (positions x dim) as keys, phi applied to the
/// stacked keys as values; entries appended oldest-first, evicting beyond
/// capacity. `labels` is empty or one class id per grid.
void bank_push(PretrainBank& bank, std::span<const Mat> grids, const Mlp& phi, std::span<const int> labels = {});

/// Cross-attention of the rows of q over the memory, cosine / beta_p, full
/// softmax over all entries; memory entries are constants.
Var memory_attention(Var q, const PretrainBank& bank, double beta_p);

/// Contextualized features, same shape as q. Throws ConfigError when
/// lambda > 0 and the memory is empty.
Var contextualize(Var q, const PretrainBank& bank, double lambda, double beta_p, Var psi_w, Var psi_b);

/// Pools each run of `positions` consecutive rows of c into one row.
///   mean: uniform weights, omega = identity
///   qk:   softmax(c w_a + b_a), omega = identity
///   qkv:  softmax(c w_a + b_a), omega(c) = c W + b
Var attention_pool(Var c, Eigen::Index positions, PoolingMode mode, Var att_w, Var att_b, Var omega_w,
                   Var omega_b);

/// Rows rescaled to norm 1/sqrt(tau); NumericError on a zero row.
Var rescale(Var x, double tau);

/// Projector output z and predictor output q(z), both rescaled.
struct Projection {
  Var z;
  Var prediction;
};
Projection project_and_predict(Var pooled, const MlpVars& proj, const MlpVars& pred, double tau);
Var project(Var pooled, const MlpVars& proj, double tau);

/// mean_i [ -p_i.t_j + log(exp(p_i.t_j) + sum_{k != j} exp(p_i.t_k)) ] with
/// j = positive[i]. ConfigError for an out-of-range pairing.
Var contrastive_loss(Var preds, Var targets, std::span<const int> positive);
double contrastive_loss(const Mat& preds, const Mat& targets, std::span<const int> positive);

/// y_hat = softmax(cos(pooled, keys) / beta_p) * onehot(key_labels);
/// mean_i -log(y_hat[i, true_label[i]] + 1e-12).
Var supervised_retrieval_loss(Var pooled, const Mat& keys, std::span<const int> key_labels, std::uint32_t num_classes,
                              std::span<const int> true_labels, double beta_p);

/// xi <- decay * xi + (1 - decay) * theta, tensor by tensor.
void ema_update(const PretrainParams& theta, PretrainParams& xi, double decay);

}  // namespace nnscene::pretrain
