#pragma once

// Toy contextual-pretraining loop on synthetic two-view data. Each step runs
// encode -> contextualize -> attention_pool -> project (and predict on the
// online side) for both views, takes the symmetric contrastive loss plus the
// alpha-weighted retrieval cross-entropy, applies one gradient-descent step
// and updates the EMA target.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "nnscene/pretrain.hpp"
#include "nnscene/random.hpp"

namespace nnscene::pretrain {

struct TrainerConfig {
  LossConfig loss;
  ModelDims dims;
  /// Memory length; the large-scale setting keeps 153,600 entries.
  std::size_t bank_size = 153'600;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::uint32_t steps = 200;
  std::uint32_t batch = 16;
  /// Patches per image (2 x 2 grid by default).
  std::uint32_t positions = 4;
  std::uint32_t num_classes = 4;
  double view_noise = 0.1;
  bool phi_batch_norm = true;

  void validate() const;
};

/// Parses "key = value" lines ('#' starts a comment). Keys: lambda, tau,
/// alpha, ema_decay, bank_size, pooling, beta_p, lr, seed, steps, batch,
/// positions, num_classes, view_noise, phi_batch_norm, input_dim, dim,
/// value_hidden, proj_hidden, proj_dim. Unknown keys and malformed values
/// throw ConfigError naming the line.
TrainerConfig parse_trainer_config(std::string_view text, TrainerConfig base = {});
TrainerConfig read_trainer_config(const std::filesystem::path& path, TrainerConfig base = {});

/// Two augmented views per image, positions x input_dim each, plus the
/// image's class label.
struct ToyBatch {
  std::vector<Mat> view1, view2;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

/// Image = class prototype + instance offset at every position; a view adds
/// independent noise and a random gain.
class ToyDataset {
 public:
  ToyDataset(const TrainerConfig& cfg, std::uint64_t seed);
  ToyBatch sample(std::size_t batch);

 private:
  std::uint32_t input_dim_;
  std::uint32_t positions_;
  std::uint32_t num_classes_;
  double view_noise_;
  Mat prototypes_;  // num_classes x (positions * input_dim)
  Rng rng_;
};

struct PretrainState {
  PretrainParams theta;
  PretrainParams xi;
  PretrainBank bank;
  std::uint64_t step = 0;

  static PretrainState init(const TrainerConfig& cfg);
  bool operator==(const PretrainState&) const;
};

struct LossBreakdown {
  double total = 0.0;
  double ssl = 0.0;
  double sup = 0.0;  // alpha-weighted
};

/// Loss at the current state; when `grads` is non-null it receives
/// d total / d theta in PretrainParams::visit order. Does not modify state.
LossBreakdown toy_loss(const PretrainState& state, const ToyBatch& batch, const TrainerConfig& cfg,
                       std::vector<Mat>* grads = nullptr);

/// One optimisation step; throws NumericError on a non-finite loss. When the
/// memory is empty it is first filled from this batch's target features.
LossBreakdown toy_train_step(PretrainState& state, const ToyBatch& batch, const TrainerConfig& cfg);

/// Primes the memory with the target features of `batch` (view 1).
void push_batch(PretrainState& state, const ToyBatch& batch, const TrainerConfig& cfg);

struct LossRecord {
  std::uint64_t step = 0;
  LossBreakdown loss;
};

/// cfg.steps steps from PretrainState::init(cfg) on a ToyDataset seeded by
/// cfg.seed.
std::vector<LossRecord> run_toy_training(const TrainerConfig& cfg, PretrainState* final_state = nullptr,
                                         const std::function<void(const LossRecord&)>& on_step = {});

/// Mean over the `window` records ending at `step` (1-based).
double smoothed_loss(const std::vector<LossRecord>& log, std::size_t step, std::size_t window);

/// "step,total,ssl,sup" header and one row per record, 17 significant digits.
std::string loss_csv(const std::vector<LossRecord>& log);

/// Binary checkpoint "HBPT0001": step, theta, xi, memory entries.
std::vector<std::uint8_t> encode_checkpoint(const PretrainState& state);
PretrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainerConfig& cfg);

}  // namespace nnscene::pretrain
