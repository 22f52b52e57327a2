#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "skiplight/checkpoint.hpp"
#include "skiplight/dataset.hpp"
#include "skiplight/model.hpp"

namespace skiplight {

/// Raised when a loss becomes NaN or infinite; the message carries the
/// epoch, step and loss components.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaskSpec {
  double ratio_percent = 15.0;  // k, strictly between 0 and 100
};

struct MaskedFeatures {
  Matrix masked;
  std::vector<int> positions;  // ascending
};

/// Replaces round(k/100 * T) distinct frames by draws from per-dimension
/// normals fitted to this clip.
MaskedFeatures make_mask(const Matrix& features, const MaskSpec& spec, std::mt19937_64& rng);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables

  nlohmann::json to_json() const;
  static AdamWConfig from_json(const nlohmann::json& j);
};

/// Decoupled weight decay Adam with per-tensor step counts.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Clips `grads` to the global norm, then updates every tensor named in it.
  void step(const std::map<std::string, Matrix*>& params, std::map<std::string, Matrix> grads);

  const AdamWConfig& config() const { return config_; }
  /// Moments as named tensors under `prefix`, for checkpoints.
  void export_state(const std::string& prefix, std::map<std::string, Matrix>& out) const;
  void import_state(const std::string& prefix, const std::map<std::string, Matrix>& in);

 private:
  struct Slot {
    Matrix m, v;
    long t = 0;
  };
  AdamWConfig config_;
  std::map<std::string, Slot> slots_;
};

/// Global L2 norm over a gradient set.
double global_norm(const std::map<std::string, Matrix>& grads);

struct PretrainConfig {
  double alpha1 = 1.0;  // all positions
  double alpha2 = 1.0;  // masked positions
  double alpha3 = 0.1;  // adversarial
  MaskSpec mask;
  AdamWConfig optimizer;
  int batch = 16;
  int epochs = 1;
  int window = kDefaultWindow;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
};

struct FinetuneConfig {
  AdamWConfig optimizer;
  int batch = 16;
  int epochs = 1;
  int window = kDefaultWindow;
  double accuracy_floor = 1e-3;
  std::optional<LoraConfig> lora;

  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
  int epoch = 0;
  std::map<std::string, double> losses;  // l1 l2 l3 L_pre L_dis, or L_stf
  double acc_hue = 0.0;
  double acc_value = 0.0;
  double beta_hue = 0.5;
  double beta_value = 0.5;

  nlohmann::json to_json() const;
};

/// Loss weights from the previous epoch's accuracies: beta_i proportional to
/// 1 / max(acc_i, floor), normalised to sum 1. Without history both are 0.5.
std::pair<double, double> adaptive_weights(std::optional<std::pair<double, double>> previous_acc,
                                           double floor = 1e-3);

struct PretrainLosses {
  ad::Var l1, l2, l3, total;
};

/// Recoverer objective for one clip on `ctx`'s tape.
PretrainLosses pretrain_loss(ForwardContext& ctx, const Matrix& features, const MaskedFeatures& mask,
                             const PretrainConfig& config);

/// Discriminator objective; `recovered` is treated as a constant.
ad::Var discriminator_loss(ForwardContext& ctx, const Matrix& features, const Matrix& recovered);

/// beta_hue * CE(hue) + beta_value * CE(value), teacher forced.
ad::Var finetune_loss(ForwardContext& ctx, const Matrix& features, std::span<const LightToken> tokens,
                      double beta_hue, double beta_value);

struct TrainState {
  ModelConfig config;
  ModelParameters params;
  AdamW recoverer;      // pretraining trunk and recovery head; fine-tuning model
  AdamW discriminator;  // heads.disc.*
  std::optional<LoraSet> adapters;
};

/// One recoverer update then one discriminator update over the batch.
/// Returns batch means of l1, l2, l3, L_pre and L_dis.
std::map<std::string, double> pretrain_step(TrainState& state, std::span<const Matrix> batch,
                                            const PretrainConfig& config, std::uint64_t step_seed);

/// One update on L_stf. With adapters, the adapted attention weights stay
/// frozen and the adapter pairs train instead.
std::map<std::string, double> finetune_step(TrainState& state, std::span<const DatasetRecord> batch,
                                            double beta_hue, double beta_value, std::uint64_t step_seed);

/// Teacher-forced argmax accuracy over the records, in max_len chunks.
std::pair<double, double> evaluate(const ModelConfig& config, const ModelParameters& params,
                                   std::span<const DatasetRecord> records, const LoraSet* adapters = nullptr);

/// Eval-mode masked-position MSE of the recovery head over the records.
double masked_recovery_mse(const ModelConfig& config, const ModelParameters& params,
                           std::span<const DatasetRecord> records, const MaskSpec& mask, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train, validation, test;
  std::string warning;
};

/// Whole shows go greedily to the split furthest below its share of samples.
Split split_dataset(const std::vector<DatasetRecord>& records, std::array<double, 3> ratios = {8, 1, 1},
                    std::uint64_t seed = 0);

struct RunConfig {
  std::string phase = "finetune";  // or "pretrain"
  ModelConfig model;
  std::uint64_t seed = 0;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::filesystem::path dataset;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path init_checkpoint;  // optional starting weights
  bool resume = false;
  /// Evaluate accuracy on the training split as well (logged as train_acc_*).
  bool log_train_accuracy = false;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::vector<EpochStats> history;  // epochs run in this call
  Checkpoint best;
  Checkpoint last;
};

/// Full training loop. Writes `checkpoint_dir`/{best,last}, a JSON-lines log
/// (train_log.jsonl, one line per epoch) and the run config.
TrainResult train(const RunConfig& run, const DatasetContainer& dataset);

/// Seeds derived from (seed, a, b) by splitmix mixing.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace skiplight
