#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "skiplight/autograd.hpp"
#include "skiplight/lightcodec.hpp"

namespace skiplight {

/// Which music frame the decoder slot holding light token y_i receives.
enum class SkipMode {
  PreviousFrame,  // y_i with x_{i-1} (default)
  SameFrame,      // y_i with x_i
  None,           // no skip term
};

std::string to_string(SkipMode mode);
SkipMode skip_mode_from_string(const std::string& name);

inline constexpr int kHueBos = kHueBins;      // extra row of the hue table
inline constexpr int kValueBos = kValueBins;  // extra row of the value table

struct ModelConfig {
  int d_model = 512;
  int layers = 8;
  int heads = 8;
  int ffn_inner = 2048;
  double dropout = 0.1;
  int max_len = 1024;
  int feature_dim = 128;
  std::uint64_t seed = 0;
  SkipMode skip = SkipMode::PreviousFrame;

  /// d_model 512, 8 layers, 8 heads, 2048 inner, dropout 0.1, 1024 positions.
  static ModelConfig full(int feature_dim);
  /// d_model 64, 2 layers, 4 heads, 128 inner.
  static ModelConfig tiny(int feature_dim);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Named parameter tensors. Linear weights are stored out x in, biases and
/// layer-norm gains as 1 x n rows.
struct ModelParameters {
  std::map<std::string, Matrix> tensors;

  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  std::size_t scalar_count() const;
};

struct ParamSpec {
  enum class Kind { Weight, Bias, Gain, Embedding };
  std::string name;
  int rows = 0;
  int cols = 0;
  Kind kind = Kind::Weight;
  int fan_in = 1;
};

/// Every parameter the architecture reads, in a fixed order.
std::vector<ParamSpec> declare_parameters(const ModelConfig& config);

/// Weights and embeddings ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0,
/// layer-norm gains 1. Deterministic per config.seed.
ModelParameters init_parameters(const ModelConfig& config);

/// Throws DataError unless every declared path exists once with the declared
/// shape, nothing else is present, and all values are finite.
void validate_parameters(const ModelConfig& config, const ModelParameters& params);

bool is_attention_projection(const std::string& name);

/// Low-rank update: effective weight = base + (alpha / rank) * B * A.
struct LoraAdapter {
  std::string target;
  int rank = 1;
  double alpha = 1.0;
  Matrix a;  // rank x in
  Matrix b;  // out x rank
  double scaling() const { return alpha / rank; }
};

using LoraSet = std::map<std::string, LoraAdapter>;

/// Builds a forward pass on a tape: parameter lookup, optional adapters,
/// dropout state and which parameters receive gradients.
class ForwardContext {
 public:
  ForwardContext(ad::Tape& tape, const ModelConfig& config, const ModelParameters& params);

  ForwardContext& with_adapters(const LoraSet* adapters);
  /// Enables dropout with a dedicated generator.
  ForwardContext& training(std::uint64_t dropout_seed);
  /// Restricts gradient tracking to parameters accepted by `filter`.
  ForwardContext& trainable(std::function<bool(const std::string&)> filter);

  ad::Tape& tape() { return tape_; }
  const ModelConfig& config() const { return config_; }
  bool is_training() const { return training_; }

  ad::Var param(const std::string& name);
  /// `prefix`.weight / `prefix`.bias, with the adapter on `prefix`.weight if any.
  ad::Var linear(const std::string& prefix, ad::Var x);
  ad::Var dropout(ad::Var x);

  static std::string adapter_name(const std::string& target, char which);

 private:
  ad::Tape& tape_;
  const ModelConfig& config_;
  const ModelParameters& params_;
  const LoraSet* adapters_ = nullptr;
  bool training_ = false;
  std::mt19937_64 rng_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, ad::Var> cache_;
};

/// Per-frame two-layer perceptron F -> d -> d with GELU, no positions.
ad::Var music_mlp(ForwardContext& ctx, ad::Var features);
/// Encoder input: music_mlp plus encoder positions.
ad::Var embed_music(ForwardContext& ctx, ad::Var features);

struct DecoderTokens {
  std::vector<int> hue;    // slot 0 holds kHueBos
  std::vector<int> value;  // slot 0 holds kValueBos
};

/// Shift right by one with the beginning-of-sequence marker in slot 0.
DecoderTokens shift_right(std::span<const LightToken> tokens);

/// Sum of hue-table and value-table rows per slot.
ad::Var embed_light(ForwardContext& ctx, const DecoderTokens& tokens);

/// Music frame index paired with each decoder slot, -1 for a zero skip term.
std::vector<int> skip_pairing(int length, SkipMode mode);

/// light + paired music embedding + decoder positions.
ad::Var skip_combine(ForwardContext& ctx, ad::Var light_emb, ad::Var music_emb);

ad::Var encode(ForwardContext& ctx, ad::Var music_stream);
ad::Var decode(ForwardContext& ctx, ad::Var decoder_input, ad::Var memory);

struct LmOutput {
  ad::Var hue_logits;    // T x 180
  ad::Var value_logits;  // T x 256
};

/// Teacher-forced light prediction for `tokens` (the targets) given features.
LmOutput forward_lm(ForwardContext& ctx, ad::Var features, std::span<const LightToken> tokens);

struct MlmOutput {
  ad::Var recovered;  // T x F
  ad::Var hidden;     // decoder states, T x d
};

/// Masked-feature recovery: encoder reads the features, decoder reads their
/// right shift; no light embeddings, no skip term.
MlmOutput forward_mlm(ForwardContext& ctx, ad::Var features);

/// Real/fake logits (index 1 = real), 1 x 2, from the mean-pooled decoder trunk.
ad::Var discriminate(ForwardContext& ctx, ad::Var features);

/// Convenience: eval-mode logits without gradients.
struct LmLogits {
  Matrix hue;
  Matrix value;
};
LmLogits lm_logits(const ModelConfig& config, const ModelParameters& params, const Matrix& features,
                   std::span<const LightToken> tokens, const LoraSet* adapters = nullptr);

}  // namespace skiplight
