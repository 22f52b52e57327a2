#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "skiplight/features.hpp"
#include "skiplight/model.hpp"

namespace skiplight {

enum class TokenMetric {
  CyclicHue,  // hue_distance
  Absolute,   // value_distance
};

/// softmax(logits / t) restricted to tokens strictly closer than `threshold`
/// to `prev` under `metric`, renormalised. No restriction without `prev`.
std::vector<double> restricted_distribution(std::span<const double> logits, std::optional<int> prev,
                                            TokenMetric metric, int threshold, double temperature);

int restricted_sample(std::span<const double> logits, std::optional<int> prev, TokenMetric metric, int threshold,
                      double temperature, std::mt19937_64& rng);

struct SamplerConfig {
  double temperature = 1.0;
  int hue_threshold = 30;
  int value_threshold = 64;
  std::uint64_t seed = 0;
  int max_len = 0;  // 0: the model's max_len
  /// Optional per-frame temperature; overrides `temperature` when set.
  std::function<double(std::size_t frame)> temperature_schedule;

  void validate() const;
  nlohmann::json to_json() const;
};

struct GenerationResult {
  LightSequence sequence;
  std::vector<double> hue_probability;  // probability of each chosen token
  std::vector<double> value_probability;
  std::uint64_t seed = 0;
  SamplerConfig config;
};

/// Encodes once, then decodes frame by frame with cached keys and values,
/// sampling hue then value under the restriction against the previous token.
GenerationResult generate(const FeatureMatrix& features, const ModelConfig& config, const ModelParameters& params,
                          const SamplerConfig& sampler);

/// Logits of the cached step-by-step decoder fed `tokens` as history; agrees
/// with lm_logits up to rounding.
LmLogits incremental_logits(const ModelConfig& config, const ModelParameters& params, const Matrix& features,
                            std::span<const LightToken> tokens);

}  // namespace skiplight
