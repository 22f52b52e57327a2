#pragma once

#include <cstdint>
#include <vector>

#include "skiplight/model.hpp"

namespace skiplight {

/// Drop-and-rescale merge of task deltas into a base:
///   theta = base + lambda * sum_i (mask_i .* (theta_i - base)) / (1 - p)
/// where each mask entry is kept with probability 1 - p. Deterministic per seed.
ModelParameters dare_merge(const ModelParameters& base, const std::vector<ModelParameters>& tasks,
                           double drop_rate, double lambda, std::uint64_t seed);

/// Plain task arithmetic: base + lambda * sum_i (theta_i - base).
ModelParameters task_arithmetic(const ModelParameters& base, const std::vector<ModelParameters>& tasks,
                                double lambda);

/// One adapter per attention projection weight: A ~ U(+-1/sqrt(in)), B = 0.
LoraSet make_lora_adapters(const ModelParameters& params, int rank, double alpha, std::uint64_t seed);

/// Folds every adapter's (alpha/rank) * B * A into its target weight.
ModelParameters lora_merge(const ModelParameters& params, const LoraSet& adapters);

}  // namespace skiplight
