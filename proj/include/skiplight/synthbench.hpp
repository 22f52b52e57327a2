#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skiplight/dataset.hpp"

namespace skiplight::synth {

/// A deterministic map from one feature frame to a light token.
///   "dominant-band": hue = floor(argmax band * 180 / bands); value bucket from
///                    the peak level, 32 * clamp(floor(peak) - 1, 0, 7) + 16.
///   "constant":      hue 90, value 128 regardless of the frame.
struct SyntheticRule {
  std::string id = "dominant-band";
  int bands = 16;
  int min_section = 16;  // change-point spacing, frames
  int max_section = 48;
};

SyntheticRule rule_from_id(const std::string& id);
std::vector<std::string> rule_ids();

LightToken apply_rule(const SyntheticRule& rule, const RowVector& frame);

/// Piecewise-constant sections (dominant band and level) over noise; show ids
/// round-robin over ceil(n/2) shows.
DatasetContainer make_corpus(const SyntheticRule& rule, int n_records, int frames, std::uint64_t seed);

/// Records whose labels differ from the rule re-applied to their features.
std::size_t count_rule_mismatches(const SyntheticRule& rule, const DatasetContainer& corpus);

inline constexpr int kImpulseHueA = 30;
inline constexpr int kImpulseHueB = 120;
inline constexpr int kImpulseValue = 200;
inline constexpr int kQuietValue = 100;
inline constexpr double kImpulseLevel = 4.0;

struct ImpulseCorpus {
  DatasetContainer container;
  std::vector<std::vector<int>> impulses;  // per record, ascending frame indices
};

/// Low noise with isolated all-band impulses (never adjacent, never frame 0).
/// The hue toggles between two buckets exactly at impulse frames and holds
/// otherwise; the value is high on impulses.
ImpulseCorpus impulse_alignment_corpus(int n_records, int frames, std::uint64_t seed);

/// Impulse frames recovered from features: every band above half the level.
std::vector<int> detect_impulses(const Matrix& features);
/// Mismatches between stored labels and the toggle rule over detected impulses.
std::size_t count_impulse_mismatches(const DatasetContainer& corpus);

}  // namespace skiplight::synth
