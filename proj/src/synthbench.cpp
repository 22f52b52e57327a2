#include "skiplight/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace skiplight::synth {

namespace {

constexpr int kLevels = 8;
constexpr double kNoise = 0.3;

std::string show_for(int i, int n) {
  const int shows = std::max(1, (n + 1) / 2);
  return "show-" + std::to_string(i % shows);
}

void check_sizes(int n, int frames) {
  if (n < 1) throw UsageError("record count must be positive");
  if (frames < 1) throw UsageError("frame count must be positive");
}

}  // namespace

std::vector<std::string> rule_ids() { return {"dominant-band", "constant"}; }

SyntheticRule rule_from_id(const std::string& id) {
  for (const auto& known : rule_ids()) {
    if (id == known) {
      SyntheticRule r;
      r.id = id;
      return r;
    }
  }
  throw UsageError("unknown synthetic rule '" + id + "'");
}

LightToken apply_rule(const SyntheticRule& rule, const RowVector& frame) {
  if (rule.id == "constant") return {90, 128};
  if (rule.id != "dominant-band") throw UsageError("unknown synthetic rule '" + rule.id + "'");
  if (frame.cols() != rule.bands) throw UsageError("frame width does not match the rule's band count");
  Eigen::Index band;
  const double peak = frame.maxCoeff(&band);
  const int level = std::clamp(static_cast<int>(std::floor(peak)) - 1, 0, kLevels - 1);
  return {static_cast<std::uint8_t>(band * kHueBins / rule.bands), static_cast<std::uint8_t>(32 * level + 16)};
}

DatasetContainer make_corpus(const SyntheticRule& rule, int n_records, int frames, std::uint64_t seed) {
  check_sizes(n_records, frames);
  if (rule.bands < 1 || rule.min_section < 1 || rule.max_section < rule.min_section)
    throw UsageError("invalid synthetic rule parameters");
  rule_from_id(rule.id);
  DatasetContainer out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, kNoise);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  std::uniform_int_distribution<int> band_dist(0, rule.bands - 1);
  std::uniform_int_distribution<int> level_dist(0, kLevels - 1);
  std::uniform_int_distribution<int> section_dist(rule.min_section, rule.max_section);
  for (int i = 0; i < n_records; ++i) {
    DatasetRecord r;
    r.id = "synth-" + std::to_string(i);
    r.show_id = show_for(i, n_records);
    r.features.kind = "synthetic:" + rule.id;
    r.features.data.resize(frames, rule.bands);
    int band = 0, level = 0, left = 0;
    for (int t = 0; t < frames; ++t) {
      if (left == 0) {
        band = band_dist(rng);
        level = level_dist(rng);
        left = section_dist(rng);
      }
      --left;
      for (int b = 0; b < rule.bands; ++b) r.features.data(t, b) = noise(rng);
      r.features.data(t, band) = 1.0 + level + frac(rng);
    }
    quantize_features(r.features.data);
    for (int t = 0; t < frames; ++t) r.tokens.push_back(apply_rule(rule, r.features.data.row(t)));
    out.records.push_back(std::move(r));
  }
  if (count_rule_mismatches(rule, out) != 0) throw std::logic_error("synthetic labels disagree with their rule");
  return out;
}

std::size_t count_rule_mismatches(const SyntheticRule& rule, const DatasetContainer& corpus) {
  std::size_t bad = 0;
  for (const auto& r : corpus.records) {
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      if (!(apply_rule(rule, r.features.data.row(static_cast<Eigen::Index>(t))) == r.tokens[t])) {
        ++bad;
        break;
      }
    }
  }
  return bad;
}

std::vector<int> detect_impulses(const Matrix& features) {
  std::vector<int> out;
  for (Eigen::Index t = 0; t < features.rows(); ++t)
    if (features.row(t).minCoeff() > kImpulseLevel / 2) out.push_back(static_cast<int>(t));
  return out;
}

namespace {

std::vector<LightToken> toggle_labels(int frames, const std::vector<int>& impulses) {
  std::vector<LightToken> tokens(static_cast<std::size_t>(frames));
  bool state = false;
  std::size_t next = 0;
  for (int t = 0; t < frames; ++t) {
    const bool hit = next < impulses.size() && impulses[next] == t;
    if (hit) {
      state = !state;
      ++next;
    }
    tokens[static_cast<std::size_t>(t)] = {static_cast<std::uint8_t>(state ? kImpulseHueB : kImpulseHueA),
                                           static_cast<std::uint8_t>(hit ? kImpulseValue : kQuietValue)};
  }
  return tokens;
}

}  // namespace

ImpulseCorpus impulse_alignment_corpus(int n_records, int frames, std::uint64_t seed) {
  check_sizes(n_records, frames);
  constexpr int kBands = 16;
  ImpulseCorpus out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, kNoise);
  const int target = std::max(1, frames / 16);
  for (int i = 0; i < n_records; ++i) {
    // Redraw on collision so impulses never touch.
    std::vector<int> impulses;
    if (frames >= 2) {
      std::uniform_int_distribution<int> pos(1, frames - 1);
      for (int attempt = 0; static_cast<int>(impulses.size()) < target && attempt < 100 * target; ++attempt) {
        const int p = pos(rng);
        const bool clash = std::any_of(impulses.begin(), impulses.end(), [p](int q) { return std::abs(p - q) <= 1; });
        if (!clash) impulses.push_back(p);
      }
    }
    std::sort(impulses.begin(), impulses.end());

    DatasetRecord r;
    r.id = "impulse-" + std::to_string(i);
    r.show_id = show_for(i, n_records);
    r.features.kind = "synthetic:impulse";
    r.features.data.resize(frames, kBands);
    for (Eigen::Index k = 0; k < r.features.data.size(); ++k) r.features.data.data()[k] = noise(rng);
    for (int p : impulses) r.features.data.row(p).setConstant(kImpulseLevel);
    quantize_features(r.features.data);
    r.tokens = toggle_labels(frames, impulses);
    out.container.records.push_back(std::move(r));
    out.impulses.push_back(std::move(impulses));
  }
  if (count_impulse_mismatches(out.container) != 0) throw std::logic_error("impulse labels disagree with the rule");
  return out;
}

std::size_t count_impulse_mismatches(const DatasetContainer& corpus) {
  std::size_t bad = 0;
  for (const auto& r : corpus.records) {
    const auto expected = toggle_labels(static_cast<int>(r.frames()), detect_impulses(r.features.data));
    if (expected != r.tokens) ++bad;
  }
  return bad;
}

}  // namespace skiplight::synth
