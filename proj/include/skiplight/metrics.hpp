#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "skiplight/lightcodec.hpp"

namespace skiplight {

struct ErrorStats {
  double rmse = 0.0;
  double mae = 0.0;
};

struct RecordMetrics {
  std::string id;
  ErrorStats hue;    // cyclic distance
  ErrorStats value;  // absolute difference
  std::size_t count = 0;
};

/// Aggregate statistics pool every frame of every record.
struct MetricsReport {
  ErrorStats hue;
  ErrorStats value;
  std::size_t count = 0;
  std::vector<RecordMetrics> records;

  nlohmann::json to_json() const;
};

/// Throws UsageError when the lengths differ.
MetricsReport eval_metrics(const LightSequence& predicted, const LightSequence& truth);

struct LabelledPair {
  std::string id;
  const LightSequence* predicted;
  const LightSequence* truth;
};
MetricsReport eval_metrics(const std::vector<LabelledPair>& pairs);

/// One column per frame, `height` rows tall.
RgbFrame render_strip(const LightSequence& sequence, int height);
void render_strip(const LightSequence& sequence, int height, const std::filesystem::path& out);

}  // namespace skiplight
