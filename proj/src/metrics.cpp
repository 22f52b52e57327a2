#include "skiplight/metrics.hpp"

#include <cmath>

#include "skiplight/frame_io.hpp"

namespace skiplight {

namespace {

struct Accumulator {
  double hue_sq = 0, hue_abs = 0, value_sq = 0, value_abs = 0;
  std::size_t n = 0;

  void add(const LightSequence& pred, const LightSequence& truth) {
    if (pred.size() != truth.size())
      throw UsageError("predicted and reference sequences differ in length (" + std::to_string(pred.size()) +
                       " vs " + std::to_string(truth.size()) + ")");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double dh = hue_distance(pred.tokens[i].hue, truth.tokens[i].hue);
      const double dv = value_distance(pred.tokens[i].value, truth.tokens[i].value);
      hue_sq += dh * dh;
      hue_abs += dh;
      value_sq += dv * dv;
      value_abs += dv;
    }
    n += pred.size();
  }

  ErrorStats hue() const { return stats(hue_sq, hue_abs); }
  ErrorStats value() const { return stats(value_sq, value_abs); }

 private:
  ErrorStats stats(double sq, double abs) const {
    if (n == 0) return {};
    return {std::sqrt(sq / static_cast<double>(n)), abs / static_cast<double>(n)};
  }
};

nlohmann::json stats_json(const ErrorStats& s) { return {{"rmse", s.rmse}, {"mae", s.mae}}; }

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : records)
    per.push_back({{"id", r.id}, {"hue", stats_json(r.hue)}, {"value", stats_json(r.value)}, {"count", r.count}});
  return {{"hue", stats_json(hue)}, {"value", stats_json(value)}, {"count", count}, {"records", per}};
}

MetricsReport eval_metrics(const LightSequence& predicted, const LightSequence& truth) {
  return eval_metrics(std::vector<LabelledPair>{{"", &predicted, &truth}});
}

MetricsReport eval_metrics(const std::vector<LabelledPair>& pairs) {
  MetricsReport report;
  Accumulator total;
  for (const auto& p : pairs) {
    Accumulator one;
    one.add(*p.predicted, *p.truth);
    total.add(*p.predicted, *p.truth);
    report.records.push_back({p.id, one.hue(), one.value(), one.n});
  }
  report.hue = total.hue();
  report.value = total.value();
  report.count = total.n;
  return report;
}

RgbFrame render_strip(const LightSequence& sequence, int height) {
  if (height < 1) throw UsageError("strip height must be positive");
  if (sequence.size() == 0) throw UsageError("cannot render an empty sequence");
  RgbFrame img(static_cast<int>(sequence.size()), height);
  for (int x = 0; x < img.width; ++x) {
    const auto rgb = light_to_rgb(sequence.tokens[static_cast<std::size_t>(x)]);
    for (int y = 0; y < height; ++y) img.set(x, y, rgb[0], rgb[1], rgb[2]);
  }
  return img;
}

void render_strip(const LightSequence& sequence, int height, const std::filesystem::path& out) {
  write_ppm(out, render_strip(sequence, height));
}

}  // namespace skiplight
