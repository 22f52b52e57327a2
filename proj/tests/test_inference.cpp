#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "skiplight/inference.hpp"
#include "skiplight/metrics.hpp"

using namespace skiplight;

namespace {

ModelConfig small() {
  ModelConfig c = ModelConfig::tiny(8);
  c.d_model = 16;
  c.heads = 2;
  c.ffn_inner = 32;
  c.max_len = 128;
  c.seed = 2;
  return c;
}

FeatureMatrix random_features(int t, int f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  FeatureMatrix fm;
  fm.data.resize(t, f);
  for (Eigen::Index i = 0; i < fm.data.size(); ++i) fm.data.data()[i] = n(rng);
  return fm;
}

LightSequence seq(std::vector<std::pair<int, int>> v) {
  LightSequence s;
  for (auto [h, val] : v) s.tokens.push_back({static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(val)});
  return s;
}

}  // namespace

TEST(Restricted, UniformLogitsSupport) {
  const std::vector<double> logits(180, 0.0);
  const auto p = restricted_distribution(logits, 90, TokenMetric::CyclicHue, 10, 1.0);
  for (int h = 0; h < 180; ++h) {
    if (h >= 81 && h <= 99) {
      EXPECT_NEAR(p[h], 1.0 / 19, 1e-15) << h;
    } else {
      EXPECT_EQ(p[h], 0.0) << h;
    }
  }
  const auto wrap = restricted_distribution(logits, 2, TokenMetric::CyclicHue, 4, 1.0);
  EXPECT_GT(wrap[179], 0.0);
  EXPECT_EQ(wrap[178], 0.0);  // distance 4 is not strictly inside
  const std::vector<double> vl(256, 0.0);
  const auto v = restricted_distribution(vl, 0, TokenMetric::Absolute, 64, 1.0);
  EXPECT_GT(v[63], 0.0);
  EXPECT_EQ(v[64], 0.0);
  const auto free = restricted_distribution(logits, std::nullopt, TokenMetric::CyclicHue, 10, 1.0);
  EXPECT_NEAR(free[0], 1.0 / 180, 1e-15);
}

TEST(Restricted, MatchesExactSoftmax) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  std::vector<double> logits(256);
  for (double& l : logits) l = n(rng);
  const auto p = restricted_distribution(logits, 200, TokenMetric::Absolute, 40, 1.3);
  double z = 0.0;
  for (int i = 161; i < 240; ++i) z += std::exp(logits[i] / 1.3);
  for (int i = 0; i < 256; ++i) {
    const double expect = (i > 160 && i < 240) ? std::exp(logits[i] / 1.3) / z : 0.0;
    EXPECT_NEAR(p[i], expect, 1e-14);
  }
  std::vector<double> counts(256, 0.0);
  for (int i = 0; i < 100000; ++i) counts[restricted_sample(logits, 200, TokenMetric::Absolute, 40, 1.3, rng)] += 1;
  double l1 = 0.0;
  for (int i = 0; i < 256; ++i) l1 += std::abs(counts[i] / 100000 - p[i]);
  EXPECT_LT(l1, 0.02);
}

TEST(Restricted, ColdTemperaturePicksArgmax) {
  std::vector<double> logits(180, 0.0);
  logits[100] = 3.0;  // outside the window
  logits[50] = 1.0;
  logits[52] = 0.999;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(restricted_sample(logits, 55, TokenMetric::CyclicHue, 30, 1e-6, rng), 50);
}

TEST(Restricted, RejectsBadArguments) {
  const std::vector<double> logits(180, 0.0);
  EXPECT_THROW(restricted_distribution(logits, 0, TokenMetric::CyclicHue, 0, 1.0), UsageError);
  EXPECT_THROW(restricted_distribution(logits, 0, TokenMetric::CyclicHue, 10, 0.0), UsageError);
  SamplerConfig bad;
  bad.temperature = -1;
  EXPECT_THROW(bad.validate(), UsageError);
}

TEST(Generate, ConstraintsLengthAndDeterminism) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  const FeatureMatrix f = random_features(100, c.feature_dim, 3);
  SamplerConfig s;
  s.seed = 11;
  s.hue_threshold = 12;
  s.value_threshold = 20;
  const GenerationResult a = generate(f, c, p, s);
  const GenerationResult b = generate(f, c, p, s);
  ASSERT_EQ(a.sequence.size(), 100u);
  EXPECT_EQ(a.sequence.tokens, b.sequence.tokens);
  for (std::size_t i = 1; i < a.sequence.size(); ++i) {
    EXPECT_LT(hue_distance(a.sequence.tokens[i].hue, a.sequence.tokens[i - 1].hue), 12);
    EXPECT_LT(value_distance(a.sequence.tokens[i].value, a.sequence.tokens[i - 1].value), 20);
  }
  for (double q : a.hue_probability) EXPECT_TRUE(q > 0.0 && q <= 1.0);
  s.seed = 12;
  EXPECT_NE(generate(f, c, p, s).sequence.tokens, a.sequence.tokens);
}

TEST(Generate, SingleFrameAndLengthLimit) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  EXPECT_EQ(generate(random_features(1, c.feature_dim, 4), c, p, {}).sequence.size(), 1u);
  EXPECT_EQ(generate(random_features(129, c.feature_dim, 4), c, p, {}).sequence.size(), 128u);
  SamplerConfig s;
  s.max_len = 10;
  EXPECT_EQ(generate(random_features(11, c.feature_dim, 4), c, p, s).sequence.size(), 10u);
  s.max_len = 129;
  EXPECT_THROW(generate(random_features(11, c.feature_dim, 4), c, p, s), UsageError);
  EXPECT_THROW(generate(FeatureMatrix{}, c, p, {}), UsageError);
  EXPECT_THROW(generate(random_features(5, c.feature_dim + 1, 4), c, p, {}), UsageError);
}

TEST(Generate, ColdSamplingFollowsGreedyLogits) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  const FeatureMatrix f = random_features(12, c.feature_dim, 5);
  SamplerConfig s;
  s.temperature = 1e-6;
  s.hue_threshold = 90;
  s.value_threshold = 255;
  const auto g = generate(f, c, p, s).sequence.tokens;
  const LmLogits l = lm_logits(c, p, f.data, g);
  // Argmax over the admissible set, recomputed here from the full logits.
  const auto best = [](const Matrix& logits, int t, int prev, auto dist, int threshold) {
    int arg = -1;
    for (int i = 0; i < logits.cols(); ++i)
      if ((t == 0 || dist(i, prev) < threshold) && (arg < 0 || logits(t, i) > logits(t, arg))) arg = i;
    return arg;
  };
  const auto hd = [](int a, int b) { return std::min(std::abs(a - b), 180 - std::abs(a - b)); };
  const auto vd = [](int a, int b) { return std::abs(a - b); };
  for (int t = 0; t < 12; ++t) {
    EXPECT_EQ(g[t].hue, best(l.hue, t, t ? g[t - 1].hue : 0, hd, 90));
    EXPECT_EQ(g[t].value, best(l.value, t, t ? g[t - 1].value : 0, vd, 255));
  }
}

TEST(Metrics, Examples) {
  const MetricsReport same = eval_metrics(seq({{5, 5}, {6, 6}}), seq({{5, 5}, {6, 6}}));
  EXPECT_EQ(same.hue.rmse, 0.0);
  EXPECT_EQ(same.value.mae, 0.0);
  const MetricsReport wrap = eval_metrics(seq({{0, 0}, {179, 0}}), seq({{179, 0}, {0, 0}}));
  EXPECT_DOUBLE_EQ(wrap.hue.mae, 1.0);
  EXPECT_DOUBLE_EQ(wrap.hue.rmse, 1.0);
  EXPECT_THROW(eval_metrics(seq({{0, 0}}), seq({{0, 0}, {1, 1}})), UsageError);

  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> h(0, 179), v(0, 255);
  LightSequence a, b;
  double hs = 0, ha = 0, vs = 0, va = 0;
  for (int i = 0; i < 500; ++i) {
    const int h1 = h(rng), h2 = h(rng), v1 = v(rng), v2 = v(rng);
    a.tokens.push_back({static_cast<std::uint8_t>(h1), static_cast<std::uint8_t>(v1)});
    b.tokens.push_back({static_cast<std::uint8_t>(h2), static_cast<std::uint8_t>(v2)});
    const double dh = std::min(std::abs(h1 - h2), 180 - std::abs(h1 - h2)), dv = std::abs(v1 - v2);
    hs += dh * dh, ha += dh, vs += dv * dv, va += dv;
  }
  const MetricsReport r = eval_metrics(a, b);
  EXPECT_NEAR(r.hue.rmse, std::sqrt(hs / 500), 1e-12);
  EXPECT_NEAR(r.hue.mae, ha / 500, 1e-12);
  EXPECT_NEAR(r.value.rmse, std::sqrt(vs / 500), 1e-12);
  EXPECT_NEAR(r.value.mae, va / 500, 1e-12);
}

TEST(Metrics, PooledOverRecords) {
  const LightSequence p1 = seq({{0, 10}}), t1 = seq({{10, 10}});
  const LightSequence p2 = seq({{0, 0}, {0, 0}, {0, 0}}), t2 = seq({{0, 0}, {0, 0}, {0, 0}});
  const MetricsReport r = eval_metrics(std::vector<LabelledPair>{{"a", &p1, &t1}, {"b", &p2, &t2}});
  EXPECT_EQ(r.count, 4u);
  EXPECT_DOUBLE_EQ(r.hue.mae, 2.5);
  EXPECT_DOUBLE_EQ(r.hue.rmse, 5.0);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_DOUBLE_EQ(r.records[0].hue.mae, 10.0);
  EXPECT_EQ(r.to_json()["hue"]["mae"], 2.5);
}

TEST(Render, StripColours) {
  const RgbFrame red = render_strip(seq({{0, 255}, {0, 255}, {0, 255}}), 4);
  EXPECT_EQ(red.width, 3);
  EXPECT_EQ(red.height, 4);
  for (std::size_t i = 0; i < red.pixel_count(); ++i) {
    EXPECT_EQ(red.pixels[3 * i], 255);
    EXPECT_EQ(red.pixels[3 * i + 1], 0);
    EXPECT_EQ(red.pixels[3 * i + 2], 0);
  }
  const RgbFrame black = render_strip(seq({{40, 0}, {170, 0}}), 2);
  for (auto p : black.pixels) EXPECT_EQ(p, 0);
}

TEST(Render, RetokenizesColumns) {
  // Value survives exactly; hue is exact from value 30 up, within 15 bins below.
  for (int v = 1; v < 256; ++v)
    for (int h = 0; h < 180; ++h) {
      const RgbFrame col = render_strip(seq({{h, v}}), 1);
      const LightToken back = tokenize_frame(col, 0);
      EXPECT_EQ(back.value, v);
      EXPECT_LE(hue_distance(back.hue, h), v >= 30 ? 0 : 15) << h << " " << v;
    }
}
