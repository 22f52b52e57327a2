#include "skiplight/inference.hpp"

#include <cassert>
#include <cmath>

namespace skiplight {

namespace {

int distance(TokenMetric metric, int a, int b) {
  return metric == TokenMetric::CyclicHue ? hue_distance(a, b) : value_distance(a, b);
}

RowVector linear_row(const ModelParameters& p, const std::string& prefix, const RowVector& x) {
  return x * p.at(prefix + ".weight").transpose() + p.at(prefix + ".bias");
}

Matrix linear_rows(const ModelParameters& p, const std::string& prefix, const Matrix& x) {
  Matrix out = x * p.at(prefix + ".weight").transpose();
  out.rowwise() += p.at(prefix + ".bias").row(0);
  return out;
}

RowVector layer_norm_row(const ModelParameters& p, const std::string& prefix, const RowVector& x) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const RowVector xhat = (x.array() - mean) / std::sqrt(var + 1e-5);
  return xhat.cwiseProduct(p.at(prefix + ".gain").row(0)) + p.at(prefix + ".bias").row(0);
}

RowVector gelu_row(const RowVector& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
}

// One query row against the first `n` cached key/value rows, all heads.
RowVector attend(const RowVector& q, const Matrix& k, const Matrix& v, Eigen::Index n, int heads) {
  const Eigen::Index dh = q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  RowVector out(q.cols());
  Eigen::VectorXd w(n);
  for (int h = 0; h < heads; ++h) {
    w.noalias() = k.topRows(n).middleCols(h * dh, dh) * q.segment(h * dh, dh).transpose();
    w *= inv;
    w = (w.array() - w.maxCoeff()).exp();
    w /= w.sum();
    out.segment(h * dh, dh).noalias() = w.transpose() * v.topRows(n).middleCols(h * dh, dh);
  }
  return out;
}

// Decoder with per-layer key/value caches over a fixed encoder memory.
class CachedDecoder {
 public:
  CachedDecoder(const ModelConfig& config, const ModelParameters& params, const Matrix& features)
      : c_(config), p_(params), length_(features.rows()) {
    ad::Tape tape(false);
    ForwardContext ctx(tape, config, params);
    ad::Var music = music_mlp(ctx, tape.constant(features));
    music_ = music.value();
    Matrix pos = params.at("pos.encoder").topRows(length_);
    const Matrix memory = encode(ctx, tape.constant(music_ + pos)).value();
    pairing_ = skip_pairing(static_cast<int>(length_), config.skip);
    for (int i = 0; i < config.layers; ++i) {
      const std::string pre = prefix(i) + ".cross_attn";
      cross_k_.push_back(linear_rows(params, pre + ".k", memory));
      cross_v_.push_back(linear_rows(params, pre + ".v", memory));
      self_k_.push_back(Matrix(length_, config.d_model));
      self_v_.push_back(Matrix(length_, config.d_model));
    }
  }

  Eigen::Index length() const { return length_; }

  /// Logits for slot `s` given the token held there (BOS ids for slot 0).
  std::pair<RowVector, RowVector> step(Eigen::Index s, int hue_id, int value_id) {
    RowVector x = p_.at("light.hue").row(hue_id) + p_.at("light.value").row(value_id);
    if (pairing_[static_cast<std::size_t>(s)] >= 0) x += music_.row(pairing_[static_cast<std::size_t>(s)]);
    x += p_.at("pos.decoder").row(s);
    for (int i = 0; i < c_.layers; ++i) {
      const std::string pre = prefix(i);
      RowVector h = layer_norm_row(p_, pre + ".ln1", x);
      self_k_[i].row(s) = linear_row(p_, pre + ".self_attn.k", h);
      self_v_[i].row(s) = linear_row(p_, pre + ".self_attn.v", h);
      const RowVector q = linear_row(p_, pre + ".self_attn.q", h);
      x += linear_row(p_, pre + ".self_attn.o", attend(q, self_k_[i], self_v_[i], s + 1, c_.heads));
      h = layer_norm_row(p_, pre + ".ln2", x);
      const RowVector cq = linear_row(p_, pre + ".cross_attn.q", h);
      x += linear_row(p_, pre + ".cross_attn.o", attend(cq, cross_k_[i], cross_v_[i], length_, c_.heads));
      h = layer_norm_row(p_, pre + ".ln3", x);
      x += linear_row(p_, pre + ".ffn.fc2", gelu_row(linear_row(p_, pre + ".ffn.fc1", h)));
    }
    const RowVector out = layer_norm_row(p_, "decoder.final_ln", x);
    return {linear_row(p_, "heads.hue", out), linear_row(p_, "heads.value", out)};
  }

 private:
  static std::string prefix(int i) { return "decoder.layers." + std::to_string(i); }

  const ModelConfig& c_;
  const ModelParameters& p_;
  Eigen::Index length_;
  Matrix music_;
  std::vector<int> pairing_;
  std::vector<Matrix> cross_k_, cross_v_, self_k_, self_v_;
};

Matrix checked_prefix(const ModelConfig& config, const Matrix& features, Eigen::Index length) {
  if (features.rows() < 1) throw UsageError("generation needs at least one feature frame");
  if (features.cols() != config.feature_dim)
    throw UsageError("feature dimension " + std::to_string(features.cols()) + " does not match model (" +
                     std::to_string(config.feature_dim) + ")");
  return features.topRows(std::min<Eigen::Index>(length, features.rows()));
}

}  // namespace

std::vector<double> restricted_distribution(std::span<const double> logits, std::optional<int> prev,
                                            TokenMetric metric, int threshold, double temperature) {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  if (prev && threshold <= 0) throw UsageError("restriction threshold must be positive");
  const std::size_t n = logits.size();
  std::vector<bool> allowed(n, true);
  if (prev)
    for (std::size_t i = 0; i < n; ++i) allowed[i] = distance(metric, static_cast<int>(i), *prev) < threshold;

  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (allowed[i]) mx = std::max(mx, logits[i] / temperature);
  assert(std::isfinite(mx));  // prev itself is always admissible
  std::vector<double> p(n, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!allowed[i]) continue;
    p[i] = std::exp(logits[i] / temperature - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

int restricted_sample(std::span<const double> logits, std::optional<int> prev, TokenMetric metric, int threshold,
                      double temperature, std::mt19937_64& rng) {
  const auto p = restricted_distribution(logits, prev, metric, threshold, temperature);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;  // rounding left u above the running sum
}

void SamplerConfig::validate() const {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  if (hue_threshold <= 0 || hue_threshold > 90) throw UsageError("hue threshold must be in (0, 90]");
  if (value_threshold <= 0 || value_threshold > 255) throw UsageError("value threshold must be in (0, 255]");
  if (max_len < 0) throw UsageError("max_len must be non-negative");
}

nlohmann::json SamplerConfig::to_json() const {
  return {{"temperature", temperature},
          {"hue_threshold", hue_threshold},
          {"value_threshold", value_threshold},
          {"seed", seed},
          {"max_len", max_len},
          {"temperature_schedule", static_cast<bool>(temperature_schedule)}};
}

GenerationResult generate(const FeatureMatrix& features, const ModelConfig& config, const ModelParameters& params,
                          const SamplerConfig& sampler) {
  sampler.validate();
  const int limit = sampler.max_len > 0 ? std::min(sampler.max_len, config.max_len) : config.max_len;
  if (sampler.max_len > config.max_len) throw UsageError("max_len exceeds the model's maximum length");
  CachedDecoder decoder(config, params, checked_prefix(config, features.data, limit));

  GenerationResult result;
  result.seed = sampler.seed;
  result.config = sampler;
  result.sequence.frame_rate = features.frame_rate;
  std::mt19937_64 rng(sampler.seed);
  std::optional<int> prev_h, prev_v;
  int hue_id = kHueBos, value_id = kValueBos;
  for (Eigen::Index s = 0; s < decoder.length(); ++s) {
    const double t = sampler.temperature_schedule ? sampler.temperature_schedule(static_cast<std::size_t>(s))
                                                  : sampler.temperature;
    const auto [hue_logits, value_logits] = decoder.step(s, hue_id, value_id);
    const std::span<const double> hl(hue_logits.data(), static_cast<std::size_t>(hue_logits.size()));
    const std::span<const double> vl(value_logits.data(), static_cast<std::size_t>(value_logits.size()));
    const int h = restricted_sample(hl, prev_h, TokenMetric::CyclicHue, sampler.hue_threshold, t, rng);
    const int v = restricted_sample(vl, prev_v, TokenMetric::Absolute, sampler.value_threshold, t, rng);
    result.hue_probability.push_back(
        restricted_distribution(hl, prev_h, TokenMetric::CyclicHue, sampler.hue_threshold, t)[h]);
    result.value_probability.push_back(
        restricted_distribution(vl, prev_v, TokenMetric::Absolute, sampler.value_threshold, t)[v]);
    result.sequence.tokens.push_back({static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(v)});
    prev_h = hue_id = h;
    prev_v = value_id = v;
  }
  return result;
}

LmLogits incremental_logits(const ModelConfig& config, const ModelParameters& params, const Matrix& features,
                            std::span<const LightToken> tokens) {
  if (static_cast<Eigen::Index>(tokens.size()) != features.rows())
    throw UsageError("light sequence length must match feature frames");
  CachedDecoder decoder(config, params, checked_prefix(config, features, config.max_len));
  LmLogits out{Matrix(decoder.length(), kHueBins), Matrix(decoder.length(), kValueBins)};
  int hue_id = kHueBos, value_id = kValueBos;
  for (Eigen::Index s = 0; s < decoder.length(); ++s) {
    auto [h, v] = decoder.step(s, hue_id, value_id);
    out.hue.row(s) = h;
    out.value.row(s) = v;
    hue_id = tokens[static_cast<std::size_t>(s)].hue;
    value_id = tokens[static_cast<std::size_t>(s)].value;
  }
  return out;
}

}  // namespace skiplight
