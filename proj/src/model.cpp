#include "skiplight/model.hpp"

#include <cmath>
#include <numeric>

namespace skiplight {

std::string to_string(SkipMode mode) {
  switch (mode) {
    case SkipMode::PreviousFrame: return "previous";
    case SkipMode::SameFrame: return "same";
    case SkipMode::None: return "none";
  }
  return "previous";
}

SkipMode skip_mode_from_string(const std::string& name) {
  if (name == "previous") return SkipMode::PreviousFrame;
  if (name == "same") return SkipMode::SameFrame;
  if (name == "none") return SkipMode::None;
  throw UsageError("unknown skip mode '" + name + "' (expected previous|same|none)");
}

ModelConfig ModelConfig::full(int feature_dim) {
  ModelConfig c;
  c.feature_dim = feature_dim;
  return c;
}

ModelConfig ModelConfig::tiny(int feature_dim) {
  ModelConfig c;
  c.d_model = 64;
  c.layers = 2;
  c.heads = 4;
  c.ffn_inner = 128;
  c.feature_dim = feature_dim;
  return c;
}

void ModelConfig::validate() const {
  if (d_model < 1 || layers < 1 || heads < 1 || ffn_inner < 1 || feature_dim < 1)
    throw UsageError("model dimensions must be positive");
  if (d_model % heads != 0) throw UsageError("d_model must be divisible by heads");
  if (max_len < 1) throw UsageError("max_len must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must be in [0,1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},         {"layers", layers},   {"heads", heads},
          {"ffn_inner", ffn_inner},     {"dropout", dropout}, {"max_len", max_len},
          {"feature_dim", feature_dim}, {"seed", seed},       {"skip", skiplight::to_string(skip)},
          {"hue_vocab", kHueBins},      {"value_vocab", kValueBins}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_inner = j.value("ffn_inner", c.ffn_inner);
  c.dropout = j.value("dropout", c.dropout);
  c.max_len = j.value("max_len", c.max_len);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.seed = j.value("seed", c.seed);
  c.skip = skip_mode_from_string(j.value("skip", std::string("previous")));
  c.validate();
  return c;
}

const Matrix& ModelParameters::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("missing parameter " + name);
  return it->second;
}

Matrix& ModelParameters::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("missing parameter " + name);
  return it->second;
}

std::size_t ModelParameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : tensors) n += static_cast<std::size_t>(m.size());
  return n;
}

namespace {

using Kind = ParamSpec::Kind;

void add_linear(std::vector<ParamSpec>& specs, const std::string& prefix, int in, int out) {
  specs.push_back({prefix + ".weight", out, in, Kind::Weight, in});
  specs.push_back({prefix + ".bias", 1, out, Kind::Bias, in});
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& prefix, int d) {
  specs.push_back({prefix + ".gain", 1, d, Kind::Gain, d});
  specs.push_back({prefix + ".bias", 1, d, Kind::Bias, d});
}

void add_attention(std::vector<ParamSpec>& specs, const std::string& prefix, int d) {
  for (const char* p : {".q", ".k", ".v", ".o"}) add_linear(specs, prefix + p, d, d);
}

std::string layer_prefix(const char* stack, int i) { return std::string(stack) + ".layers." + std::to_string(i); }

}  // namespace

std::vector<ParamSpec> declare_parameters(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> specs;
  const int d = c.d_model;
  add_linear(specs, "music.fc1", c.feature_dim, d);
  add_linear(specs, "music.fc2", d, d);
  specs.push_back({"pos.encoder", c.max_len, d, Kind::Embedding, d});
  specs.push_back({"pos.decoder", c.max_len, d, Kind::Embedding, d});
  specs.push_back({"light.hue", kHueBins + 1, d, Kind::Embedding, d});
  specs.push_back({"light.value", kValueBins + 1, d, Kind::Embedding, d});
  for (int i = 0; i < c.layers; ++i) {
    const std::string p = layer_prefix("encoder", i);
    add_norm(specs, p + ".ln1", d);
    add_attention(specs, p + ".self_attn", d);
    add_norm(specs, p + ".ln2", d);
    add_linear(specs, p + ".ffn.fc1", d, c.ffn_inner);
    add_linear(specs, p + ".ffn.fc2", c.ffn_inner, d);
  }
  add_norm(specs, "encoder.final_ln", d);
  for (int i = 0; i < c.layers; ++i) {
    const std::string p = layer_prefix("decoder", i);
    add_norm(specs, p + ".ln1", d);
    add_attention(specs, p + ".self_attn", d);
    add_norm(specs, p + ".ln2", d);
    add_attention(specs, p + ".cross_attn", d);
    add_norm(specs, p + ".ln3", d);
    add_linear(specs, p + ".ffn.fc1", d, c.ffn_inner);
    add_linear(specs, p + ".ffn.fc2", c.ffn_inner, d);
  }
  add_norm(specs, "decoder.final_ln", d);
  add_linear(specs, "heads.hue", d, kHueBins);
  add_linear(specs, "heads.value", d, kValueBins);
  add_linear(specs, "heads.recover", d, c.feature_dim);
  add_linear(specs, "heads.disc.fc1", d, d);
  add_linear(specs, "heads.disc.fc2", d, 2);
  return specs;
}

ModelParameters init_parameters(const ModelConfig& config) {
  ModelParameters params;
  std::mt19937_64 rng(config.seed);
  for (const auto& spec : declare_parameters(config)) {
    Matrix m(spec.rows, spec.cols);
    switch (spec.kind) {
      case Kind::Bias: m.setZero(); break;
      case Kind::Gain: m.setOnes(); break;
      case Kind::Weight:
      case Kind::Embedding: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
        break;
      }
    }
    params.tensors.emplace(spec.name, std::move(m));
  }
  return params;
}

void validate_parameters(const ModelConfig& config, const ModelParameters& params) {
  const auto specs = declare_parameters(config);
  for (const auto& spec : specs) {
    auto it = params.tensors.find(spec.name);
    if (it == params.tensors.end()) throw DataError("missing parameter " + spec.name);
    if (it->second.rows() != spec.rows || it->second.cols() != spec.cols)
      throw DataError("parameter " + spec.name + " has shape " + std::to_string(it->second.rows()) + "x" +
                      std::to_string(it->second.cols()) + ", expected " + std::to_string(spec.rows) + "x" +
                      std::to_string(spec.cols));
    if (!it->second.allFinite()) throw DataError("parameter " + spec.name + " has non-finite values");
  }
  if (params.tensors.size() != specs.size()) throw DataError("parameter map has undeclared entries");
}

bool is_attention_projection(const std::string& name) {
  const bool attn = name.find(".self_attn.") != std::string::npos || name.find(".cross_attn.") != std::string::npos;
  return attn && name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

ForwardContext::ForwardContext(ad::Tape& tape, const ModelConfig& config, const ModelParameters& params)
    : tape_(tape), config_(config), params_(params) {}

ForwardContext& ForwardContext::with_adapters(const LoraSet* adapters) {
  adapters_ = adapters;
  return *this;
}

ForwardContext& ForwardContext::training(std::uint64_t dropout_seed) {
  training_ = true;
  rng_.seed(dropout_seed);
  return *this;
}

ForwardContext& ForwardContext::trainable(std::function<bool(const std::string&)> filter) {
  trainable_ = std::move(filter);
  return *this;
}

std::string ForwardContext::adapter_name(const std::string& target, char which) {
  return "lora." + target + "." + which;
}

ad::Var ForwardContext::param(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  const bool train = !trainable_ || trainable_(name);
  ad::Var v = tape_.parameter(name, params_.at(name), train);
  cache_.emplace(name, v);
  return v;
}

ad::Var ForwardContext::linear(const std::string& prefix, ad::Var x) {
  const std::string wname = prefix + ".weight";
  ad::Var out = ad::linear(x, param(wname), param(prefix + ".bias"));
  if (adapters_ == nullptr) return out;
  auto it = adapters_->find(wname);
  if (it == adapters_->end()) return out;
  const LoraAdapter& lora = it->second;
  auto adapter_var = [&](char which, const Matrix& m) {
    const std::string name = adapter_name(wname, which);
    auto found = cache_.find(name);
    if (found != cache_.end()) return found->second;
    ad::Var v = tape_.parameter(name, m, !trainable_ || trainable_(name));
    cache_.emplace(name, v);
    return v;
  };
  ad::Var low = ad::matmul_nt(ad::matmul_nt(x, adapter_var('A', lora.a)), adapter_var('B', lora.b));
  return ad::add(out, ad::scale(low, lora.scaling()));
}

ad::Var ForwardContext::dropout(ad::Var x) {
  if (!training_ || config_.dropout <= 0.0) return x;
  return ad::dropout(x, config_.dropout, rng_);
}

namespace {

std::vector<int> iota_ids(Eigen::Index n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

ad::Var positions(ForwardContext& ctx, const char* table, Eigen::Index n) {
  if (n > ctx.config().max_len)
    throw UsageError("sequence length " + std::to_string(n) + " exceeds max_len " +
                     std::to_string(ctx.config().max_len));
  const auto ids = iota_ids(n);
  return ad::gather_rows(ctx.param(table), ids);
}

ad::Var attention_block(ForwardContext& ctx, const std::string& prefix, ad::Var query_in, ad::Var kv_in,
                        bool causal) {
  ad::Var q = ctx.linear(prefix + ".q", query_in);
  ad::Var k = ctx.linear(prefix + ".k", kv_in);
  ad::Var v = ctx.linear(prefix + ".v", kv_in);
  ad::Var attn = ad::attention(q, k, v, ctx.config().heads, causal);
  return ctx.linear(prefix + ".o", attn);
}

ad::Var feed_forward(ForwardContext& ctx, const std::string& prefix, ad::Var x) {
  return ctx.linear(prefix + ".fc2", ad::gelu(ctx.linear(prefix + ".fc1", x)));
}

ad::Var norm(ForwardContext& ctx, const std::string& prefix, ad::Var x) {
  return ad::layer_norm(x, ctx.param(prefix + ".gain"), ctx.param(prefix + ".bias"));
}

void require_rows(ad::Var x) {
  if (x.rows() < 1) throw UsageError("sequence must contain at least one frame");
}

}  // namespace

ad::Var music_mlp(ForwardContext& ctx, ad::Var features) {
  if (features.cols() != ctx.config().feature_dim)
    throw UsageError("feature dimension " + std::to_string(features.cols()) + " does not match model (" +
                     std::to_string(ctx.config().feature_dim) + ")");
  return ctx.linear("music.fc2", ad::gelu(ctx.linear("music.fc1", features)));
}

ad::Var embed_music(ForwardContext& ctx, ad::Var features) {
  ad::Var emb = music_mlp(ctx, features);
  return ad::add(emb, positions(ctx, "pos.encoder", emb.rows()));
}

DecoderTokens shift_right(std::span<const LightToken> tokens) {
  DecoderTokens out;
  out.hue.reserve(tokens.size());
  out.value.reserve(tokens.size());
  out.hue.push_back(kHueBos);
  out.value.push_back(kValueBos);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    out.hue.push_back(tokens[i].hue);
    out.value.push_back(tokens[i].value);
  }
  if (tokens.empty()) {
    out.hue.clear();
    out.value.clear();
  }
  return out;
}

ad::Var embed_light(ForwardContext& ctx, const DecoderTokens& tokens) {
  if (tokens.hue.size() != tokens.value.size()) throw UsageError("hue/value token count mismatch");
  return ad::add(ad::gather_rows(ctx.param("light.hue"), tokens.hue),
                 ad::gather_rows(ctx.param("light.value"), tokens.value));
}

namespace {

int skip_offset(SkipMode mode) {
  switch (mode) {
    case SkipMode::PreviousFrame: return 2;
    case SkipMode::SameFrame: return 1;
    case SkipMode::None: return -1;
  }
  return -1;
}

}  // namespace

std::vector<int> skip_pairing(int length, SkipMode mode) {
  // Slot s holds y_{s-1}; y_i pairs with x_{i-1} or x_i.
  std::vector<int> pair(static_cast<std::size_t>(length), -1);
  const int offset = skip_offset(mode);
  if (offset < 0) return pair;
  for (int s = 1; s < length; ++s) pair[s] = s - offset >= 0 ? s - offset : -1;
  return pair;
}

ad::Var skip_combine(ForwardContext& ctx, ad::Var light_emb, ad::Var music_emb) {
  if (light_emb.rows() != music_emb.rows() || light_emb.cols() != music_emb.cols())
    throw UsageError("skip_combine: light and music embeddings differ in shape");
  ad::Var combined = light_emb;
  const int offset = skip_offset(ctx.config().skip);
  if (offset >= 0) combined = ad::add(combined, ad::shift_rows(music_emb, offset));
  return ad::add(combined, positions(ctx, "pos.decoder", light_emb.rows()));
}

ad::Var encode(ForwardContext& ctx, ad::Var x) {
  require_rows(x);
  x = ctx.dropout(x);
  for (int i = 0; i < ctx.config().layers; ++i) {
    const std::string p = layer_prefix("encoder", i);
    ad::Var h = norm(ctx, p + ".ln1", x);
    x = ad::add(x, ctx.dropout(attention_block(ctx, p + ".self_attn", h, h, false)));
    x = ad::add(x, ctx.dropout(feed_forward(ctx, p + ".ffn", norm(ctx, p + ".ln2", x))));
  }
  return norm(ctx, "encoder.final_ln", x);
}

ad::Var decode(ForwardContext& ctx, ad::Var x, ad::Var memory) {
  require_rows(x);
  require_rows(memory);
  x = ctx.dropout(x);
  for (int i = 0; i < ctx.config().layers; ++i) {
    const std::string p = layer_prefix("decoder", i);
    ad::Var h = norm(ctx, p + ".ln1", x);
    x = ad::add(x, ctx.dropout(attention_block(ctx, p + ".self_attn", h, h, true)));
    x = ad::add(x, ctx.dropout(attention_block(ctx, p + ".cross_attn", norm(ctx, p + ".ln2", x), memory, false)));
    x = ad::add(x, ctx.dropout(feed_forward(ctx, p + ".ffn", norm(ctx, p + ".ln3", x))));
  }
  return norm(ctx, "decoder.final_ln", x);
}

LmOutput forward_lm(ForwardContext& ctx, ad::Var features, std::span<const LightToken> tokens) {
  if (static_cast<Eigen::Index>(tokens.size()) != features.rows())
    throw UsageError("light sequence length must match feature frames");
  ad::Var music = music_mlp(ctx, features);
  ad::Var memory = encode(ctx, ad::add(music, positions(ctx, "pos.encoder", music.rows())));
  ad::Var light = embed_light(ctx, shift_right(tokens));
  ad::Var hidden = decode(ctx, skip_combine(ctx, light, music), memory);
  return {ctx.linear("heads.hue", hidden), ctx.linear("heads.value", hidden)};
}

MlmOutput forward_mlm(ForwardContext& ctx, ad::Var features) {
  ad::Var music = music_mlp(ctx, features);
  ad::Var memory = encode(ctx, ad::add(music, positions(ctx, "pos.encoder", music.rows())));
  ad::Var dec_in = ad::add(ad::shift_rows(music, 1), positions(ctx, "pos.decoder", music.rows()));
  ad::Var hidden = decode(ctx, dec_in, memory);
  return {ctx.linear("heads.recover", hidden), hidden};
}

ad::Var discriminate(ForwardContext& ctx, ad::Var features) {
  ad::Var pooled = ad::mean_rows(forward_mlm(ctx, features).hidden);
  return ctx.linear("heads.disc.fc2", ad::gelu(ctx.linear("heads.disc.fc1", pooled)));
}

LmLogits lm_logits(const ModelConfig& config, const ModelParameters& params, const Matrix& features,
                   std::span<const LightToken> tokens, const LoraSet* adapters) {
  ad::Tape tape(false);
  ForwardContext ctx(tape, config, params);
  ctx.with_adapters(adapters);
  LmOutput out = forward_lm(ctx, tape.constant(features), tokens);
  return {out.hue_logits.value(), out.value_logits.value()};
}

}  // namespace skiplight
