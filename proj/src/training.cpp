#include "skiplight/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <limits>
#include <sstream>

#include "skiplight/merge.hpp"

namespace skiplight {

namespace {

bool is_disc(const std::string& name) { return name.rfind("heads.disc.", 0) == 0; }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void add_grads(std::map<std::string, Matrix>& sum, const std::map<std::string, Matrix>& g) {
  for (const auto& [name, m] : g) {
    auto it = sum.find(name);
    if (it == sum.end()) {
      sum.emplace(name, m);
    } else {
      it->second += m;
    }
  }
}

void scale_grads(std::map<std::string, Matrix>& g, double s) {
  for (auto& [name, m] : g) m *= s;
}

// Pointers to the parameter and adapter tensors named in `grads`.
std::map<std::string, Matrix*> targets(TrainState& state, const std::map<std::string, Matrix>& grads) {
  std::map<std::string, Matrix*> out;
  for (const auto& [name, g] : grads) {
    if (state.params.contains(name)) {
      out.emplace(name, &state.params.at(name));
      continue;
    }
    bool found = false;
    if (state.adapters) {
      for (auto& [target, lora] : *state.adapters) {
        if (name == ForwardContext::adapter_name(target, 'A')) out.emplace(name, &lora.a), found = true;
        if (name == ForwardContext::adapter_name(target, 'B')) out.emplace(name, &lora.b), found = true;
      }
    }
    if (!found) throw std::logic_error("gradient for unknown tensor " + name);
  }
  return out;
}

void check_finite(const std::map<std::string, double>& losses, const std::string& where) {
  for (const auto& [k, v] : losses) {
    if (std::isfinite(v)) continue;
    std::ostringstream msg;
    msg << "non-finite loss " << where << ":";
    for (const auto& [k2, v2] : losses) msg << ' ' << k2 << '=' << v2;
    throw NonFiniteLoss(msg.str());
  }
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index c;
    logits.row(r).maxCoeff(&c);
    out[static_cast<std::size_t>(r)] = static_cast<int>(c);
  }
  return out;
}

// Splits a record into consecutive pieces no longer than `len`.
std::vector<DatasetRecord> chunks(const DatasetRecord& r, int len) {
  std::vector<DatasetRecord> out;
  const auto t = static_cast<long>(r.frames());
  for (long s = 0; s < t; s += len) {
    const long n = std::min<long>(len, t - s);
    DatasetRecord c;
    c.id = r.id;
    c.show_id = r.show_id;
    c.frame_rate = r.frame_rate;
    c.features.kind = r.features.kind;
    c.features.data = r.features.data.middleRows(s, n);
    c.tokens.assign(r.tokens.begin() + s, r.tokens.begin() + s + n);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

MaskedFeatures make_mask(const Matrix& features, const MaskSpec& spec, std::mt19937_64& rng) {
  const Eigen::Index t = features.rows();
  if (t == 0) throw UsageError("cannot mask an empty sequence");
  if (!(spec.ratio_percent > 0.0 && spec.ratio_percent < 100.0))
    throw UsageError("mask ratio must lie strictly between 0 and 100 percent");
  const auto count = static_cast<std::size_t>(std::lround(spec.ratio_percent / 100.0 * static_cast<double>(t)));

  std::vector<int> order(static_cast<std::size_t>(t));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskedFeatures out;
  out.positions.assign(order.begin(), order.begin() + static_cast<long>(count));
  std::sort(out.positions.begin(), out.positions.end());

  const RowVector mu = features.colwise().mean();
  const RowVector sigma = ((features.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(t)).sqrt();
  out.masked = features;
  for (int r : out.positions) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
      if (sigma(c) > 0.0) {
        out.masked(r, c) = std::normal_distribution<double>(mu(c), sigma(c))(rng);
      } else {
        out.masked(r, c) = mu(c);
      }
    }
  }
  return out;
}

nlohmann::json AdamWConfig::to_json() const {
  return {{"lr", lr},   {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"weight_decay", weight_decay},
          {"clip_norm", clip_norm}};
}

AdamWConfig AdamWConfig::from_json(const nlohmann::json& j) {
  AdamWConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  if (!(c.lr > 0.0) || c.eps <= 0.0 || c.weight_decay < 0.0) throw UsageError("invalid optimizer settings");
  return c;
}

double global_norm(const std::map<std::string, Matrix>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void AdamW::step(const std::map<std::string, Matrix*>& params, std::map<std::string, Matrix> grads) {
  if (config_.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > config_.clip_norm) scale_grads(grads, config_.clip_norm / norm);
  }
  for (auto& [name, g] : grads) {
    Matrix& p = *params.at(name);
    Slot& s = slots_[name];
    if (s.t == 0) {
      s.m = Matrix::Zero(p.rows(), p.cols());
      s.v = Matrix::Zero(p.rows(), p.cols());
    }
    ++s.t;
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * g;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.t));
    p *= 1.0 - config_.lr * config_.weight_decay;
    p.array() -= config_.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + config_.eps);
  }
}

void AdamW::export_state(const std::string& prefix, std::map<std::string, Matrix>& out) const {
  for (const auto& [name, s] : slots_) {
    out[prefix + ".m." + name] = s.m;
    out[prefix + ".v." + name] = s.v;
    out[prefix + ".t." + name] = Matrix::Constant(1, 1, static_cast<double>(s.t));
  }
}

void AdamW::import_state(const std::string& prefix, const std::map<std::string, Matrix>& in) {
  slots_.clear();
  const std::string tag = prefix + ".t.";
  for (const auto& [key, m] : in) {
    if (key.rfind(tag, 0) != 0) continue;
    const std::string name = key.substr(tag.size());
    Slot s;
    s.t = static_cast<long>(m(0, 0));
    try {
      s.m = in.at(prefix + ".m." + name);
      s.v = in.at(prefix + ".v." + name);
    } catch (const std::out_of_range&) {
      throw DataError("optimizer state for " + name + " is incomplete");
    }
    slots_.emplace(name, std::move(s));
  }
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"alpha1", alpha1}, {"alpha2", alpha2},          {"alpha3", alpha3}, {"mask_percent", mask.ratio_percent},
          {"batch", batch},   {"epochs", epochs},          {"window", window}, {"optimizer", optimizer.to_json()}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.alpha1 = j.value("alpha1", c.alpha1);
  c.alpha2 = j.value("alpha2", c.alpha2);
  c.alpha3 = j.value("alpha3", c.alpha3);
  c.mask.ratio_percent = j.value("mask_percent", c.mask.ratio_percent);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.window = j.value("window", c.window);
  if (j.contains("optimizer")) c.optimizer = AdamWConfig::from_json(j.at("optimizer"));
  if (c.alpha1 < 0 || c.alpha2 < 0 || c.alpha3 < 0) throw UsageError("loss weights must be non-negative");
  if (c.batch < 1 || c.epochs < 0 || c.window < 1) throw UsageError("batch, epochs and window must be positive");
  return c;
}

nlohmann::json FinetuneConfig::to_json() const {
  nlohmann::json j = {{"batch", batch},
                      {"epochs", epochs},
                      {"window", window},
                      {"accuracy_floor", accuracy_floor},
                      {"optimizer", optimizer.to_json()}};
  if (lora) j["lora"] = {{"rank", lora->rank}, {"alpha", lora->alpha}};
  return j;
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.window = j.value("window", c.window);
  c.accuracy_floor = j.value("accuracy_floor", c.accuracy_floor);
  if (j.contains("optimizer")) c.optimizer = AdamWConfig::from_json(j.at("optimizer"));
  if (j.contains("lora") && !j.at("lora").is_null())
    c.lora = LoraConfig{j.at("lora").value("rank", 8), j.at("lora").value("alpha", 16.0)};
  if (c.batch < 1 || c.epochs < 0 || c.window < 1) throw UsageError("batch, epochs and window must be positive");
  if (!(c.accuracy_floor > 0.0)) throw UsageError("accuracy floor must be positive");
  return c;
}

nlohmann::json EpochStats::to_json() const {
  return {{"epoch", epoch},
          {"losses", losses},
          {"acc_hue", acc_hue},
          {"acc_value", acc_value},
          {"beta_hue", beta_hue},
          {"beta_value", beta_value}};
}

std::pair<double, double> adaptive_weights(std::optional<std::pair<double, double>> previous_acc, double floor) {
  if (!previous_acc) return {0.5, 0.5};
  const double inv_h = 1.0 / std::max(previous_acc->first, floor);
  const double inv_v = 1.0 / std::max(previous_acc->second, floor);
  return {inv_h / (inv_h + inv_v), inv_v / (inv_h + inv_v)};
}

PretrainLosses pretrain_loss(ForwardContext& ctx, const Matrix& features, const MaskedFeatures& mask,
                             const PretrainConfig& config) {
  ad::Tape& tape = ctx.tape();
  MlmOutput out = forward_mlm(ctx, tape.constant(mask.masked));
  PretrainLosses l;
  l.l1 = ad::mse(out.recovered, features);
  l.l2 = mask.positions.empty() ? tape.constant(Matrix::Zero(1, 1)) : ad::mse(out.recovered, features, mask.positions);
  const int real[] = {1};
  l.l3 = ad::cross_entropy(discriminate(ctx, out.recovered), real);
  l.total = ad::add(ad::add(ad::scale(l.l1, config.alpha1), ad::scale(l.l2, config.alpha2)),
                    ad::scale(l.l3, config.alpha3));
  return l;
}

ad::Var discriminator_loss(ForwardContext& ctx, const Matrix& features, const Matrix& recovered) {
  ad::Tape& tape = ctx.tape();
  const int fake[] = {0};
  const int real[] = {1};
  return ad::add(ad::cross_entropy(discriminate(ctx, tape.constant(recovered)), fake),
                 ad::cross_entropy(discriminate(ctx, tape.constant(features)), real));
}

ad::Var finetune_loss(ForwardContext& ctx, const Matrix& features, std::span<const LightToken> tokens,
                      double beta_hue, double beta_value) {
  LmOutput out = forward_lm(ctx, ctx.tape().constant(features), tokens);
  std::vector<int> hue(tokens.size()), value(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    hue[i] = tokens[i].hue;
    value[i] = tokens[i].value;
  }
  return ad::add(ad::scale(ad::cross_entropy(out.hue_logits, hue), beta_hue),
                 ad::scale(ad::cross_entropy(out.value_logits, value), beta_value));
}

std::map<std::string, double> pretrain_step(TrainState& state, std::span<const Matrix> batch,
                                            const PretrainConfig& config, std::uint64_t step_seed) {
  if (batch.empty()) throw UsageError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::map<std::string, double> losses{{"l1", 0}, {"l2", 0}, {"l3", 0}, {"L_pre", 0}, {"L_dis", 0}};

  std::vector<Matrix> recovered(batch.size());
  std::map<std::string, Matrix> grads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::mt19937_64 rng(derive_seed(step_seed, b, 1));
    const MaskedFeatures mask = make_mask(batch[b], config.mask, rng);
    ad::Tape tape;
    ForwardContext ctx(tape, state.config, state.params);
    ctx.training(derive_seed(step_seed, b, 2)).trainable([](const std::string& n) { return !is_disc(n); });
    PretrainLosses l = pretrain_loss(ctx, batch[b], mask, config);
    const std::map<std::string, double> one{
        {"l1", l.l1.scalar()}, {"l2", l.l2.scalar()}, {"l3", l.l3.scalar()}, {"L_pre", l.total.scalar()}};
    check_finite(one, "in pretraining (recoverer)");
    for (const auto& [k, v] : one) losses[k] += v * inv_b;
    tape.backward(l.total);
    add_grads(grads, tape.param_grads());

    // The recovered clip the discriminator sees, without dropout.
    ad::Tape eval(false);
    ForwardContext ectx(eval, state.config, state.params);
    recovered[b] = forward_mlm(ectx, eval.constant(mask.masked)).recovered.value();
  }
  scale_grads(grads, inv_b);
  const auto recoverer_targets = targets(state, grads);
  state.recoverer.step(recoverer_targets, std::move(grads));

  grads.clear();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape tape;
    ForwardContext ctx(tape, state.config, state.params);
    ctx.training(derive_seed(step_seed, b, 3)).trainable(is_disc);
    ad::Var l = discriminator_loss(ctx, batch[b], recovered[b]);
    check_finite({{"L_dis", l.scalar()}}, "in pretraining (discriminator)");
    losses["L_dis"] += l.scalar() * inv_b;
    tape.backward(l);
    add_grads(grads, tape.param_grads());
  }
  scale_grads(grads, inv_b);
  const auto discriminator_targets = targets(state, grads);
  state.discriminator.step(discriminator_targets, std::move(grads));
  return losses;
}

std::map<std::string, double> finetune_step(TrainState& state, std::span<const DatasetRecord> batch,
                                            double beta_hue, double beta_value, std::uint64_t step_seed) {
  if (batch.empty()) throw UsageError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const LoraSet* adapters = state.adapters ? &*state.adapters : nullptr;
  double total = 0.0;
  std::map<std::string, Matrix> grads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape tape;
    ForwardContext ctx(tape, state.config, state.params);
    ctx.with_adapters(adapters).training(derive_seed(step_seed, b, 4));
    if (adapters) ctx.trainable([adapters](const std::string& n) { return adapters->count(n) == 0; });
    ad::Var l = finetune_loss(ctx, batch[b].features.data, batch[b].tokens, beta_hue, beta_value);
    check_finite({{"L_stf", l.scalar()}}, "in fine-tuning");
    total += l.scalar() * inv_b;
    tape.backward(l);
    add_grads(grads, tape.param_grads());
  }
  scale_grads(grads, inv_b);
  const auto recoverer_targets = targets(state, grads);
  state.recoverer.step(recoverer_targets, std::move(grads));
  return {{"L_stf", total}};
}

std::pair<double, double> evaluate(const ModelConfig& config, const ModelParameters& params,
                                   std::span<const DatasetRecord> records, const LoraSet* adapters) {
  std::size_t hits_h = 0, hits_v = 0, n = 0;
  for (const auto& record : records) {
    for (const auto& c : chunks(record, config.max_len)) {
      const LmLogits out = lm_logits(config, params, c.features.data, c.tokens, adapters);
      const auto h = argmax_rows(out.hue);
      const auto v = argmax_rows(out.value);
      for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        hits_h += h[i] == c.tokens[i].hue;
        hits_v += v[i] == c.tokens[i].value;
      }
      n += c.tokens.size();
    }
  }
  if (n == 0) return {0.0, 0.0};
  return {static_cast<double>(hits_h) / n, static_cast<double>(hits_v) / n};
}

double masked_recovery_mse(const ModelConfig& config, const ModelParameters& params,
                           std::span<const DatasetRecord> records, const MaskSpec& mask, std::uint64_t seed) {
  double sq = 0.0;
  std::size_t count = 0;
  std::size_t index = 0;
  for (const auto& record : records) {
    for (const auto& c : chunks(record, config.max_len)) {
      std::mt19937_64 rng(derive_seed(seed, index++, 5));
      const MaskedFeatures m = make_mask(c.features.data, mask, rng);
      ad::Tape tape(false);
      ForwardContext ctx(tape, config, params);
      const Matrix rec = forward_mlm(ctx, tape.constant(m.masked)).recovered.value();
      for (int r : m.positions) sq += (rec.row(r) - c.features.data.row(r)).squaredNorm();
      count += m.positions.size() * static_cast<std::size_t>(c.features.dim());
    }
  }
  return count ? sq / static_cast<double>(count) : 0.0;
}

Split split_dataset(const std::vector<DatasetRecord>& records, std::array<double, 3> ratios, std::uint64_t seed) {
  const double ratio_sum = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || !(ratio_sum > 0))
    throw UsageError("split ratios must be non-negative with a positive sum");

  std::vector<std::string> shows;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& m = members[records[i].show_id];
    if (m.empty()) shows.push_back(records[i].show_id);
    m.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(shows.begin(), shows.end(), rng);
  std::stable_sort(shows.begin(), shows.end(),
                   [&](const auto& a, const auto& b) { return members[a].size() > members[b].size(); });

  Split split;
  std::array<std::vector<std::size_t>*, 3> parts{&split.train, &split.validation, &split.test};
  const auto total = static_cast<double>(records.size());
  for (const auto& show : shows) {
    int best = 0;
    double best_deficit = -1e300;
    for (int s = 0; s < 3; ++s) {
      const double deficit = ratios[s] / ratio_sum * total - static_cast<double>(parts[s]->size());
      if (deficit > best_deficit) best_deficit = deficit, best = s;
    }
    auto& m = members[show];
    parts[best]->insert(parts[best]->end(), m.begin(), m.end());
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  if (shows.size() == 1) split.warning = "only one show; every record is assigned to training";
  return split;
}

nlohmann::json RunConfig::to_json() const {
  return {{"phase", phase},
          {"model", model.to_json()},
          {"seed", seed},
          {"pretrain", pretrain.to_json()},
          {"finetune", finetune.to_json()},
          {"dataset", dataset.string()},
          {"checkpoint_dir", checkpoint_dir.string()},
          {"init_checkpoint", init_checkpoint.string()},
          {"resume", resume},
          {"log_train_accuracy", log_train_accuracy}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    RunConfig c;
    c.phase = j.value("phase", c.phase);
    if (c.phase != "pretrain" && c.phase != "finetune") throw UsageError("phase must be pretrain or finetune");
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.seed = j.value("seed", c.seed);
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("finetune")) c.finetune = FinetuneConfig::from_json(j.at("finetune"));
    c.dataset = j.value("dataset", std::string());
    c.checkpoint_dir = j.value("checkpoint_dir", std::string());
    c.init_checkpoint = j.value("init_checkpoint", std::string());
    c.resume = j.value("resume", false);
    c.log_train_accuracy = j.value("log_train_accuracy", false);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed run config: ") + e.what());
  }
}

namespace {

constexpr const char* kLog = "train_log.jsonl";

Checkpoint snapshot(const TrainState& state, bool merged) {
  Checkpoint c;
  c.config = state.config;
  c.params = merged && state.adapters ? lora_merge(state.params, *state.adapters) : state.params;
  return c;
}

void store_adapters(const LoraSet& adapters, std::map<std::string, Matrix>& extra) {
  for (const auto& [target, lora] : adapters) {
    extra[ForwardContext::adapter_name(target, 'A')] = lora.a;
    extra[ForwardContext::adapter_name(target, 'B')] = lora.b;
  }
}

void restore_adapters(LoraSet& adapters, const std::map<std::string, Matrix>& extra) {
  for (auto& [target, lora] : adapters) {
    auto a = extra.find(ForwardContext::adapter_name(target, 'A'));
    auto b = extra.find(ForwardContext::adapter_name(target, 'B'));
    if (a == extra.end() || b == extra.end()) throw DataError("resume checkpoint lacks adapter " + target);
    lora.a = a->second;
    lora.b = b->second;
  }
}

// Keeps the first `epochs` lines of an existing log.
void truncate_log(const std::filesystem::path& path, int epochs) {
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (static_cast<int>(keep.size()) < epochs && std::getline(in, line)) keep.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

std::vector<DatasetRecord> pick(const std::vector<DatasetRecord>& all, const std::vector<std::size_t>& idx) {
  std::vector<DatasetRecord> out;
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

TrainResult train(const RunConfig& run, const DatasetContainer& dataset) {
  const bool pretraining = run.phase == "pretrain";
  if (!pretraining && run.phase != "finetune") throw UsageError("phase must be pretrain or finetune");
  const auto& records = dataset.records;
  if (records.empty()) throw DataError("dataset has no records");
  for (const auto& r : records) validate_record(r);
  const auto feature_dim = static_cast<int>(records.front().features.dim());
  for (const auto& r : records)
    if (r.features.dim() != feature_dim) throw DataError("records disagree on feature dimension");

  const Split split = split_dataset(records, {8, 1, 1}, run.seed);
  const auto train_set = pick(records, split.train);
  const auto val_set = split.validation.empty() ? train_set : pick(records, split.validation);

  const int epochs = pretraining ? run.pretrain.epochs : run.finetune.epochs;
  const int batch = pretraining ? run.pretrain.batch : run.finetune.batch;
  const AdamWConfig& opt = pretraining ? run.pretrain.optimizer : run.finetune.optimizer;

  const std::filesystem::path dir = run.checkpoint_dir;
  const bool persist = !dir.empty();
  TrainState state{run.model, {}, AdamW(opt), AdamW(opt), std::nullopt};
  int start_epoch = 0;
  std::optional<std::pair<double, double>> prev_acc;
  double best_score = pretraining ? std::numeric_limits<double>::infinity() : -1.0;
  TrainResult result;

  if (run.resume) {
    if (!persist) throw UsageError("resume needs a checkpoint directory");
    Checkpoint last = load_checkpoint(dir / "last");
    state.config = last.config;
    state.params = std::move(last.params);
    state.recoverer.import_state("opt.recoverer", last.extra);
    state.discriminator.import_state("opt.discriminator", last.extra);
    start_epoch = last.metadata.at("epoch").get<int>();
    if (last.metadata.contains("prev_acc"))
      prev_acc = std::pair{last.metadata["prev_acc"][0].get<double>(), last.metadata["prev_acc"][1].get<double>()};
    best_score = last.metadata.value("best_score", best_score);
    if (!pretraining && run.finetune.lora) {
      state.adapters = make_lora_adapters(state.params, run.finetune.lora->rank, run.finetune.lora->alpha, 0);
      restore_adapters(*state.adapters, last.extra);
    }
    if (std::filesystem::exists(dir / "best" / "manifest.json")) result.best = load_checkpoint(dir / "best");
  } else {
    if (!run.init_checkpoint.empty()) {
      Checkpoint init = load_checkpoint(run.init_checkpoint);
      state.config = init.config;
      state.params = std::move(init.params);
    } else {
      state.config.feature_dim = feature_dim;
      state.config.validate();
      state.params = init_parameters(state.config);
    }
    if (!pretraining && run.finetune.lora)
      state.adapters = make_lora_adapters(state.params, run.finetune.lora->rank, run.finetune.lora->alpha,
                                          derive_seed(run.seed, 0x10A));
  }
  if (state.config.feature_dim != feature_dim)
    throw DataError("dataset feature dimension " + std::to_string(feature_dim) + " does not match the model (" +
                    std::to_string(state.config.feature_dim) + ")");

  if (persist) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "run_config.json") << run.to_json().dump(2) << '\n';
    truncate_log(dir / kLog, start_epoch);
  }
  const int window = std::min(pretraining ? run.pretrain.window : run.finetune.window, state.config.max_len);

  for (int epoch = start_epoch + 1; epoch <= epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(run.seed, static_cast<std::uint64_t>(epoch), 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochStats stats;
    stats.epoch = epoch;
    std::tie(stats.beta_hue, stats.beta_value) = adaptive_weights(prev_acc, run.finetune.accuracy_floor);
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      std::vector<DatasetRecord> windows;
      for (std::size_t i = start; i < end; ++i)
        windows.push_back(window_sample(train_set[order[i]], window,
                                        derive_seed(run.seed, static_cast<std::uint64_t>(epoch), 100 + order[i])));
      const std::uint64_t step_seed = derive_seed(run.seed, static_cast<std::uint64_t>(epoch), 1u << 20 | steps);
      std::map<std::string, double> step_losses;
      try {
        if (pretraining) {
          std::vector<Matrix> feats;
          for (const auto& w : windows) feats.push_back(w.features.data);
          step_losses = pretrain_step(state, feats, run.pretrain, step_seed);
        } else {
          step_losses = finetune_step(state, windows, stats.beta_hue, stats.beta_value, step_seed);
        }
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(steps) + ")");
      }
      for (const auto& [k, v] : step_losses) stats.losses[k] += v;
      ++steps;
    }
    for (auto& [k, v] : stats.losses) v /= steps;

    const LoraSet* adapters = state.adapters ? &*state.adapters : nullptr;
    double score;
    if (pretraining) {
      score = masked_recovery_mse(state.config, state.params, val_set, run.pretrain.mask, derive_seed(run.seed, 7));
      stats.losses["val_masked_mse"] = score;
    } else {
      std::tie(stats.acc_hue, stats.acc_value) = evaluate(state.config, state.params, val_set, adapters);
      prev_acc = std::pair{stats.acc_hue, stats.acc_value};
      score = stats.acc_hue + stats.acc_value;
    }
    if (run.log_train_accuracy) {
      const auto [h, v] = evaluate(state.config, state.params, train_set, adapters);
      stats.losses["train_acc_hue"] = h;
      stats.losses["train_acc_value"] = v;
    }

    const bool improved = pretraining ? score < best_score : score > best_score;
    if (improved) {
      best_score = score;
      result.best = snapshot(state, true);
      result.best.metadata = {{"epoch", epoch}, {"phase", run.phase}, {"score", score}};
      if (persist) save_checkpoint(dir / "best", result.best);
    }

    result.last = snapshot(state, false);
    state.recoverer.export_state("opt.recoverer", result.last.extra);
    state.discriminator.export_state("opt.discriminator", result.last.extra);
    if (state.adapters) store_adapters(*state.adapters, result.last.extra);
    result.last.metadata = {{"epoch", epoch}, {"phase", run.phase}};
    if (std::isfinite(best_score)) result.last.metadata["best_score"] = best_score;
    if (prev_acc) result.last.metadata["prev_acc"] = {prev_acc->first, prev_acc->second};
    if (persist) {
      save_checkpoint(dir / "last", result.last, Precision::Float64);
      std::ofstream(dir / kLog, std::ios::app) << stats.to_json().dump() << '\n';
    }
    result.history.push_back(std::move(stats));
  }
  return result;
}

}  // namespace skiplight
