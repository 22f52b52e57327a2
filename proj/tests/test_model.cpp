#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "skiplight/inference.hpp"
#include "skiplight/model.hpp"

using namespace skiplight;

namespace {

ModelConfig small(int feature_dim = 6) {
  ModelConfig c = ModelConfig::tiny(feature_dim);
  c.d_model = 16;
  c.heads = 2;
  c.ffn_inner = 32;
  c.max_len = 64;
  c.seed = 4;
  return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<LightToken> random_tokens(int t, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> h(0, 179), v(0, 255);
  std::vector<LightToken> out;
  for (int i = 0; i < t; ++i) out.push_back({static_cast<std::uint8_t>(h(rng)), static_cast<std::uint8_t>(v(rng))});
  return out;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST(Config, PresetsAndJson) {
  const ModelConfig p = ModelConfig::full(128);
  EXPECT_EQ(p.d_model, 512);
  EXPECT_EQ(p.layers, 8);
  EXPECT_EQ(p.heads, 8);
  EXPECT_EQ(p.ffn_inner, 2048);
  EXPECT_EQ(p.max_len, 1024);
  const ModelConfig t = ModelConfig::tiny(16);
  EXPECT_EQ(t.d_model, 64);
  const ModelConfig back = ModelConfig::from_json(t.to_json());
  EXPECT_EQ(back.to_json(), t.to_json());
  ModelConfig bad = t;
  bad.heads = 5;
  EXPECT_THROW(bad.validate(), UsageError);
  EXPECT_EQ(skip_mode_from_string(to_string(SkipMode::SameFrame)), SkipMode::SameFrame);
  EXPECT_THROW(skip_mode_from_string("sideways"), UsageError);
}

TEST(Parameters, InitIsDeterministicAndComplete) {
  const ModelConfig c = small();
  const ModelParameters a = init_parameters(c), b = init_parameters(c);
  EXPECT_NO_THROW(validate_parameters(c, a));
  for (const auto& [name, m] : a.tensors) EXPECT_TRUE(bitwise_equal(m, b.at(name))) << name;
  EXPECT_EQ(a.tensors.size(), declare_parameters(c).size());
  EXPECT_EQ(a.at("heads.hue.bias").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(a.at("decoder.final_ln.gain").minCoeff(), 1.0);
  ModelParameters broken = a;
  broken.tensors.erase("heads.value.weight");
  EXPECT_THROW(validate_parameters(c, broken), DataError);
  broken = a;
  broken.at("music.fc1.weight")(0, 0) = std::nan("");
  EXPECT_THROW(validate_parameters(c, broken), DataError);
}

TEST(Parameters, UniformInitVariance) {
  ModelConfig c = small();
  c.d_model = 1024;
  c.ffn_inner = 1024;
  c.heads = 4;
  c.layers = 1;
  c.max_len = 4;
  const ModelParameters p = init_parameters(c);
  const Matrix& w = p.at("encoder.layers.0.ffn.fc2.weight");  // 1024 x 1024, fan_in 1024
  const double var = w.array().square().mean() - std::pow(w.mean(), 2);
  EXPECT_NEAR(var / (1.0 / (3 * 1024)), 1.0, 0.05);
}

TEST(MusicMlp, BiasOnlyAndFrameIndependent) {
  const ModelConfig c = small();
  ModelParameters p = init_parameters(c);
  p.at("music.fc1.weight").setZero();
  p.at("music.fc2.weight").setZero();
  p.at("music.fc2.bias").setConstant(0.25);
  std::mt19937_64 rng(1);
  ad::Tape tape(false);
  ForwardContext ctx(tape, c, p);
  const Matrix out = music_mlp(ctx, tape.constant(Matrix::Zero(5, c.feature_dim))).value();
  EXPECT_EQ(out.rows(), 5);
  EXPECT_EQ(out.cols(), c.d_model);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.25);
  EXPECT_EQ(out.minCoeff(), 0.25);

  const ModelParameters q = init_parameters(c);
  ForwardContext ctx2(tape, c, q);
  const Matrix x = random_matrix(6, c.feature_dim, rng);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Matrix xp(6, c.feature_dim);
  for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[i]);
  const Matrix y = music_mlp(ctx2, tape.constant(x)).value();
  const Matrix yp = music_mlp(ctx2, tape.constant(xp)).value();
  for (int i = 0; i < 6; ++i) EXPECT_TRUE(bitwise_equal(yp.row(i), y.row(perm[i])));
  EXPECT_THROW(music_mlp(ctx2, tape.constant(Matrix::Zero(2, 3))), UsageError);
}

TEST(LightEmbedding, TableLookup) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  ad::Tape tape(false);
  ForwardContext ctx(tape, c, p);
  const std::vector<LightToken> tokens{{0, 0}, {179, 255}, {0, 0}};
  const DecoderTokens d = shift_right(tokens);
  EXPECT_EQ(d.hue, (std::vector<int>{kHueBos, 0, 179}));
  EXPECT_EQ(d.value, (std::vector<int>{kValueBos, 0, 255}));
  const Matrix e = embed_light(ctx, d).value();
  EXPECT_TRUE(e.row(1).isApprox(p.at("light.hue").row(0) + p.at("light.value").row(0), 0));
  EXPECT_TRUE(e.row(0).isApprox(p.at("light.hue").row(kHueBos) + p.at("light.value").row(kValueBos), 0));
}

TEST(SkipPairing, IndexTables) {
  EXPECT_EQ(skip_pairing(4, SkipMode::PreviousFrame), (std::vector<int>{-1, -1, 0, 1}));
  EXPECT_EQ(skip_pairing(4, SkipMode::SameFrame), (std::vector<int>{-1, 0, 1, 2}));
  EXPECT_EQ(skip_pairing(4, SkipMode::None), (std::vector<int>{-1, -1, -1, -1}));
}

TEST(SkipCombine, AddsPairedMusicAndPositions) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(2);
  const Matrix light = random_matrix(5, c.d_model, rng), music = random_matrix(5, c.d_model, rng);
  for (SkipMode mode : {SkipMode::PreviousFrame, SkipMode::SameFrame, SkipMode::None}) {
    ModelConfig cm = c;
    cm.skip = mode;
    ad::Tape tape(false);
    ForwardContext ctx(tape, cm, p);
    const Matrix out = skip_combine(ctx, tape.constant(light), tape.constant(music)).value();
    const auto pair = skip_pairing(5, mode);
    for (int s = 0; s < 5; ++s) {
      RowVector expect = light.row(s) + p.at("pos.decoder").row(s);
      if (pair[s] >= 0) expect += music.row(pair[s]);
      EXPECT_LT((out.row(s) - expect).cwiseAbs().maxCoeff(), 1e-14);
    }
    // Zero music leaves light plus positions.
    const Matrix zero = skip_combine(ctx, tape.constant(light), tape.constant(Matrix::Zero(5, c.d_model))).value();
    EXPECT_TRUE(bitwise_equal(zero, light + p.at("pos.decoder").topRows(5)));
  }
}

TEST(Forward, ShapesDeterminismAndGuards) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(9, c.feature_dim, rng);
  const auto tokens = random_tokens(9, rng);
  const LmLogits a = lm_logits(c, p, x, tokens), b = lm_logits(c, p, x, tokens);
  EXPECT_EQ(a.hue.rows(), 9);
  EXPECT_EQ(a.hue.cols(), 180);
  EXPECT_EQ(a.value.cols(), 256);
  EXPECT_TRUE(bitwise_equal(a.hue, b.hue));
  EXPECT_THROW(lm_logits(c, p, x, std::span(tokens).first(8)), UsageError);
  EXPECT_THROW(lm_logits(c, p, Matrix(0, c.feature_dim), {}), UsageError);
  EXPECT_THROW(lm_logits(c, p, random_matrix(65, c.feature_dim, rng), random_tokens(65, rng)), UsageError);

  ad::Tape tape(false);
  ForwardContext ctx(tape, c, p);
  const MlmOutput m = forward_mlm(ctx, tape.constant(x));
  EXPECT_EQ(m.recovered.rows(), 9);
  EXPECT_EQ(m.recovered.cols(), c.feature_dim);
  const Matrix d = discriminate(ctx, tape.constant(x)).value();
  EXPECT_EQ(d.rows(), 1);
  EXPECT_EQ(d.cols(), 2);
}

TEST(Forward, DropoutOnlyInTraining) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(5, c.feature_dim, rng);
  ad::Tape tape(false);
  ForwardContext eval(tape, c, p), train1(tape, c, p), train2(tape, c, p);
  train1.training(7);
  train2.training(7);
  const Matrix e = forward_mlm(eval, tape.constant(x)).recovered.value();
  const Matrix t1 = forward_mlm(train1, tape.constant(x)).recovered.value();
  const Matrix t2 = forward_mlm(train2, tape.constant(x)).recovered.value();
  EXPECT_FALSE(bitwise_equal(e, t1));
  EXPECT_TRUE(bitwise_equal(t1, t2));
}

TEST(Decoder, CausalInDecoderInputs) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(5);
  const Matrix memory = random_matrix(7, c.d_model, rng);
  const Matrix in = random_matrix(7, c.d_model, rng);
  for (int t = 0; t < 6; ++t) {
    Matrix changed = in;
    changed.bottomRows(6 - t) = random_matrix(6 - t, c.d_model, rng);
    ad::Tape tape(false);
    ForwardContext ctx(tape, c, p);
    const Matrix h1 = decode(ctx, tape.constant(in), tape.constant(memory)).value();
    const Matrix h2 = decode(ctx, tape.constant(changed), tape.constant(memory)).value();
    EXPECT_TRUE(bitwise_equal(h1.topRows(t + 1), h2.topRows(t + 1))) << t;
  }
}

TEST(Decoder, PredictionsIgnoreFutureTokens) {
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(6);
  const Matrix x = random_matrix(10, c.feature_dim, rng);
  const auto tokens = random_tokens(10, rng);
  const LmLogits base = lm_logits(c, p, x, tokens);
  for (int t = 0; t < 10; ++t) {
    auto other = tokens;
    const auto fresh = random_tokens(10, rng);
    for (int i = t; i < 10; ++i) other[i] = fresh[i];
    const LmLogits out = lm_logits(c, p, x, other);
    EXPECT_TRUE(bitwise_equal(out.hue.topRows(t + 1), base.hue.topRows(t + 1)));
    EXPECT_TRUE(bitwise_equal(out.value.topRows(t + 1), base.value.topRows(t + 1)));
  }
}

TEST(Decoder, IncrementalMatchesTeacherForced) {
  for (SkipMode mode : {SkipMode::PreviousFrame, SkipMode::SameFrame, SkipMode::None}) {
    ModelConfig c = small();
    c.skip = mode;
    const ModelParameters p = init_parameters(c);
    std::mt19937_64 rng(7);
    const Matrix x = random_matrix(12, c.feature_dim, rng);
    const auto tokens = random_tokens(12, rng);
    const LmLogits full = lm_logits(c, p, x, tokens);
    const LmLogits step = incremental_logits(c, p, x, tokens);
    EXPECT_LT((full.hue - step.hue).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((full.value - step.value).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Discriminator, HeadIsInvariantToFrameOrderOfPooledStates) {
  // Mean pooling makes the head see a set: permuting the trunk states leaves
  // the logits unchanged.
  const ModelConfig c = small();
  const ModelParameters p = init_parameters(c);
  std::mt19937_64 rng(8);
  const Matrix hidden = random_matrix(8, c.d_model, rng);
  Matrix permuted = hidden;
  std::vector<int> order{7, 2, 5, 0, 6, 1, 3, 4};
  for (int i = 0; i < 8; ++i) permuted.row(i) = hidden.row(order[i]);
  ad::Tape tape(false);
  ForwardContext ctx(tape, c, p);
  auto head = [&](const Matrix& h) {
    return ctx.linear("heads.disc.fc2", ad::gelu(ctx.linear("heads.disc.fc1", ad::mean_rows(tape.constant(h)))))
        .value();
  };
  EXPECT_LT((head(hidden) - head(permuted)).cwiseAbs().maxCoeff(), 1e-14);
}
