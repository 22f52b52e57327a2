#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "skiplight/audio.hpp"
#include "skiplight/features.hpp"

using namespace skiplight;

namespace {

constexpr double kPi = std::numbers::pi;

AudioClip sine(double hz, int rate, std::size_t n, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(amp * std::sin(2 * kPi * hz * i / rate));
  return c;
}

AudioClip noise(int rate, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  AudioClip c;
  c.sample_rate = rate;
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(u(rng));
  return c;
}

FeatureConfig small_config() {
  FeatureConfig c;
  c.fft_size = 256;
  c.mel_bands = 20;
  c.mfcc_coeffs = 13;
  return c;
}

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

// Direct DFT of frame t with the same centring, padding and window.
std::vector<std::complex<double>> naive_frame(const AudioClip& clip, std::size_t t, int hop, int n) {
  const long len = static_cast<long>(clip.samples.size());
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) {
    long idx = static_cast<long>(t) * hop - n / 2 + i;
    while (idx < 0 || idx >= len) idx = idx < 0 ? -idx : 2 * (len - 1) - idx;
    x[i] = clip.samples[idx] * (0.5 - 0.5 * std::cos(2 * kPi * i / n));
  }
  std::vector<std::complex<double>> out(n / 2 + 1);
  for (int k = 0; k <= n / 2; ++k)
    for (int i = 0; i < n; ++i) out[k] += x[i] * std::polar(1.0, -2 * kPi * k * i / n);
  return out;
}

}  // namespace

TEST(Wav, SilenceAndFullScale) {
  AudioClip silent;
  silent.sample_rate = 16000;
  silent.samples.assign(16000, 0.0);
  save_wav(temp("sl_silence.wav"), silent);
  const AudioClip back = load_wav(temp("sl_silence.wav"));
  EXPECT_EQ(back.sample_rate, 16000);
  ASSERT_EQ(back.samples.size(), 16000u);
  for (double s : back.samples) EXPECT_EQ(s, 0.0);

  AudioClip full;
  full.sample_rate = 8000;
  full.samples = {32767.0 / 32768.0};
  save_wav(temp("sl_full.wav"), full);
  EXPECT_NEAR(load_wav(temp("sl_full.wav")).samples[0], 0.99997, 1e-5);
}

TEST(Wav, RoundTripBothEncodings) {
  AudioClip c = noise(22050, 1000, 1);
  c.channels = 2;
  save_wav(temp("sl_f32.wav"), c, WavEncoding::Float32);
  const AudioClip f = load_wav(temp("sl_f32.wav"));
  EXPECT_EQ(f.channels, 2);
  for (std::size_t i = 0; i < c.samples.size(); ++i) EXPECT_EQ(f.samples[i], static_cast<float>(c.samples[i]));
  save_wav(temp("sl_pcm.wav"), f);
  const AudioClip p = load_wav(temp("sl_pcm.wav"));
  save_wav(temp("sl_pcm2.wav"), p);
  EXPECT_EQ(load_wav(temp("sl_pcm2.wav")).samples, p.samples);
}

TEST(Wav, RejectsGarbage) {
  std::ofstream(temp("sl_bad.wav")) << "RIFF1234WAVEnonsense";
  EXPECT_THROW(load_wav(temp("sl_bad.wav")), DataError);
  EXPECT_THROW(load_wav(temp("sl_missing_file.wav")), DataError);
}

TEST(ToMono, MeansChannels) {
  AudioClip m = noise(100, 10, 2);
  EXPECT_EQ(to_mono(m).samples, m.samples);
  AudioClip st;
  st.sample_rate = 100;
  st.channels = 2;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<double> expect;
  for (int i = 0; i < 50; ++i) {
    const double a = n(rng), b = n(rng);
    st.samples.push_back(a);
    st.samples.push_back(b);
    expect.push_back((a + b) / 2);
  }
  const AudioClip mono = to_mono(st);
  for (int i = 0; i < 50; ++i) EXPECT_DOUBLE_EQ(mono.samples[i], expect[i]);
  for (std::size_t i = 0; i < st.samples.size(); i += 2) st.samples[i + 1] = -st.samples[i];
  for (double s : to_mono(st).samples) EXPECT_EQ(s, 0.0);
}

TEST(Stft, FrameCountAndZeros) {
  AudioClip z;
  z.sample_rate = 1000;
  z.samples.assign(1050, 0.0);
  const ComplexMatrix s = stft(z, small_config());
  EXPECT_EQ(s.rows(), 11);  // ceil(1050/100)
  EXPECT_EQ(s.cols(), 129);
  EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Stft, MatchesDirectDftAndPeaks) {
  const FeatureConfig config = small_config();
  const double bin_hz = 1000.0 / config.fft_size;
  const AudioClip c = sine(20 * bin_hz, 1000, 2000);
  const ComplexMatrix s = stft(c, config);
  for (std::size_t t : {0u, 7u, 19u}) {
    const auto ref = naive_frame(c, t, 100, config.fft_size);
    for (int k = 0; k <= config.fft_size / 2; ++k) EXPECT_LT(std::abs(s(t, k) - ref[k]), 1e-9);
    Eigen::Index peak;
    s.row(t).cwiseAbs().maxCoeff(&peak);
    if (t == 7) {
      EXPECT_EQ(peak, 20);
    }
  }
}

TEST(Stft, ParsevalAndLinearity) {
  const FeatureConfig config = small_config();
  const AudioClip c = noise(1000, 1500, 4);
  const ComplexMatrix s = stft(c, config);
  const int n = config.fft_size;
  for (Eigen::Index t = 3; t < 6; ++t) {
    double time_energy = 0.0;
    long start = t * 100 - n / 2;
    for (int i = 0; i < n; ++i) {
      const double w = 0.5 - 0.5 * std::cos(2 * kPi * i / n);
      time_energy += std::pow(c.samples[start + i] * w, 2);
    }
    double freq_energy = std::norm(s(t, 0)) + std::norm(s(t, n / 2));
    for (int k = 1; k < n / 2; ++k) freq_energy += 2 * std::norm(s(t, k));
    EXPECT_NEAR(freq_energy / n, time_energy, 1e-6 * time_energy);
  }
  AudioClip scaled = c;
  for (double& x : scaled.samples) x *= -3.0;
  const Matrix a = stft(scaled, config).cwiseAbs(), b = stft(c, config).cwiseAbs();
  EXPECT_LT((a - 3.0 * b).cwiseAbs().maxCoeff(), 1e-9 * b.maxCoeff());
}

TEST(Stft, RejectsShortClipAndBadRates) {
  AudioClip c = sine(10, 1000, 50);
  EXPECT_THROW(stft(c, small_config()), DataError);
  c.sample_rate = 1001;
  c.samples.resize(5000);
  EXPECT_THROW(stft(c, small_config()), UsageError);
}

TEST(MelFilterbank, UnitPeaksAndDenseOracle) {
  const Matrix fb = mel_filterbank(16000, 512, 40, 0, 0);
  ASSERT_EQ(fb.rows(), 40);
  ASSERT_EQ(fb.cols(), 257);
  for (int m = 0; m < 40; ++m) EXPECT_DOUBLE_EQ(fb.row(m).maxCoeff(), 1.0);
  EXPECT_GE(fb.minCoeff(), 0.0);

  FeatureConfig config = small_config();
  const AudioClip c = noise(1000, 3000, 5);
  const Matrix power = stft(c, config).cwiseAbs2();
  const Matrix dense = mel_filterbank(1000, config.fft_size, config.mel_bands, 0, 0);
  const FeatureMatrix mel = mel_spectrogram(c, config);
  for (Eigen::Index t = 0; t < power.rows(); ++t)
    for (int m = 0; m < config.mel_bands; ++m) {
      double e = 0.0;
      for (Eigen::Index k = 0; k < power.cols(); ++k) e += power(t, k) * dense(m, k);
      EXPECT_NEAR(mel.data(t, m), e, 1e-9 * (1 + e));
    }
}

TEST(LogMel, DecibelBehaviour) {
  Matrix p(1, 3);
  p << 1.0, 10.0, 100.0;
  const Matrix db = power_to_db(p);
  EXPECT_NEAR(db(0, 1) - db(0, 0), 10.0, 1e-12);
  EXPECT_NEAR(db(0, 2), 0.0, 1e-12);
  // Silence sits on the floor, which is the reference level.
  AudioClip z;
  z.sample_rate = 1000;
  z.samples.assign(500, 0.0);
  const FeatureMatrix lm = log_mel(z, small_config());
  EXPECT_EQ(lm.data.cwiseAbs().maxCoeff(), 0.0);
  // Monotone in power.
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  Matrix q(1, 50);
  for (int i = 0; i < 50; ++i) q(0, i) = u(rng);
  const Matrix qd = power_to_db(q);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 50; ++j)
      if (q(0, i) < q(0, j)) {
        EXPECT_LT(qd(0, i), qd(0, j));
      }
}

TEST(Mfcc, DctProperties) {
  const Matrix q = dct_matrix(32);
  EXPECT_LT((q.transpose() * q - Matrix::Identity(32, 32)).cwiseAbs().maxCoeff(), 1e-10);
  RowVector constant = RowVector::Constant(32, 2.5);
  const RowVector c = constant * q.transpose();
  EXPECT_GT(std::abs(c(0)), 1.0);
  for (int k = 1; k < 32; ++k) EXPECT_LT(std::abs(c(k)), 1e-12);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  RowVector v(32);
  for (int i = 0; i < 32; ++i) v(i) = n(rng);
  const RowVector fast = v * q.transpose();
  for (int k = 0; k < 32; ++k) {
    double s = 0.0;
    for (int i = 0; i < 32; ++i) s += v(i) * std::cos(kPi * k * (2 * i + 1) / 64.0);
    s *= k == 0 ? std::sqrt(1.0 / 32) : std::sqrt(2.0 / 32);
    EXPECT_NEAR(fast(k), s, 1e-12);
  }
  const FeatureConfig config = small_config();
  const FeatureMatrix m = mfcc(noise(1000, 1000, 8), config);
  EXPECT_EQ(m.dim(), config.mfcc_coeffs);
}

TEST(Chroma, PitchClasses) {
  EXPECT_EQ(pitch_class(440.0), 9);
  EXPECT_EQ(pitch_class(880.0), 9);
  EXPECT_EQ(pitch_class(261.63), 0);
  FeatureConfig config = default_feature_config(16000);
  AudioClip a = sine(440, 16000, 16000);
  const FeatureMatrix ch = chroma_stft(a, config);
  ASSERT_EQ(ch.dim(), 12);
  Eigen::Index best;
  ch.data.row(5).maxCoeff(&best);
  EXPECT_EQ(best, 9);
  AudioClip octave = sine(880, 16000, 16000);
  for (std::size_t i = 0; i < octave.samples.size(); ++i) octave.samples[i] += a.samples[i];
  chroma_stft(octave, config).data.row(5).maxCoeff(&best);
  EXPECT_EQ(best, 9);
  AudioClip z;
  z.sample_rate = 16000;
  z.samples.assign(16000, 0.0);
  EXPECT_EQ(chroma_stft(z, config).data.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SpectralStats, CentroidAndZcr) {
  const FeatureConfig config = default_feature_config(16000);
  const SpectralStats s = spectral_stats(sine(1000, 16000, 16000), config);
  EXPECT_NEAR(s.centroid.data(5, 0), 1000.0, 16000.0 / config.fft_size);
  AudioClip dc;
  dc.sample_rate = 16000;
  dc.samples.assign(16000, 0.25);
  EXPECT_EQ(spectral_stats(dc, config).zcr.data.maxCoeff(), 0.0);
  AudioClip alt = dc;
  for (std::size_t i = 0; i < alt.samples.size(); ++i) alt.samples[i] = i % 2 ? -1.0 : 1.0;
  EXPECT_DOUBLE_EQ(spectral_stats(alt, config).zcr.data(4, 0), 1.0);
  EXPECT_EQ(s.contrast.dim(), 7);
  EXPECT_TRUE(s.rolloff.data.allFinite());
}

TEST(DefaultFeatures, ShapeAndDelegation) {
  const AudioClip c = noise(16000, 160000, 9);
  const FeatureMatrix f = extract_default_features(c);
  EXPECT_EQ(f.frames(), 100);
  EXPECT_EQ(f.dim(), 128);
  const FeatureMatrix direct = log_mel(c, default_feature_config(16000));
  EXPECT_EQ(f.data, direct.data);
  EXPECT_TRUE(f.data.allFinite());
}

TEST(DefaultFeatures, FftGrowsForLowFrameRates) {
  EXPECT_EQ(default_feature_config(16000).fft_size, 2048);
  EXPECT_EQ(default_feature_config(44100).fft_size, 8192);
}

TEST(FeatureDump, RoundTrip) {
  FeatureMatrix f;
  f.data = Matrix::Random(7, 3);
  f.kind = "external";
  write_feature_dump(temp("sl_dump.bin"), f);
  const FeatureMatrix g = read_feature_dump(temp("sl_dump.bin"));
  EXPECT_EQ(g.kind, "external");
  EXPECT_EQ(g.data, f.data.cast<float>().cast<double>());
}
