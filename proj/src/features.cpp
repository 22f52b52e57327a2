#include "skiplight/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iterator>
#include <numbers>
#include <unsupported/Eigen/FFT>
#include <vector>

#include "json.hpp"
#include "skiplight/detail/little_endian.hpp"

namespace skiplight {

namespace {

constexpr double kPowerFloor = 1e-10;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t reflect_index(long idx, std::size_t len) {
  if (len == 1) return 0;
  const long n = static_cast<long>(len);
  const long period = 2 * (n - 1);
  idx %= period;
  if (idx < 0) idx += period;
  return static_cast<std::size_t>(idx < n ? idx : period - idx);
}

void require_mono(const AudioClip& clip) {
  if (clip.channels != 1) throw UsageError("feature extraction expects a mono clip");
  if (clip.sample_rate <= 0) throw UsageError("clip sample rate must be positive");
}

std::size_t frame_count(const AudioClip& clip, int hop) {
  if (clip.samples.size() < static_cast<std::size_t>(hop))
    throw DataError("clip is shorter than one hop (" + std::to_string(hop) + " samples)");
  return (clip.samples.size() + hop - 1) / hop;
}

// Samples of centred frame t (reflect padded), unwindowed.
void centred_frame(const AudioClip& clip, std::size_t t, int hop, int n, std::vector<double>& out) {
  out.resize(n);
  const long start = static_cast<long>(t) * hop - n / 2;
  for (int i = 0; i < n; ++i) out[i] = clip.samples[reflect_index(start + i, clip.samples.size())];
}

Matrix power_spectrum(const AudioClip& clip, const FeatureConfig& config) {
  return stft(clip, config).cwiseAbs2();
}

FeatureMatrix make_features(Matrix data, const FeatureConfig& config, std::string kind) {
  FeatureMatrix fm;
  fm.data = std::move(data);
  fm.frame_rate = config.frame_rate;
  fm.kind = std::move(kind);
  return fm;
}

}  // namespace

int FeatureConfig::hop(int sample_rate) const {
  if (frame_rate <= 0) throw UsageError("frame rate must be positive");
  if (sample_rate % frame_rate != 0)
    throw UsageError("sample rate " + std::to_string(sample_rate) + " is not a multiple of the frame rate " +
                     std::to_string(frame_rate));
  return sample_rate / frame_rate;
}

void FeatureConfig::validate(int sample_rate) const {
  const int h = hop(sample_rate);
  if (h < 1) throw UsageError("hop must be at least one sample");
  if (fft_size < h) throw UsageError("fft_size must be at least one hop");
  if (mel_bands < 1 || mel_bands > fft_size / 2 + 1) throw UsageError("mel_bands out of range");
  if (mfcc_coeffs < 1 || mfcc_coeffs > mel_bands) throw UsageError("mfcc_coeffs must be in [1, mel_bands]");
  if (!(rolloff_fraction > 0.0 && rolloff_fraction <= 1.0)) throw UsageError("rolloff_fraction must be in (0,1]");
  if (contrast_bands < 2) throw UsageError("contrast_bands must be at least 2");
}

FeatureConfig default_feature_config(int sample_rate) {
  FeatureConfig config;
  const int h = config.hop(sample_rate);
  while (config.fft_size < h) config.fft_size *= 2;
  return config;
}

ComplexMatrix stft(const AudioClip& clip, const FeatureConfig& config) {
  require_mono(clip);
  config.validate(clip.sample_rate);
  const int hop = config.hop(clip.sample_rate);
  const int n = config.fft_size;
  const std::size_t frames = frame_count(clip, hop);
  const int bins = n / 2 + 1;

  std::vector<double> window(n);
  for (int i = 0; i < n; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);  // periodic Hann

  Eigen::FFT<double> fft;
  std::vector<double> frame;
  std::vector<std::complex<double>> spectrum;
  ComplexMatrix out(static_cast<Eigen::Index>(frames), bins);
  for (std::size_t t = 0; t < frames; ++t) {
    centred_frame(clip, t, hop, n, frame);
    for (int i = 0; i < n; ++i) frame[i] *= window[i];
    fft.fwd(spectrum, frame);
    for (int k = 0; k < bins; ++k) out(static_cast<Eigen::Index>(t), k) = spectrum[k];
  }
  return out;
}

Matrix mel_filterbank(int sample_rate, int fft_size, int bands, double fmin, double fmax) {
  if (fmax <= 0.0) fmax = sample_rate / 2.0;
  if (fmin < 0.0 || fmin >= fmax) throw UsageError("invalid mel frequency range");
  const int bins = fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> edges(bands + 2);
  for (int i = 0; i < bands + 2; ++i) edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (bands + 1));

  Matrix fb = Matrix::Zero(bands, bins);
  const double bin_hz = static_cast<double>(sample_rate) / fft_size;
  for (int m = 0; m < bands; ++m) {
    const double lo = edges[m], centre = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      const double w = std::min((f - lo) / (centre - lo), (hi - f) / (hi - centre));
      if (w > 0.0) fb(m, k) = w;
    }
    const double peak = fb.row(m).maxCoeff();
    if (peak > 0.0) {
      fb.row(m) /= peak;
    } else {
      // Filter narrower than a bin: put it on the nearest bin.
      const int k = std::clamp(static_cast<int>(std::lround(centre / bin_hz)), 0, bins - 1);
      fb(m, k) = 1.0;
    }
  }
  return fb;
}

Matrix dct_matrix(int n) {
  Matrix q(n, n);
  for (int k = 0; k < n; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i) q(k, i) = scale * std::cos(std::numbers::pi * k * (2 * i + 1) / (2.0 * n));
  }
  return q;
}

FeatureMatrix mel_spectrogram(const AudioClip& clip, const FeatureConfig& config) {
  const Matrix power = power_spectrum(clip, config);
  const Matrix fb = mel_filterbank(clip.sample_rate, config.fft_size, config.mel_bands, config.fmin, config.fmax);
  return make_features(power * fb.transpose(), config, "mel");
}

Matrix power_to_db(const Matrix& power) {
  const double ref = 10.0 * std::log10(std::max(power.size() ? power.maxCoeff() : 0.0, kPowerFloor));
  return power.unaryExpr([ref](double p) { return 10.0 * std::log10(std::max(p, kPowerFloor)) - ref; });
}

FeatureMatrix log_mel(const AudioClip& clip, const FeatureConfig& config) {
  FeatureMatrix mel = mel_spectrogram(clip, config);
  return make_features(power_to_db(mel.data), config, "log_mel");
}

FeatureMatrix mfcc(const AudioClip& clip, const FeatureConfig& config) {
  const FeatureMatrix lm = log_mel(clip, config);
  const Matrix q = dct_matrix(config.mel_bands).topRows(config.mfcc_coeffs);
  return make_features(lm.data * q.transpose(), config, "mfcc");
}

int pitch_class(double frequency_hz) {
  const long semis = std::lround(12.0 * std::log2(frequency_hz / 440.0));
  return static_cast<int>(((semis + 9) % 12 + 12) % 12);
}

FeatureMatrix chroma_stft(const AudioClip& clip, const FeatureConfig& config) {
  const Matrix power = power_spectrum(clip, config);
  const double bin_hz = static_cast<double>(clip.sample_rate) / config.fft_size;
  Matrix fold = Matrix::Zero(power.cols(), 12);
  for (Eigen::Index k = 1; k < power.cols(); ++k) fold(k, pitch_class(k * bin_hz)) = 1.0;
  Matrix chroma = power * fold;
  for (Eigen::Index t = 0; t < chroma.rows(); ++t) {
    const double peak = chroma.row(t).maxCoeff();
    if (peak > 0.0) chroma.row(t) /= peak;
  }
  return make_features(std::move(chroma), config, "chroma_stft");
}

SpectralStats spectral_stats(const AudioClip& clip, const FeatureConfig& config) {
  const ComplexMatrix spec = stft(clip, config);
  const Matrix mag = spec.cwiseAbs();
  const Matrix power = spec.cwiseAbs2();
  const Eigen::Index frames = mag.rows(), bins = mag.cols();
  const double bin_hz = static_cast<double>(clip.sample_rate) / config.fft_size;
  const double nyquist = clip.sample_rate / 2.0;

  Matrix centroid = Matrix::Zero(frames, 1), bandwidth = Matrix::Zero(frames, 1);
  Matrix rolloff = Matrix::Zero(frames, 1), zcr = Matrix::Zero(frames, 1);
  Matrix contrast = Matrix::Zero(frames, config.contrast_bands);

  RowVector freqs(bins);
  for (Eigen::Index k = 0; k < bins; ++k) freqs(k) = k * bin_hz;

  // Octave bands: [0,200), [200,400), ..., last band open to Nyquist.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> band_bins;
  for (int b = 0; b < config.contrast_bands; ++b) {
    const double lo = b == 0 ? 0.0 : 200.0 * std::pow(2.0, b - 1);
    const double hi = b == config.contrast_bands - 1 ? nyquist + bin_hz : 200.0 * std::pow(2.0, b);
    Eigen::Index k0 = static_cast<Eigen::Index>(std::ceil(lo / bin_hz));
    Eigen::Index k1 = std::min<Eigen::Index>(bins, static_cast<Eigen::Index>(std::ceil(hi / bin_hz)));
    band_bins.emplace_back(k0, std::max(k0, k1));
  }

  const int hop = config.hop(clip.sample_rate);
  std::vector<double> frame;
  std::vector<double> sorted;
  for (Eigen::Index t = 0; t < frames; ++t) {
    const double mass = mag.row(t).sum();
    if (mass > 0.0) {
      const double c = mag.row(t).dot(freqs) / mass;
      centroid(t, 0) = c;
      bandwidth(t, 0) = std::sqrt(((freqs.array() - c).square() * mag.row(t).array()).sum() / mass);
    }
    const double energy = power.row(t).sum();
    if (energy > 0.0) {
      double cum = 0.0;
      for (Eigen::Index k = 0; k < bins; ++k) {
        cum += power(t, k);
        if (cum >= config.rolloff_fraction * energy) {
          rolloff(t, 0) = freqs(k);
          break;
        }
      }
    }
    for (int b = 0; b < config.contrast_bands; ++b) {
      const auto [k0, k1] = band_bins[b];
      if (k1 <= k0) continue;
      sorted.assign(power.row(t).data() + k0, power.row(t).data() + k1);
      std::sort(sorted.begin(), sorted.end());
      const std::size_t q = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.02 * sorted.size())));
      double valley = 0.0, peak = 0.0;
      for (std::size_t i = 0; i < q; ++i) {
        valley += sorted[i];
        peak += sorted[sorted.size() - 1 - i];
      }
      contrast(t, b) = 10.0 * std::log10(peak / q + kPowerFloor) - 10.0 * std::log10(valley / q + kPowerFloor);
    }
    centred_frame(clip, static_cast<std::size_t>(t), hop, config.fft_size, frame);
    int crossings = 0;
    for (std::size_t i = 1; i < frame.size(); ++i) crossings += (frame[i] >= 0.0) != (frame[i - 1] >= 0.0);
    zcr(t, 0) = static_cast<double>(crossings) / (frame.size() - 1);
  }

  SpectralStats stats;
  stats.centroid = make_features(std::move(centroid), config, "spectral_centroid");
  stats.bandwidth = make_features(std::move(bandwidth), config, "spectral_bandwidth");
  stats.rolloff = make_features(std::move(rolloff), config, "spectral_rolloff");
  stats.contrast = make_features(std::move(contrast), config, "spectral_contrast");
  stats.zcr = make_features(std::move(zcr), config, "zcr");
  return stats;
}

FeatureMatrix LogMelExtractor::extract(const AudioClip& clip) const {
  const AudioClip mono = to_mono(clip);
  return log_mel(mono, config_ ? *config_ : default_feature_config(mono.sample_rate));
}

FeatureMatrix extract_default_features(const AudioClip& clip) { return LogMelExtractor{}.extract(clip); }

void write_feature_dump(const std::filesystem::path& path, const FeatureMatrix& features) {
  nlohmann::json header = {{"T", features.frames()}, {"F", features.dim()}, {"kind", features.kind}};
  std::vector<std::uint8_t> blob;
  blob.reserve(4 * features.data.size());
  for (Eigen::Index i = 0; i < features.data.size(); ++i)
    detail::put_f32(blob, static_cast<float>(features.data.data()[i]));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

FeatureMatrix read_feature_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad feature dump header in " + path.string() + ": " + e.what());
  }
  if (!header.contains("T") || !header.contains("F")) throw DataError("feature dump header lacks T/F");
  const auto t = header["T"].get<long>();
  const auto f = header["F"].get<long>();
  if (t < 0 || f < 0) throw DataError("negative feature dump dimensions");
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != static_cast<std::size_t>(4 * t * f)) throw DataError("feature dump payload size mismatch");
  FeatureMatrix fm;
  fm.data.resize(t, f);
  for (long i = 0; i < t * f; ++i) fm.data.data()[i] = detail::get_f32(blob.data() + 4 * i);
  fm.kind = header.value("kind", std::string("external"));
  return fm;
}

}  // namespace skiplight
