#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "skiplight/audio.hpp"
#include "skiplight/matrix.hpp"

namespace skiplight {

/// T x F music features sampled on the light frame grid.
struct FeatureMatrix {
  Matrix data;
  int frame_rate = 10;
  std::string kind;

  Eigen::Index frames() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
};

struct FeatureConfig {
  int fft_size = 2048;
  int frame_rate = 10;
  int mel_bands = 128;
  int mfcc_coeffs = 128;
  double rolloff_fraction = 0.95;
  int contrast_bands = 7;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means Nyquist

  /// Samples per frame; throws when sample_rate is not a multiple of frame_rate.
  int hop(int sample_rate) const;
  void validate(int sample_rate) const;
};

/// Default configuration for a sample rate; the FFT grows to the next power of
/// two when one hop would not fit in 2048 samples.
FeatureConfig default_feature_config(int sample_rate);

/// Hann-windowed centred STFT with reflect padding; ceil(len/hop) frames of
/// fft_size/2+1 bins. Expects a mono clip.
ComplexMatrix stft(const AudioClip& clip, const FeatureConfig& config);

/// Triangular mel filters (HTK mel scale), each scaled to a peak weight of 1.
/// Shape: bands x (fft_size/2+1).
Matrix mel_filterbank(int sample_rate, int fft_size, int bands, double fmin, double fmax);

/// Orthonormal DCT-II basis, n x n, rows are basis vectors.
Matrix dct_matrix(int n);

FeatureMatrix mel_spectrogram(const AudioClip& clip, const FeatureConfig& config);

/// Power to decibels with a 1e-10 floor, referenced so the clip maximum is 0 dB.
Matrix power_to_db(const Matrix& power);

FeatureMatrix log_mel(const AudioClip& clip, const FeatureConfig& config);
FeatureMatrix mfcc(const AudioClip& clip, const FeatureConfig& config);
FeatureMatrix chroma_stft(const AudioClip& clip, const FeatureConfig& config);

/// Pitch class (C = 0 ... B = 11) of a frequency, A440 reference.
int pitch_class(double frequency_hz);

struct SpectralStats {
  FeatureMatrix centroid;
  FeatureMatrix bandwidth;
  FeatureMatrix rolloff;
  FeatureMatrix contrast;
  FeatureMatrix zcr;
};

SpectralStats spectral_stats(const AudioClip& clip, const FeatureConfig& config);

/// Model-facing music representation.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeatureMatrix extract(const AudioClip& clip) const = 0;
  virtual std::string kind() const = 0;
};

/// 128-band log-mel at 10 Hz unless configured otherwise. Stereo input is
/// averaged to mono.
class LogMelExtractor : public FeatureExtractor {
 public:
  LogMelExtractor() = default;
  explicit LogMelExtractor(FeatureConfig config) : config_(config) {}
  FeatureMatrix extract(const AudioClip& clip) const override;
  std::string kind() const override { return "log_mel"; }

 private:
  std::optional<FeatureConfig> config_;
};

FeatureMatrix extract_default_features(const AudioClip& clip);

/// Raw dump: one JSON header line {"T":..,"F":..,"kind":..} followed by
/// little-endian float32 row-major data.
void write_feature_dump(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_feature_dump(const std::filesystem::path& path);

}  // namespace skiplight
