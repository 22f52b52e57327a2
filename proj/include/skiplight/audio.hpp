#pragma once

#include <filesystem>
#include <vector>

#include "skiplight/error.hpp"

namespace skiplight {

struct AudioClip {
  int sample_rate = 0;
  int channels = 1;
  std::vector<double> samples;  // interleaved when stereo, in [-1, 1]

  std::size_t frames() const { return channels > 0 ? samples.size() / channels : 0; }
  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(frames()) / sample_rate : 0.0;
  }
};

enum class WavEncoding { Pcm16, Float32 };

/// RIFF/WAVE reader for PCM16 and IEEE float32 payloads.
AudioClip load_wav(const std::filesystem::path& path);
void save_wav(const std::filesystem::path& path, const AudioClip& clip,
              WavEncoding encoding = WavEncoding::Pcm16);

AudioClip to_mono(const AudioClip& clip);

/// Linear-interpolation resampling of a mono clip.
AudioClip resample_linear(const AudioClip& clip, int target_rate);

}  // namespace skiplight
