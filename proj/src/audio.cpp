#include "skiplight/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace skiplight {

namespace {

std::uint32_t rd_u32(const std::uint8_t* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError("not a RIFF/WAVE file: " + path.string());

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;
  bool have_fmt = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t len = rd_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      // Some writers leave a streaming placeholder length on the data chunk.
      if (std::memcmp(chunk, "data", 4) != 0) throw DataError("truncated chunk in " + path.string());
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw DataError("short fmt chunk in " + path.string());
      format = rd_u16(chunk + 8);
      channels = rd_u16(chunk + 10);
      rate = rd_u32(chunk + 12);
      bits = rd_u16(chunk + 22);
      if (format == kFormatExtensible && len >= 40) format = rd_u16(chunk + 32);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = std::min<std::size_t>(len, bytes.size() - body);
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw DataError("missing fmt chunk in " + path.string());
  if (data == nullptr) throw DataError("missing data chunk in " + path.string());
  if (channels < 1 || channels > 2) throw DataError("unsupported channel count in " + path.string());
  if (rate == 0) throw DataError("zero sample rate in " + path.string());

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.channels = channels;
  if (format == kFormatPcm && bits == 16) {
    const std::size_t n = data_len / 2;
    clip.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      clip.samples[i] = static_cast<std::int16_t>(rd_u16(data + 2 * i)) / 32768.0;
  } else if (format == kFormatFloat && bits == 32) {
    const std::size_t n = data_len / 4;
    clip.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t raw = rd_u32(data + 4 * i);
      float f;
      std::memcpy(&f, &raw, 4);
      clip.samples[i] = f;
    }
  } else {
    throw DataError("unsupported WAV encoding (format " + std::to_string(format) + ", " +
                    std::to_string(bits) + " bits) in " + path.string());
  }
  clip.samples.resize(clip.samples.size() - clip.samples.size() % channels);
  return clip;
}

void save_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding encoding) {
  if (clip.sample_rate <= 0 || clip.channels < 1 || clip.channels > 2)
    throw UsageError("invalid clip format for WAV output");
  const bool pcm = encoding == WavEncoding::Pcm16;
  const std::uint16_t bytes_per_sample = pcm ? 2 : 4;
  const std::uint32_t data_len = static_cast<std::uint32_t>(clip.samples.size() * bytes_per_sample);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_len);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_len);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, pcm ? kFormatPcm : kFormatFloat);
  put_u16(out, static_cast<std::uint16_t>(clip.channels));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate * clip.channels * bytes_per_sample));
  put_u16(out, static_cast<std::uint16_t>(clip.channels * bytes_per_sample));
  put_u16(out, static_cast<std::uint16_t>(8 * bytes_per_sample));
  put_tag(out, "data");
  put_u32(out, data_len);
  for (double s : clip.samples) {
    if (pcm) {
      const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
    } else {
      const float f = static_cast<float>(s);
      std::uint32_t raw;
      std::memcpy(&raw, &f, 4);
      put_u32(out, raw);
    }
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

AudioClip to_mono(const AudioClip& clip) {
  if (clip.channels == 1) return clip;
  AudioClip mono;
  mono.sample_rate = clip.sample_rate;
  mono.channels = 1;
  const std::size_t n = clip.frames();
  mono.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (int c = 0; c < clip.channels; ++c) sum += clip.samples[i * clip.channels + c];
    mono.samples[i] = sum / clip.channels;
  }
  return mono;
}

AudioClip resample_linear(const AudioClip& clip, int target_rate) {
  if (clip.channels != 1) throw UsageError("resample_linear expects a mono clip");
  if (target_rate <= 0) throw UsageError("target rate must be positive");
  if (target_rate == clip.sample_rate || clip.samples.empty()) {
    AudioClip copy = clip;
    copy.sample_rate = target_rate;
    return copy;
  }
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  const auto n_out = static_cast<std::size_t>(std::floor(clip.samples.size() / ratio));
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double src = i * ratio;
    const auto k = static_cast<std::size_t>(src);
    const double frac = src - k;
    const double a = clip.samples[k];
    const double b = k + 1 < clip.samples.size() ? clip.samples[k + 1] : a;
    out.samples[i] = a + frac * (b - a);
  }
  return out;
}

}  // namespace skiplight
