#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "skiplight/error.hpp"

namespace skiplight {

inline constexpr int kHueBins = 180;
inline constexpr int kValueBins = 256;
inline constexpr int kDefaultValueThreshold = 60;
inline constexpr int kDefaultFrameRate = 10;

/// Row-major packed RGB24 image.
struct RgbFrame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height

  RgbFrame() = default;
  RgbFrame(int w, int h);
  RgbFrame(int w, int h, std::vector<std::uint8_t> data);

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  void fill(std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

struct Hsv {
  int hue = 0;         // [0, 179], halved degrees
  int saturation = 0;  // [0, 255]
  int value = 0;       // [0, 255]
  friend bool operator==(const Hsv&, const Hsv&) = default;
};

using HueHistogram = std::array<std::uint32_t, kHueBins>;
using ValueHistogram = std::array<std::uint32_t, kValueBins>;

struct FrameHistograms {
  HueHistogram hue{};
  ValueHistogram value{};
  /// Set when no pixel reached the threshold and the histograms were
  /// recomputed with threshold 0.
  bool fallback = false;
};

/// One frame's principal light. Saturation is fixed and not stored.
struct LightToken {
  std::uint8_t hue = 0;    // cyclic, < 180
  std::uint8_t value = 0;  // intensity
  friend bool operator==(const LightToken&, const LightToken&) = default;
};

struct LightSequence {
  std::vector<LightToken> tokens;
  int frame_rate = kDefaultFrameRate;

  std::size_t size() const { return tokens.size(); }
};

/// Thrown by extract_sequence when a frame's dimensions differ from the first.
class FrameMismatchError : public DataError {
 public:
  FrameMismatchError(std::size_t index, const std::string& what)
      : DataError(what), index_(index) {}
  std::size_t frame_index() const { return index_; }

 private:
  std::size_t index_;
};

Hsv rgb_to_hsv(std::uint8_t red, std::uint8_t green, std::uint8_t blue);

FrameHistograms frame_histograms(const RgbFrame& frame, int v_threshold = kDefaultValueThreshold);

/// Hue mode (smallest index on ties) and rounded value mean of the histograms.
LightToken token_from_histograms(const FrameHistograms& hist);

LightToken tokenize_frame(const RgbFrame& frame, int v_threshold = kDefaultValueThreshold);

/// Cyclic distance on the 180-bin hue circle, in [0, 90].
int hue_distance(int h1, int h2);

int value_distance(int v1, int v2);

/// Pull-style frame producer; returns false when exhausted.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual bool next(RgbFrame& out) = 0;
};

LightSequence extract_sequence(std::span<const RgbFrame> frames,
                               int v_threshold = kDefaultValueThreshold);
LightSequence extract_sequence(FrameSource& source, int v_threshold = kDefaultValueThreshold);

/// Inverse colour mapping used for rendering: hue*2 degrees, full saturation,
/// value/255 brightness.
std::array<std::uint8_t, 3> light_to_rgb(LightToken token);

}  // namespace skiplight
