#include "skiplight/lightcodec.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

namespace skiplight {

namespace {

// Integer round-half-up of num/den for den > 0, num of any sign.
int div_round_half_up(long num, long den) {
  long twice = 2 * num + den;
  long q = twice / (2 * den);
  if (twice % (2 * den) != 0 && twice < 0) --q;
  return static_cast<int>(q);
}

}  // namespace

RgbFrame::RgbFrame(int w, int h) : RgbFrame(w, h, std::vector<std::uint8_t>(3ULL * w * h, 0)) {}

RgbFrame::RgbFrame(int w, int h, std::vector<std::uint8_t> data)
    : width(w), height(h), pixels(std::move(data)) {
  if (w < 1 || h < 1) throw UsageError("frame dimensions must be positive");
  if (pixels.size() != 3ULL * w * h) throw DataError("frame pixel buffer has wrong length");
}

void RgbFrame::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
  pixels[i] = r;
  pixels[i + 1] = g;
  pixels[i + 2] = b;
}

void RgbFrame::fill(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = r;
    pixels[i + 1] = g;
    pixels[i + 2] = b;
  }
}

Hsv rgb_to_hsv(std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
  const int r = red, g = green, b = blue;
  const int mx = std::max({r, g, b});
  const int mn = std::min({r, g, b});
  const int delta = mx - mn;
  Hsv out;
  out.value = mx;
  if (mx == 0 || delta == 0) return out;
  out.saturation = div_round_half_up(255L * delta, mx);
  // Hue in halved degrees: 30 units per 60-degree sector.
  long num;
  if (mx == r) {
    num = 30L * (g - b);
  } else if (mx == g) {
    num = 30L * (b - r) + 60L * delta;
  } else {
    num = 30L * (r - g) + 120L * delta;
  }
  int hue = div_round_half_up(num, delta) % kHueBins;
  if (hue < 0) hue += kHueBins;
  out.hue = hue;
  return out;
}

namespace {

void accumulate(const RgbFrame& frame, int v_threshold, FrameHistograms& hist) {
  const std::uint8_t* p = frame.pixels.data();
  const std::size_t n = frame.pixel_count();
  for (std::size_t i = 0; i < n; ++i, p += 3) {
    const int v = std::max({p[0], p[1], p[2]});
    if (v < v_threshold) continue;
    const Hsv hsv = rgb_to_hsv(p[0], p[1], p[2]);
    ++hist.hue[hsv.hue];
    ++hist.value[v];
  }
}

}  // namespace

FrameHistograms frame_histograms(const RgbFrame& frame, int v_threshold) {
  if (v_threshold < 0 || v_threshold > 255) throw UsageError("value threshold must be in [0,255]");
  FrameHistograms hist;
  accumulate(frame, v_threshold, hist);
  std::uint64_t total = 0;
  for (auto c : hist.value) total += c;
  if (total == 0 && v_threshold > 0) {
    accumulate(frame, 0, hist);
    hist.fallback = true;
  }
  return hist;
}

LightToken token_from_histograms(const FrameHistograms& hist) {
  LightToken token;
  auto mode = std::max_element(hist.hue.begin(), hist.hue.end());  // first maximum
  token.hue = static_cast<std::uint8_t>(mode - hist.hue.begin());
  long weighted = 0, total = 0;
  for (int k = 0; k < kValueBins; ++k) {
    weighted += static_cast<long>(k) * hist.value[k];
    total += hist.value[k];
  }
  token.value = total == 0 ? 0 : static_cast<std::uint8_t>(div_round_half_up(weighted, total));
  return token;
}

LightToken tokenize_frame(const RgbFrame& frame, int v_threshold) {
  return token_from_histograms(frame_histograms(frame, v_threshold));
}

int hue_distance(int h1, int h2) {
  if (h1 < 0 || h1 >= kHueBins || h2 < 0 || h2 >= kHueBins)
    throw UsageError("hue out of range [0,179]");
  const int d = std::abs(h1 - h2);
  return std::min(d, kHueBins - d);
}

int value_distance(int v1, int v2) { return std::abs(v1 - v2); }

LightSequence extract_sequence(std::span<const RgbFrame> frames, int v_threshold) {
  if (frames.empty()) throw DataError("frame stream is empty");
  LightSequence seq;
  seq.tokens.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].width != frames[0].width || frames[i].height != frames[0].height)
      throw FrameMismatchError(i, "frame " + std::to_string(i) + " has dimensions " +
                                      std::to_string(frames[i].width) + "x" +
                                      std::to_string(frames[i].height) + ", expected " +
                                      std::to_string(frames[0].width) + "x" +
                                      std::to_string(frames[0].height));
    seq.tokens.push_back(tokenize_frame(frames[i], v_threshold));
  }
  return seq;
}

LightSequence extract_sequence(FrameSource& source, int v_threshold) {
  LightSequence seq;
  RgbFrame frame;
  int width = 0, height = 0;
  std::size_t index = 0;
  while (source.next(frame)) {
    if (index == 0) {
      width = frame.width;
      height = frame.height;
    } else if (frame.width != width || frame.height != height) {
      throw FrameMismatchError(index, "frame " + std::to_string(index) +
                                          " dimensions differ from the first frame");
    }
    seq.tokens.push_back(tokenize_frame(frame, v_threshold));
    ++index;
  }
  if (seq.tokens.empty()) throw DataError("frame stream is empty");
  return seq;
}

std::array<std::uint8_t, 3> light_to_rgb(LightToken token) {
  const int h = token.hue % kHueBins;
  const int v = token.value;
  const int sector = h / 30;
  const int k = h % 30;
  const auto scaled = [v](int num) {
    return static_cast<std::uint8_t>(div_round_half_up(static_cast<long>(v) * num, 30));
  };
  const std::uint8_t full = static_cast<std::uint8_t>(v);
  const std::uint8_t rising = scaled(k);
  const std::uint8_t falling = scaled(30 - k);
  switch (sector) {
    case 0: return {full, rising, 0};
    case 1: return {falling, full, 0};
    case 2: return {0, full, rising};
    case 3: return {0, falling, full};
    case 4: return {rising, 0, full};
    default: return {full, 0, falling};
  }
}

}  // namespace skiplight
