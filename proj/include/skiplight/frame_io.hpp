#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include "skiplight/lightcodec.hpp"

namespace skiplight {

/// Binary P6 portable pixmap, maxval 255.
RgbFrame read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbFrame& frame);

/// Every *.ppm file in a directory, in ascending lexicographic filename order.
class PpmDirectorySource : public FrameSource {
 public:
  explicit PpmDirectorySource(const std::filesystem::path& dir);
  bool next(RgbFrame& out) override;
  std::size_t size() const { return files_.size(); }

 private:
  std::vector<std::filesystem::path> files_;
  std::size_t pos_ = 0;
};

/// Packed RGB24 frames back to back; dimensions and count come from the caller.
class RawRgbSource : public FrameSource {
 public:
  RawRgbSource(const std::filesystem::path& path, int width, int height, std::size_t frame_count);
  bool next(RgbFrame& out) override;
  std::size_t size() const { return count_; }

 private:
  std::ifstream in_;
  int width_, height_;
  std::size_t count_;
  std::size_t pos_ = 0;
};

}  // namespace skiplight
