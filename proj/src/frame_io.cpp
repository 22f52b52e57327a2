#include "skiplight/frame_io.hpp"

#include <algorithm>
#include <cctype>
#include <string>

namespace skiplight {

namespace {

// Reads the next whitespace-delimited header integer, skipping comments.
int read_header_int(std::istream& in, const std::filesystem::path& path) {
  int c = in.peek();
  while (in && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int value = -1;
  if (!(in >> value) || value < 0) throw DataError("malformed PPM header in " + path.string());
  return value;
}

}  // namespace

RgbFrame read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw DataError("not a P6 pixmap: " + path.string());
  const int width = read_header_int(in, path);
  const int height = read_header_int(in, path);
  const int maxval = read_header_int(in, path);
  if (width < 1 || height < 1) throw DataError("PPM has empty dimensions: " + path.string());
  if (maxval != 255) throw DataError("only 8-bit PPM is supported: " + path.string());
  in.get();  // single whitespace before raster
  std::vector<std::uint8_t> data(3ULL * width * height);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size()))
    throw DataError("truncated PPM raster: " + path.string());
  return RgbFrame(width, height, std::move(data));
}

void write_ppm(const std::filesystem::path& path, const RgbFrame& frame) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << frame.width << ' ' << frame.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.pixels.data()),
            static_cast<std::streamsize>(frame.pixels.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

PpmDirectorySource::PpmDirectorySource(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files_.push_back(entry.path());
  }
  std::sort(files_.begin(), files_.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
}

bool PpmDirectorySource::next(RgbFrame& out) {
  if (pos_ >= files_.size()) return false;
  out = read_ppm(files_[pos_++]);
  return true;
}

RawRgbSource::RawRgbSource(const std::filesystem::path& path, int width, int height,
                           std::size_t frame_count)
    : in_(path, std::ios::binary), width_(width), height_(height), count_(frame_count) {
  if (!in_) throw DataError("cannot open " + path.string());
  if (width < 1 || height < 1) throw UsageError("raw stream dimensions must be positive");
  const auto bytes = std::filesystem::file_size(path);
  if (bytes < 3ULL * width * height * frame_count)
    throw DataError("raw stream " + path.string() + " is shorter than the declared frame count");
}

bool RawRgbSource::next(RgbFrame& out) {
  if (pos_ >= count_) return false;
  std::vector<std::uint8_t> data(3ULL * width_ * height_);
  in_.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in_.gcount() != static_cast<std::streamsize>(data.size()))
    throw DataError("raw stream ended at frame " + std::to_string(pos_));
  out = RgbFrame(width_, height_, std::move(data));
  ++pos_;
  return true;
}

}  // namespace skiplight
