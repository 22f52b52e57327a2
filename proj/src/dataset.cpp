#include "skiplight/dataset.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>

#include "skiplight/audio.hpp"
#include "skiplight/detail/little_endian.hpp"
#include "skiplight/frame_io.hpp"

namespace skiplight {

namespace {

constexpr char kMagic[4] = {'S', 'B', 'L', '1'};

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

// Bounds-checked cursor over the container bytes.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    const U v = detail::get_le<U>(bytes_.data() + pos_);
    pos_ += sizeof(U);
    return v;
  }

  std::string str() {
    const auto len = le<std::uint32_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw DataError("container truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct DirectoryEntry {
  DatasetRecord record;
  std::uint32_t frames = 0, dim = 0;
  std::uint64_t feature_offset = 0, hue_offset = 0, value_offset = 0;
};

void check_block(std::uint64_t offset, std::uint64_t bytes, std::size_t size, const std::string& what) {
  if (offset > size || bytes > size - offset) throw DataError(what + " block lies outside the container");
}

std::size_t raw_frame_count(const RecordSource& src) {
  if (src.raw_frames > 0) return src.raw_frames;
  const std::uintmax_t bytes = std::filesystem::file_size(src.frames);
  const std::uintmax_t frame_bytes = 3ull * src.raw_width * src.raw_height;
  if (frame_bytes == 0 || bytes % frame_bytes != 0)
    throw DataError(src.frames.string() + " is not a whole number of " + std::to_string(src.raw_width) + "x" +
                    std::to_string(src.raw_height) + " frames");
  return bytes / frame_bytes;
}

LightSequence tokenize_source(const RecordSource& src, int v_threshold) {
  if (std::filesystem::is_directory(src.frames)) {
    PpmDirectorySource frames(src.frames);
    return extract_sequence(frames, v_threshold);
  }
  if (src.raw_width <= 0 || src.raw_height <= 0)
    throw UsageError("raw frame stream " + src.frames.string() + " needs a width and height");
  RawRgbSource frames(src.frames, src.raw_width, src.raw_height, raw_frame_count(src));
  return extract_sequence(frames, v_threshold);
}

FeatureMatrix features_for(const RecordSource& src, const BuildOptions& options) {
  if (!src.features.empty()) return read_feature_dump(src.features);
  if (src.audio.empty()) throw UsageError("record " + src.id + " has no audio or feature source");
  const AudioClip clip = to_mono(load_wav(src.audio));
  const FeatureConfig config = options.feature_config ? *options.feature_config
                                                      : default_feature_config(clip.sample_rate);
  return LogMelExtractor(config).extract(clip);
}

}  // namespace

void validate_record(const DatasetRecord& r) {
  if (r.show_id.empty()) throw DataError("record " + r.id + " has an empty show id");
  if (r.features.frames() != static_cast<Eigen::Index>(r.tokens.size()))
    throw DataError("record " + r.id + ": feature and token lengths differ");
  if (r.frame_rate <= 0 || r.frame_rate > 255) throw DataError("record " + r.id + ": frame rate out of range");
  for (const auto& t : r.tokens)
    if (t.hue >= kHueBins) throw DataError("record " + r.id + ": hue token out of range");
  if (!r.features.data.allFinite()) throw DataError("record " + r.id + ": non-finite features");
}

void quantize_features(Matrix& features) {
  features = features.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

std::vector<std::uint8_t> encode_container(const DatasetContainer& container) {
  for (const auto& r : container.records) validate_record(r);

  // Directory size first, so block offsets can be absolute.
  std::vector<std::uint8_t> head(kMagic, kMagic + 4);
  detail::put_le<std::uint32_t>(head, container.version);
  detail::put_le<std::uint32_t>(head, static_cast<std::uint32_t>(container.records.size()));
  std::size_t dir_bytes = head.size();
  for (const auto& r : container.records)
    dir_bytes += 4 + r.id.size() + 4 + r.show_id.size() + 4 + 4 + 1 + 4 + r.features.kind.size() + 4 +
                 r.metadata.size() + 3 * 8;

  std::uint64_t offset = dir_bytes;
  std::vector<std::uint8_t> out = head;
  out.reserve(dir_bytes);
  for (const auto& r : container.records) {
    const std::uint64_t t = r.tokens.size();
    const std::uint64_t f = static_cast<std::uint64_t>(r.features.dim());
    put_string(out, r.id);
    put_string(out, r.show_id);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f));
    out.push_back(static_cast<std::uint8_t>(r.frame_rate));
    put_string(out, r.features.kind);
    put_string(out, r.metadata);
    detail::put_le<std::uint64_t>(out, offset);
    detail::put_le<std::uint64_t>(out, offset + 4 * t * f);
    detail::put_le<std::uint64_t>(out, offset + 4 * t * f + 2 * t);
    offset += 4 * t * f + 3 * t;
  }
  for (const auto& r : container.records) {
    const Matrix& m = r.features.data;
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, static_cast<float>(m.data()[i]));
    for (const auto& tok : r.tokens) detail::put_le<std::uint16_t>(out, tok.hue);
    for (const auto& tok : r.tokens) out.push_back(tok.value);
  }
  return out;
}

DatasetContainer decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin()))
    throw DataError("not an SBL1 container (bad magic)");
  Reader rd(bytes.subspan(4));
  DatasetContainer c;
  c.version = rd.le<std::uint32_t>();
  if (c.version != kContainerVersion) throw DataError("unsupported container version " + std::to_string(c.version));
  const auto count = rd.le<std::uint32_t>();

  std::vector<DirectoryEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    DirectoryEntry e;
    e.record.id = rd.str();
    e.record.show_id = rd.str();
    e.frames = rd.le<std::uint32_t>();
    e.dim = rd.le<std::uint32_t>();
    e.record.frame_rate = rd.le<std::uint8_t>();
    e.record.features.kind = rd.str();
    e.record.metadata = rd.str();
    e.feature_offset = rd.le<std::uint64_t>();
    e.hue_offset = rd.le<std::uint64_t>();
    e.value_offset = rd.le<std::uint64_t>();
    entries.push_back(std::move(e));
  }

  const std::size_t size = bytes.size();
  for (auto& e : entries) {
    const std::uint64_t t = e.frames, f = e.dim;
    if (f != 0 && t > std::numeric_limits<std::uint64_t>::max() / 4 / f)
      throw DataError("record " + e.record.id + " has an impossible size");
    check_block(e.feature_offset, 4 * t * f, size, "feature");
    check_block(e.hue_offset, 2 * t, size, "hue");
    check_block(e.value_offset, t, size, "value");

    DatasetRecord& r = e.record;
    r.features.frame_rate = r.frame_rate;
    r.features.data.resize(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(f));
    const std::uint8_t* p = bytes.data() + e.feature_offset;
    for (std::uint64_t i = 0; i < t * f; ++i) r.features.data.data()[i] = detail::get_f32(p + 4 * i);
    r.tokens.resize(t);
    for (std::uint64_t i = 0; i < t; ++i) {
      const auto hue = detail::get_le<std::uint16_t>(bytes.data() + e.hue_offset + 2 * i);
      if (hue >= kHueBins) throw DataError("record " + r.id + ": hue token out of range");
      r.tokens[i] = {static_cast<std::uint8_t>(hue), bytes[e.value_offset + i]};
    }
    validate_record(r);
    c.records.push_back(std::move(r));
  }
  return c;
}

void save_container(const std::filesystem::path& path, const DatasetContainer& container) {
  const auto bytes = encode_container(container);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

DatasetContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

BuildReport build_dataset(std::span<const RecordSource> sources, const BuildOptions& options) {
  BuildReport report;
  for (const auto& src : sources) {
    if (src.frames.empty()) throw UsageError("record " + src.id + " has no frame source");
    if (src.show_id.empty()) throw UsageError("record " + src.id + " has no show id");
    LightSequence light = tokenize_source(src, options.v_threshold);
    FeatureMatrix features = features_for(src, options);

    const auto video_t = static_cast<long>(light.size());
    const auto audio_t = static_cast<long>(features.frames());
    if (std::abs(video_t - audio_t) > 1)
      throw DataError("record " + src.id + ": " + std::to_string(video_t) + " light frames vs " +
                      std::to_string(audio_t) + " music frames");
    const long t = std::min(video_t, audio_t);
    if (t < options.min_frames) {
      report.dropped.push_back(src.id);
      continue;
    }

    DatasetRecord r;
    r.id = src.id;
    r.show_id = src.show_id;
    r.frame_rate = features.frame_rate;
    r.metadata = src.metadata;
    r.tokens.assign(light.tokens.begin(), light.tokens.begin() + t);
    r.features.kind = features.kind;
    r.features.frame_rate = features.frame_rate;
    r.features.data = features.data.topRows(t);
    quantize_features(r.features.data);
    validate_record(r);
    report.container.records.push_back(std::move(r));
  }
  return report;
}

DatasetRecord window_sample(const DatasetRecord& record, int window, std::uint64_t seed) {
  if (window <= 0) throw UsageError("window must be positive");
  const auto t = static_cast<long>(record.frames());
  if (t <= window) return record;
  std::mt19937_64 rng(seed);
  const long start = std::uniform_int_distribution<long>(0, t - window)(rng);
  DatasetRecord out = record;
  out.tokens.assign(record.tokens.begin() + start, record.tokens.begin() + start + window);
  out.features.data = record.features.data.middleRows(start, window);
  return out;
}

void write_light_csv(std::ostream& out, const LightSequence& sequence) {
  out << "frame,hue,value\n";
  for (std::size_t i = 0; i < sequence.size(); ++i)
    out << i << ',' << int{sequence.tokens[i].hue} << ',' << int{sequence.tokens[i].value} << '\n';
}

void write_light_csv(const std::filesystem::path& path, const LightSequence& sequence) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_light_csv(out, sequence);
}

LightSequence read_light_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("frame,hue,value", 0) != 0)
    throw DataError(path.string() + ": expected header frame,hue,value");
  LightSequence seq;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    long frame = -1, hue = -1, value = -1;
    char c1 = 0, c2 = 0;
    std::istringstream fields(line);
    if (!(fields >> frame >> c1 >> hue >> c2 >> value) || c1 != ',' || c2 != ',')
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    if (frame != static_cast<long>(seq.size()))
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": frames must be consecutive from 0");
    if (hue < 0 || hue >= kHueBins || value < 0 || value >= kValueBins)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": token out of range");
    seq.tokens.push_back({static_cast<std::uint8_t>(hue), static_cast<std::uint8_t>(value)});
  }
  return seq;
}

}  // namespace skiplight
