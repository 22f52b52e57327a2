#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skiplight/features.hpp"
#include "skiplight/lightcodec.hpp"

namespace skiplight {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr int kMinRecordFrames = 200;  // 20 s at 10 Hz
inline constexpr int kDefaultWindow = 1024;   // 102.4 s at 10 Hz

/// One aligned music/light recording.
struct DatasetRecord {
  std::string id;
  std::string show_id;  // split grouping key
  FeatureMatrix features;
  std::vector<LightToken> tokens;
  int frame_rate = kDefaultFrameRate;
  std::string metadata;  // optional JSON text

  std::size_t frames() const { return tokens.size(); }
  LightSequence light() const { return {tokens, frame_rate}; }
};

struct DatasetContainer {
  std::uint32_t version = kContainerVersion;
  std::vector<DatasetRecord> records;
};

/// Throws DataError unless blocks share T, tokens are in range, the show id
/// is non-empty and features are finite.
void validate_record(const DatasetRecord& record);

/// Rounds features to float32 precision, the container's storage type.
void quantize_features(Matrix& features);

/// SBL1 encoding: "SBL1", u32 version, u32 record count, a directory entry per
/// record {u32 len + id, u32 len + show id, u32 T, u32 F, u8 frame rate,
/// u32 len + feature kind, u32 len + metadata JSON, u64 feature/hue/value
/// offsets}, then float32 feature, u16 hue and u8 value blocks. Little-endian.
std::vector<std::uint8_t> encode_container(const DatasetContainer& container);
DatasetContainer decode_container(std::span<const std::uint8_t> bytes);

/// Whole-file replace on success.
void save_container(const std::filesystem::path& path, const DatasetContainer& container);
DatasetContainer load_container(const std::filesystem::path& path);

/// Where a record's frames and music come from.
struct RecordSource {
  std::string id;
  std::string show_id;
  std::filesystem::path frames;       // directory of .ppm, or raw RGB24 file
  int raw_width = 0;                  // set for raw streams
  int raw_height = 0;
  std::size_t raw_frames = 0;
  std::filesystem::path audio;        // WAV (ignored when features is set)
  std::filesystem::path features;     // optional precomputed dump
  std::string metadata;
};

struct BuildOptions {
  int v_threshold = kDefaultValueThreshold;
  std::optional<FeatureConfig> feature_config;  // default per sample rate
  int min_frames = kMinRecordFrames;
};

struct BuildReport {
  DatasetContainer container;
  std::vector<std::string> dropped;  // too short
};

/// Tokenizes frames, extracts features, reconciles lengths (truncate to the
/// shorter stream, at most one frame apart) and drops short records.
BuildReport build_dataset(std::span<const RecordSource> sources, const BuildOptions& options = {});

/// Uniformly random contiguous window of `window` frames; shorter records pass.
DatasetRecord window_sample(const DatasetRecord& record, int window, std::uint64_t seed);

/// Light CSV with header `frame,hue,value`.
void write_light_csv(std::ostream& out, const LightSequence& sequence);
void write_light_csv(const std::filesystem::path& path, const LightSequence& sequence);
LightSequence read_light_csv(const std::filesystem::path& path);

}  // namespace skiplight
