#include "skiplight/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "skiplight/detail/little_endian.hpp"

namespace skiplight {

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kBlob = "params.bin";

void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt, Precision precision) {
  std::filesystem::create_directories(dir);
  const bool f64 = precision == Precision::Float64;

  std::vector<std::uint8_t> blob;
  nlohmann::json tensors = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Matrix& m, const char* group) {
    tensors.push_back({{"name", name},
                       {"group", group},
                       {"shape", {m.rows(), m.cols()}},
                       {"offset", blob.size()},
                       {"count", m.size()}});
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (f64) {
        detail::put_f64(blob, m.data()[i]);
      } else {
        detail::put_f32(blob, static_cast<float>(m.data()[i]));
      }
    }
  };
  for (const auto& [name, m] : ckpt.params.tensors) emit(name, m, "model");
  for (const auto& [name, m] : ckpt.extra) emit(name, m, "extra");

  nlohmann::json manifest = {{"format", "skiplight-checkpoint"},
                             {"format_version", kCheckpointFormatVersion},
                             {"dtype", f64 ? "float64" : "float32"},
                             {"byte_order", "little"},
                             {"config", ckpt.config.to_json()},
                             {"seed", ckpt.config.seed},
                             {"blob", kBlob},
                             {"blob_bytes", blob.size()},
                             {"tensors", tensors},
                             {"metadata", ckpt.metadata}};
  write_file_atomically(dir / kBlob, std::string(blob.begin(), blob.end()));
  write_file_atomically(dir / kManifest, manifest.dump(2));
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / kManifest);
  if (!mf) throw DataError("cannot open checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("format") != "skiplight-checkpoint") throw DataError("not a skiplight checkpoint");
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw DataError("unsupported checkpoint format version");
    const std::string dtype = manifest.at("dtype");
    if (dtype != "float32" && dtype != "float64") throw DataError("unsupported dtype " + dtype);
    const std::size_t width = dtype == "float64" ? 8 : 4;

    std::ifstream bf(dir / manifest.value("blob", std::string(kBlob)), std::ios::binary);
    if (!bf) throw DataError("cannot open checkpoint blob in " + dir.string());
    const std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
      throw DataError("checkpoint blob size does not match manifest");

    ckpt.config = ModelConfig::from_json(manifest.at("config"));
    ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name");
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != count)
        throw DataError("tensor " + name + " shape disagrees with its count");
      if (offset > blob.size() || count * width > blob.size() - offset)
        throw DataError("tensor " + name + " lies outside the blob");
      Matrix m(rows, cols);
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* p = blob.data() + offset + i * width;
        m.data()[i] = width == 8 ? detail::get_f64(p) : detail::get_f32(p);
      }
      auto& target = entry.value("group", std::string("model")) == "extra" ? ckpt.extra : ckpt.params.tensors;
      if (!target.emplace(name, std::move(m)).second) throw DataError("duplicate tensor " + name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("invalid checkpoint config: ") + e.what());
  }
  validate_parameters(ckpt.config, ckpt.params);
  return ckpt;
}

}  // namespace skiplight
