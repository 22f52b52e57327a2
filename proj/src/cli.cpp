#include "skiplight/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "skiplight/checkpoint.hpp"
#include "skiplight/dataset.hpp"
#include "skiplight/features.hpp"
#include "skiplight/frame_io.hpp"
#include "skiplight/inference.hpp"
#include "skiplight/metrics.hpp"
#include "skiplight/synthbench.hpp"
#include "skiplight/training.hpp"
#include "skiplight/vmm.hpp"

namespace skiplight {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool has_extension(const fs::path& p, const char* ext) { return p.extension() == ext; }

struct FrameInput {
  std::string frames;
  std::string raw;
  int width = 0;
  int height = 0;
  std::size_t count = 0;
};

void add_frame_input(CLI::App* cmd, FrameInput& in) {
  cmd->add_option("--frames", in.frames, "Directory of P6 .ppm frames");
  cmd->add_option("--raw", in.raw, "Packed RGB24 frame stream");
  cmd->add_option("--width", in.width, "Raw frame width");
  cmd->add_option("--height", in.height, "Raw frame height");
  cmd->add_option("--count", in.count, "Raw frame count (default: file size / frame size)");
}

RecordSource frame_source(const FrameInput& in) {
  if (in.frames.empty() == in.raw.empty()) throw UsageError("give exactly one of --frames or --raw");
  RecordSource src;
  src.frames = in.frames.empty() ? in.raw : in.frames;
  src.raw_width = in.width;
  src.raw_height = in.height;
  src.raw_frames = in.count;
  return src;
}

LightSequence tokenize(const FrameInput& in, int threshold) {
  const RecordSource src = frame_source(in);
  if (!in.frames.empty()) {
    PpmDirectorySource frames(src.frames);
    return extract_sequence(frames, threshold);
  }
  if (in.width <= 0 || in.height <= 0) throw UsageError("--raw needs --width and --height");
  std::size_t count = in.count;
  if (count == 0) {
    const auto frame_bytes = 3ull * in.width * in.height;
    const auto bytes = fs::file_size(src.frames);
    if (bytes % frame_bytes != 0) throw DataError(in.raw + " is not a whole number of frames");
    count = bytes / frame_bytes;
  }
  RawRgbSource frames(src.frames, in.width, in.height, count);
  return extract_sequence(frames, threshold);
}

void check_threshold(int v) {
  if (v < 0 || v > 255) throw UsageError("--threshold must be in [0, 255]");
}

// Light sequences from a CSV or one or all records of a container.
std::vector<std::pair<std::string, LightSequence>> read_light(const fs::path& path, const std::string& record) {
  std::vector<std::pair<std::string, LightSequence>> out;
  if (has_extension(path, ".sbl1")) {
    for (const auto& r : load_container(path).records)
      if (record.empty() || r.id == record) out.emplace_back(r.id, r.light());
    if (out.empty()) throw DataError("no record '" + record + "' in " + path.string());
  } else {
    out.emplace_back(path.stem().string(), read_light_csv(path));
  }
  return out;
}

int cmd_extract(const FrameInput& in, int threshold, const std::string& out_path, bool as_json, std::ostream& out) {
  check_threshold(threshold);
  const LightSequence seq = tokenize(in, threshold);
  if (!out_path.empty()) {
    write_light_csv(fs::path(out_path), seq);
  } else if (!as_json) {
    write_light_csv(out, seq);
  }
  if (as_json) out << json{{"frames", seq.size()}, {"threshold", threshold}, {"out", out_path}}.dump() << '\n';
  return 0;
}

FeatureMatrix compute_features(const AudioClip& clip, const std::string& kind, const FeatureConfig& config) {
  if (kind == "log_mel") return log_mel(clip, config);
  if (kind == "mel") return mel_spectrogram(clip, config);
  if (kind == "mfcc") return mfcc(clip, config);
  if (kind == "chroma") return chroma_stft(clip, config);
  throw UsageError("unknown feature kind '" + kind + "' (log_mel, mel, mfcc, chroma)");
}

int cmd_features(const std::string& audio, const std::string& kind, const std::string& out_path, int mel_bands,
                 bool as_json, std::ostream& out) {
  const AudioClip clip = to_mono(load_wav(audio));
  FeatureConfig config = default_feature_config(clip.sample_rate);
  config.mel_bands = mel_bands;
  config.mfcc_coeffs = std::min(config.mfcc_coeffs, mel_bands);
  const FeatureMatrix fm = compute_features(clip, kind, config);
  write_feature_dump(out_path, fm);
  const json summary{{"T", fm.frames()}, {"F", fm.dim()}, {"kind", fm.kind}, {"out", out_path}};
  out << (as_json ? summary.dump() : std::to_string(fm.frames()) + " x " + std::to_string(fm.dim()) + " " + fm.kind)
      << '\n';
  return 0;
}

// Manifest: {"records": [{"id", "show", "frames" | "raw" (+ "width", "height",
// "count"), "audio" | "features", "metadata"}]}; paths relative to the manifest.
std::vector<RecordSource> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<RecordSource> sources;
  try {
    const json j = json::parse(in);
    const fs::path base = path.parent_path();
    auto resolve = [&](const std::string& p) { return p.empty() ? fs::path() : base / p; };
    for (const auto& r : j.at("records")) {
      RecordSource s;
      s.id = r.at("id").get<std::string>();
      s.show_id = r.value("show", s.id);
      const std::string frames = r.value("frames", std::string());
      const std::string raw = r.value("raw", std::string());
      if (frames.empty() == raw.empty()) throw UsageError("record " + s.id + ": give exactly one of frames or raw");
      s.frames = resolve(frames.empty() ? raw : frames);
      s.raw_width = r.value("width", 0);
      s.raw_height = r.value("height", 0);
      s.raw_frames = r.value("count", std::size_t{0});
      s.audio = resolve(r.value("audio", std::string()));
      s.features = resolve(r.value("features", std::string()));
      if (r.contains("metadata")) s.metadata = r.at("metadata").dump();
      sources.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  return sources;
}

int cmd_build(const std::string& manifest, const std::string& out_path, int threshold, int min_frames, bool as_json,
              std::ostream& out) {
  check_threshold(threshold);
  BuildOptions options;
  options.v_threshold = threshold;
  options.min_frames = min_frames;
  const auto sources = read_manifest(manifest);
  const BuildReport report = build_dataset(sources, options);
  save_container(out_path, report.container);
  if (as_json) {
    json ids = json::array();
    for (const auto& r : report.container.records) ids.push_back({{"id", r.id}, {"frames", r.frames()}});
    out << json{{"records", ids}, {"dropped", report.dropped}, {"out", out_path}}.dump() << '\n';
  } else {
    out << report.container.records.size() << " records written, " << report.dropped.size() << " dropped\n";
  }
  return 0;
}

int cmd_vmm(const FrameInput& in, const std::string& frame, int threshold, int kmax, std::uint64_t seed,
            std::ostream& out) {
  check_threshold(threshold);
  if (kmax < 1) throw UsageError("--kmax must be at least 1");
  vmm::FitConfig config;
  config.seed = seed;
  config.k_candidates.clear();
  for (int k = 1; k <= kmax; ++k) config.k_candidates.push_back(k);

  std::vector<RgbFrame> frames;
  if (!frame.empty()) {
    frames.push_back(read_ppm(frame));
  } else {
    const RecordSource src = frame_source(in);
    if (!in.frames.empty()) {
      PpmDirectorySource dir(src.frames);
      RgbFrame f;
      while (dir.next(f)) frames.push_back(f);
    } else {
      const std::size_t count = in.count ? in.count : fs::file_size(src.frames) / (3ull * in.width * in.height);
      RawRgbSource raw(src.frames, in.width, in.height, count);
      RgbFrame f;
      while (raw.next(f)) frames.push_back(f);
    }
  }
  json results = json::array();
  for (const auto& f : frames) {
    const auto samples = vmm::hue_samples(frame_histograms(f, threshold).hue);
    // Too few pixels for the larger mixtures: fit what the sample count allows.
    vmm::FitConfig c = config;
    std::erase_if(c.k_candidates, [&](int k) { return samples.size() < static_cast<std::size_t>(3 * k); });
    if (c.k_candidates.empty()) throw DataError("frame has fewer than 3 pixels above the threshold");
    results.push_back(vmm::to_json(vmm::select_k(samples, c)));
  }
  out << (frame.empty() ? results.dump() : results.at(0).dump()) << '\n';
  return 0;
}

struct TrainOptions {
  std::string data, out, config, init, preset = "full", skip;
  int epochs = -1, batch = -1, window = -1, lora_rank = 0;
  double lr = -1;
  std::uint64_t seed = 0;
  bool seed_set = false, resume = false;
};

void add_train_options(CLI::App* cmd, TrainOptions& t) {
  cmd->add_option("--data", t.data, "Dataset container (.sbl1)")->required();
  cmd->add_option("--out", t.out, "Checkpoint directory")->required();
  cmd->add_option("--config", t.config, "Run config JSON; flags override it");
  cmd->add_option("--preset", t.preset, "Model preset: full or tiny")->check(CLI::IsMember({"full", "tiny"}));
  cmd->add_option("--skip", t.skip, "Skip pairing: previous, same or none");
  cmd->add_option("--epochs", t.epochs);
  cmd->add_option("--batch", t.batch);
  cmd->add_option("--window", t.window, "Training window in frames");
  cmd->add_option("--lr", t.lr, "Learning rate");
  cmd->add_option("--seed", t.seed)->each([&t](const std::string&) { t.seed_set = true; });
  cmd->add_flag("--resume", t.resume, "Continue from <out>/last");
}

int cmd_train(const std::string& phase, const TrainOptions& t, bool as_json, std::ostream& out) {
  RunConfig run;
  if (!t.config.empty()) {
    std::ifstream in(t.config);
    if (!in) throw DataError("cannot open " + t.config);
    try {
      run = RunConfig::from_json(json::parse(in));
    } catch (const json::parse_error& e) {
      throw DataError(std::string("malformed run config: ") + e.what());
    }
  }
  run.phase = phase;
  run.dataset = t.data;
  run.checkpoint_dir = t.out;
  run.resume = t.resume;
  if (!t.init.empty()) run.init_checkpoint = t.init;
  if (t.seed_set) run.seed = t.seed;
  if (t.config.empty()) run.model = t.preset == "tiny" ? ModelConfig::tiny(128) : ModelConfig::full(128);
  if (!t.skip.empty()) run.model.skip = skip_mode_from_string(t.skip);
  run.model.seed = run.seed;
  auto apply = [&](auto& phase_config) {
    if (t.epochs >= 0) phase_config.epochs = t.epochs;
    if (t.batch > 0) phase_config.batch = t.batch;
    if (t.window > 0) phase_config.window = t.window;
    if (t.lr > 0) phase_config.optimizer.lr = t.lr;
  };
  if (phase == "pretrain") {
    apply(run.pretrain);
  } else {
    apply(run.finetune);
    if (t.lora_rank > 0) run.finetune.lora = LoraConfig{t.lora_rank, 2.0 * t.lora_rank};
  }
  const TrainResult result = train(run, load_container(run.dataset));
  if (as_json) {
    json history = json::array();
    for (const auto& s : result.history) history.push_back(s.to_json());
    out << json{{"phase", phase}, {"epochs", history}, {"checkpoint", t.out}}.dump() << '\n';
  } else {
    for (const auto& s : result.history) out << s.to_json().dump() << '\n';
  }
  return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& data, const std::string& record,
                 const std::string& features, const std::string& out_path, SamplerConfig sampler, bool as_json,
                 std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (data.empty() == features.empty()) throw UsageError("give exactly one of --data or --features");

  std::vector<DatasetRecord> inputs;
  if (!features.empty()) {
    DatasetRecord r;
    r.id = fs::path(features).stem().string();
    r.show_id = r.id;
    r.features = read_feature_dump(features);
    r.frame_rate = r.features.frame_rate;
    inputs.push_back(std::move(r));
  } else {
    for (auto& r : load_container(data).records)
      if (record.empty() || r.id == record) inputs.push_back(std::move(r));
    if (inputs.empty()) throw DataError("no record '" + record + "' in " + data);
  }

  const bool container_out = has_extension(out_path, ".sbl1");
  if (!container_out && inputs.size() > 1) throw UsageError("CSV output takes one record; pass --record");
  DatasetContainer generated;
  json summary = json::array();
  for (auto& r : inputs) {
    const GenerationResult g = generate(r.features, ckpt.config, ckpt.params, sampler);
    const auto n = static_cast<Eigen::Index>(g.sequence.size());
    summary.push_back({{"id", r.id}, {"frames", n}, {"seed", g.seed}});
    if (!container_out) {
      if (out_path.empty()) {
        write_light_csv(out, g.sequence);
      } else {
        write_light_csv(fs::path(out_path), g.sequence);
      }
      continue;
    }
    r.features.data = r.features.data.topRows(n).eval();
    r.tokens = g.sequence.tokens;
    generated.records.push_back(std::move(r));
  }
  if (container_out) save_container(out_path, generated);
  if (as_json) out << json{{"generated", summary}, {"sampler", sampler.to_json()}}.dump() << '\n';
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& truth, const std::string& record, bool as_json,
             std::ostream& out) {
  const auto p = read_light(pred, record);
  const auto t = read_light(truth, record);
  std::vector<LabelledPair> pairs;
  if (p.size() == 1 && t.size() == 1) {
    pairs.push_back({p[0].first, &p[0].second, &t[0].second});
  } else {
    for (const auto& [id, seq] : p) {
      auto it = std::find_if(t.begin(), t.end(), [&](const auto& e) { return e.first == id; });
      if (it == t.end()) throw DataError("record " + id + " has no reference");
      pairs.push_back({id, &seq, &it->second});
    }
  }
  const MetricsReport report = eval_metrics(pairs);
  if (as_json) {
    out << report.to_json().dump() << '\n';
  } else {
    out << "hue   RMSE " << report.hue.rmse << "  MAE " << report.hue.mae << '\n'
        << "value RMSE " << report.value.rmse << "  MAE " << report.value.mae << '\n'
        << "frames " << report.count << '\n';
  }
  return 0;
}

int cmd_render(const std::string& input, const std::string& record, int height, const std::string& out_path,
               bool as_json, std::ostream& out) {
  const auto seqs = read_light(input, record);
  if (seqs.size() != 1) throw UsageError("container holds several records; pass --record");
  render_strip(seqs[0].second, height, out_path);
  if (as_json) out << json{{"width", seqs[0].second.size()}, {"height", height}, {"out", out_path}}.dump() << '\n';
  return 0;
}

int cmd_synth(const std::string& rule, int records, int frames, std::uint64_t seed, const std::string& out_path,
              bool as_json, std::ostream& out) {
  const DatasetContainer c = rule == "impulse" ? synth::impulse_alignment_corpus(records, frames, seed).container
                                               : synth::make_corpus(synth::rule_from_id(rule), records, frames, seed);
  save_container(out_path, c);
  if (as_json) out << json{{"rule", rule}, {"records", records}, {"frames", frames}, {"out", out_path}}.dump() << '\n';
  return 0;
}

}  // namespace

int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Music-to-light token pipeline", "skiplight"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "Machine-readable output")->configurable(false);

  FrameInput frames;
  int threshold = kDefaultValueThreshold;
  std::string out_path;
  std::function<int()> action;

  auto* extract = app.add_subcommand("extract", "Tokenize frames into a light CSV");
  add_frame_input(extract, frames);
  extract->add_option("--threshold", threshold, "Value threshold v'");
  extract->add_option("--out", out_path, "CSV path (default: stdout)");
  extract->callback([&] { action = [&] { return cmd_extract(frames, threshold, out_path, as_json, out); }; });

  std::string audio, kind = "log_mel";
  int mel_bands = 128;
  auto* features = app.add_subcommand("features", "Audio features to a raw dump");
  features->add_option("--audio", audio, "WAV file")->required();
  features->add_option("--kind", kind, "log_mel, mel, mfcc or chroma");
  features->add_option("--mel-bands", mel_bands);
  features->add_option("--out", out_path, "Dump path")->required();
  features->callback([&] { action = [&] { return cmd_features(audio, kind, out_path, mel_bands, as_json, out); }; });

  std::string manifest;
  int min_frames = kMinRecordFrames;
  auto* build = app.add_subcommand("build", "Build a dataset container from a manifest");
  build->add_option("--manifest", manifest, "JSON manifest")->required();
  build->add_option("--out", out_path, "Container path")->required();
  build->add_option("--threshold", threshold, "Value threshold v'");
  build->add_option("--min-frames", min_frames, "Drop shorter records");
  build->callback([&] { action = [&] { return cmd_build(manifest, out_path, threshold, min_frames, as_json, out); }; });

  std::string frame;
  int kmax = 4;
  std::uint64_t seed = 0;
  auto* vmm_cmd = app.add_subcommand("vmm", "Fit von Mises mixtures to frame hues");
  add_frame_input(vmm_cmd, frames);
  vmm_cmd->add_option("--frame", frame, "Single .ppm frame");
  vmm_cmd->add_option("--threshold", threshold, "Value threshold v'");
  vmm_cmd->add_option("--kmax", kmax, "Largest K considered");
  vmm_cmd->add_option("--seed", seed);
  vmm_cmd->callback([&] { action = [&] { return cmd_vmm(frames, frame, threshold, kmax, seed, out); }; });

  TrainOptions pre_opts, fine_opts;
  auto* pretrain = app.add_subcommand("pretrain", "Masked music recovery pretraining");
  add_train_options(pretrain, pre_opts);
  pretrain->callback([&] { action = [&] { return cmd_train("pretrain", pre_opts, as_json, out); }; });
  auto* finetune = app.add_subcommand("finetune", "Supervised light-token training");
  add_train_options(finetune, fine_opts);
  finetune->add_option("--init", fine_opts.init, "Starting checkpoint (e.g. a pretrained one)");
  finetune->add_option("--lora-rank", fine_opts.lora_rank, "Train low-rank adapters on attention weights");
  finetune->callback([&] { action = [&] { return cmd_train("finetune", fine_opts, as_json, out); }; });

  std::string checkpoint, data, record, feature_dump;
  SamplerConfig sampler;
  auto* gen = app.add_subcommand("generate", "Sample a light sequence");
  gen->add_option("--checkpoint", checkpoint)->required();
  gen->add_option("--data", data, "Container supplying features");
  gen->add_option("--record", record, "Record id within --data");
  gen->add_option("--features", feature_dump, "Raw feature dump");
  gen->add_option("--out", out_path, "CSV, or .sbl1 container (default: CSV to stdout)");
  gen->add_option("--temperature", sampler.temperature);
  gen->add_option("--hue-threshold", sampler.hue_threshold);
  gen->add_option("--value-threshold", sampler.value_threshold);
  gen->add_option("--seed", sampler.seed);
  gen->add_option("--max-len", sampler.max_len);
  gen->callback([&] {
    action = [&] { return cmd_generate(checkpoint, data, record, feature_dump, out_path, sampler, as_json, out); };
  });

  std::string pred, truth;
  auto* eval = app.add_subcommand("eval", "RMSE/MAE between light sequences");
  eval->add_option("--pred", pred, "CSV or .sbl1")->required();
  eval->add_option("--truth", truth, "CSV or .sbl1")->required();
  eval->add_option("--record", record, "Restrict to one record id");
  eval->callback([&] { action = [&] { return cmd_eval(pred, truth, record, as_json, out); }; });

  std::string input;
  int height = 32;
  auto* render = app.add_subcommand("render", "Render a light sequence as a colour strip");
  render->add_option("--input", input, "CSV or .sbl1")->required();
  render->add_option("--record", record);
  render->add_option("--height", height);
  render->add_option("--out", out_path, ".ppm path")->required();
  render->callback([&] { action = [&] { return cmd_render(input, record, height, out_path, as_json, out); }; });

  std::string rule = "dominant-band";
  int records = 64, nframes = 128;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic rule corpus");
  synth_cmd->add_option("--rule", rule, "dominant-band, constant or impulse");
  synth_cmd->add_option("--records", records);
  synth_cmd->add_option("--frames", nframes);
  synth_cmd->add_option("--seed", seed);
  synth_cmd->add_option("--out", out_path, "Container path")->required();
  synth_cmd->callback([&] { action = [&] { return cmd_synth(rule, records, nframes, seed, out_path, as_json, out); }; });

  for (auto* sub : app.get_subcommands({})) sub->add_flag("--json", as_json, "Machine-readable output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  try {
    return action ? action() : 1;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const CLI::Error& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

int cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli(args, std::cout, std::cerr);
}

}  // namespace skiplight
