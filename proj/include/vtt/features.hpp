#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vtt {

/// Time-major feature matrix (one row per frame, clip or audio window).
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;  // rows * cols, row-major

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<float> values);

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

/// Vision features default to the ResNet pooled width; I3D uses 1024 and
/// VGGish audio 128.
inline constexpr std::size_t kResNetFeatureDim = 2048;
inline constexpr std::size_t kI3dFeatureDim = 1024;
inline constexpr std::size_t kVggishFeatureDim = 128;

// "VTTF" feature file:
//   bytes 0..3   magic "VTTF"
//   u32 LE       version (1)
//   u32 LE       T (rows)
//   u32 LE       D (cols)
//   T*D f32 LE   row-major values
inline constexpr char kFeatureMagic[4] = {'V', 'T', 'T', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 16;

FeatureMatrix read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m);

/// Stand-in for a clip without an audio stream: `t` all-zero rows.
FeatureMatrix dummy_audio(std::size_t t, std::size_t d_audio);

struct VideoSample {
  std::string id;
  FeatureMatrix frames;
  std::optional<FeatureMatrix> audio;
  std::vector<std::string> captions;
};

struct ManifestEntry {
  std::string id;
  std::string frame_file;                 // relative to the manifest directory
  std::optional<std::string> audio_file;  // null when the clip has no audio
  std::vector<std::string> captions;
};

/// JSON-lines list of clips: {"id", "frame_file", "audio_file", "captions"}.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string split;                 // "train" / "val"
  std::filesystem::path base_dir;    // resolves relative feature paths
};

/// Parses and validates a manifest (unique ids, nonempty captions, every
/// referenced feature file present).
DatasetManifest load_manifest(const std::filesystem::path& path, std::string split = {});
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

VideoSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<VideoSample> load_samples(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_videos = 200;
  std::size_t n_concepts = 8;
  std::size_t d_vision = 32;
  std::size_t d_audio = 8;
  std::size_t min_frames = 4;
  std::size_t max_frames = 12;
  std::size_t max_audio_rows = 4;
  double missing_audio_rate = 0.25;
  double noise_fraction = 0.1;  // noise RMS relative to the embedding RMS
};

struct SynthConcept {
  std::string noun;
  std::vector<float> vision;  // d_vision
  std::vector<float> audio;   // d_audio
};

struct SynthCorpus {
  DatasetManifest train;
  DatasetManifest val;
  std::vector<SynthConcept> concepts;
  // Sorted concept indices per video id, for oracle checks.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> video_concepts;
};

/// Reference captions for a (sorted) concept set; at least two paraphrases.
std::vector<std::string> synth_captions(const std::vector<std::string>& nouns);

/// Nouns available to the generator, in concept order.
const std::vector<std::string>& synth_nouns();

/// Writes features and train.jsonl / val.jsonl under `out_dir`. Fully
/// determined by `cfg`; the split is 90% train, 10% validation.
SynthCorpus synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace vtt
