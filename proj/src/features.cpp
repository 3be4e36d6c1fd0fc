#include "vtt/features.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vtt/error.hpp"
#include "vtt/rng.hpp"

namespace vtt {

namespace fs = std::filesystem;
using nlohmann::json;

FeatureMatrix::FeatureMatrix(std::size_t r, std::size_t c, std::vector<float> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("feature matrix needs T >= 1 and D >= 1, got " + std::to_string(rows) +
                         "x" + std::to_string(cols));
  }
  if (values.size() != rows * cols) {
    throw DimensionError("feature matrix " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " given " + std::to_string(values.size()) + " values");
  }
}

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

FeatureMatrix read_feature_file(const fs::path& path) {
  const std::string bytes = slurp(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kFeatureHeaderBytes) {
    throw LengthError(path.string() + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(p, kFeatureMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic, expected VTTF");
  }
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFeatureVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::size_t rows = get_u32(p + 8);
  const std::size_t cols = get_u32(p + 12);
  if (rows == 0 || cols == 0) throw FormatError(path.string() + ": empty matrix in header");
  const std::size_t expected = kFeatureHeaderBytes + rows * cols * 4;
  if (bytes.size() < expected) {
    throw LengthError(path.string() + ": payload holds " + std::to_string(bytes.size()) +
                      " bytes, header promises " + std::to_string(expected));
  }
  if (bytes.size() > expected) {
    throw FormatError(path.string() + ": " + std::to_string(bytes.size() - expected) +
                      " trailing bytes after payload");
  }
  std::vector<float> values(rows * cols);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = std::bit_cast<float>(get_u32(p + kFeatureHeaderBytes + 4 * i));
    if (!std::isfinite(v)) {
      throw DataError(path.string() + ": non-finite value at row " + std::to_string(i / cols) +
                      ", col " + std::to_string(i % cols));
    }
    values[i] = v;
  }
  return FeatureMatrix(rows, cols, std::move(values));
}

void write_feature_file(const fs::path& path, const FeatureMatrix& m) {
  if (m.rows == 0 || m.cols == 0 || m.values.size() != m.rows * m.cols) {
    throw DimensionError("write_feature_file: inconsistent matrix");
  }
  std::string buf(kFeatureMagic, 4);
  buf.reserve(kFeatureHeaderBytes + 4 * m.values.size());
  put_u32(buf, kFeatureVersion);
  put_u32(buf, static_cast<std::uint32_t>(m.rows));
  put_u32(buf, static_cast<std::uint32_t>(m.cols));
  for (float v : m.values) put_u32(buf, std::bit_cast<std::uint32_t>(v));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("error while writing " + path.string());
}

FeatureMatrix dummy_audio(std::size_t t, std::size_t d_audio) {
  if (t == 0) throw ContractError("dummy_audio: t must be >= 1");
  return FeatureMatrix(t, d_audio, std::vector<float>(t * d_audio, 0.0f));
}

// ---------------------------------------------------------------------------
// Manifests

DatasetManifest load_manifest(const fs::path& path, std::string split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  DatasetManifest manifest;
  manifest.split = std::move(split);
  manifest.base_dir = path.parent_path();
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    ManifestEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.frame_file = j.at("frame_file").get<std::string>();
      const auto& audio = j.at("audio_file");
      if (!audio.is_null()) e.audio_file = audio.get<std::string>();
      e.captions = j.at("captions").get<std::vector<std::string>>();
    } catch (const json::exception& ex) {
      throw FormatError(where + ": " + ex.what());
    }
    if (e.captions.empty()) throw FormatError(where + ": entry '" + e.id + "' has no captions");
    if (!ids.insert(e.id).second) throw FormatError(where + ": duplicate id '" + e.id + "'");
    if (!fs::exists(manifest.base_dir / e.frame_file)) {
      throw IoError(where + ": missing frame file " + e.frame_file);
    }
    if (e.audio_file && !fs::exists(manifest.base_dir / *e.audio_file)) {
      throw IoError(where + ": missing audio file " + *e.audio_file);
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : manifest.entries) {
    json j;
    j["id"] = e.id;
    j["frame_file"] = e.frame_file;
    j["audio_file"] = e.audio_file ? json(*e.audio_file) : json(nullptr);
    j["captions"] = e.captions;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("error while writing " + path.string());
}

VideoSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
  VideoSample s;
  s.id = entry.id;
  s.frames = read_feature_file(manifest.base_dir / entry.frame_file);
  if (entry.audio_file) s.audio = read_feature_file(manifest.base_dir / *entry.audio_file);
  s.captions = entry.captions;
  return s;
}

std::vector<VideoSample> load_samples(const DatasetManifest& manifest) {
  std::vector<VideoSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back(load_sample(manifest, e));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const std::vector<std::string>& synth_nouns() {
  static const std::vector<std::string> nouns{"dog", "cat", "car", "bus", "man", "boy",
                                              "cow", "pig", "cup", "hat", "box", "bed",
                                              "fan", "toy", "pen", "egg"};
  return nouns;
}

std::vector<std::string> synth_captions(const std::vector<std::string>& nouns) {
  if (nouns.size() == 1) {
    const std::string a = "a " + nouns[0];
    return {a + " is shown", "there is " + a + " in the video", a + " is in the video", "the video shows " + a,
            "we see " + a};
  }
  if (nouns.size() == 2) {
    const std::string a = "a " + nouns[0];
    const std::string b = "a " + nouns[1];
    return {a + " and " + b + " are shown", "there is " + a + " with " + b, a + " and " + b + " are in the video",
            "the video shows " + a + " and " + b, "we see " + a + " with " + b};
  }
  throw ContractError("synth_captions: expected one or two nouns");
}

namespace {

std::vector<float> gaussian_vector(Rng& rng, std::size_t d) {
  std::vector<float> v(d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

FeatureMatrix noisy_rows(Rng& rng, const std::vector<const std::vector<float>*>& sources,
                         std::size_t rows, double noise_fraction) {
  const std::size_t d = sources.front()->size();
  std::vector<float> values(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& e = *sources[r % sources.size()];
    double sq = 0.0;
    for (float x : e) sq += double(x) * x;
    const double sigma = noise_fraction * std::sqrt(sq / double(d));
    for (std::size_t c = 0; c < d; ++c) values[r * d + c] = static_cast<float>(e[c] + sigma * rng.normal());
  }
  return FeatureMatrix(rows, d, std::move(values));
}

std::string video_id(std::size_t i) {
  std::ostringstream os;
  os << "vid" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

SynthCorpus synth_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  if (cfg.n_concepts < 2) throw ContractError("synth_dataset: n_concepts must be >= 2");
  if (cfg.n_concepts > synth_nouns().size()) {
    throw ContractError("synth_dataset: at most " + std::to_string(synth_nouns().size()) + " concepts");
  }
  if (cfg.n_videos < 10) throw ContractError("synth_dataset: n_videos must be >= 10");
  if (cfg.d_vision == 0 || cfg.d_audio == 0) throw ContractError("synth_dataset: zero feature width");
  if (cfg.min_frames == 0 || cfg.max_frames < cfg.min_frames || cfg.max_audio_rows == 0) {
    throw ContractError("synth_dataset: invalid frame range");
  }

  std::error_code ec;
  fs::create_directories(out_dir / "features", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "features").string() + ": " + ec.message());

  Rng rng(cfg.seed);
  SynthCorpus corpus;
  for (std::size_t c = 0; c < cfg.n_concepts; ++c) {
    SynthConcept concept_;
    concept_.noun = synth_nouns()[c];
    concept_.vision = gaussian_vector(rng, cfg.d_vision);
    concept_.audio = gaussian_vector(rng, cfg.d_audio);
    corpus.concepts.push_back(std::move(concept_));
  }

  std::vector<ManifestEntry> entries;
  for (std::size_t v = 0; v < cfg.n_videos; ++v) {
    std::vector<std::size_t> picks{static_cast<std::size_t>(rng.uniform_int(0, cfg.n_concepts - 1))};
    if (rng.uniform() < 0.5) {
      std::size_t second;
      do {
        second = static_cast<std::size_t>(rng.uniform_int(0, cfg.n_concepts - 1));
      } while (second == picks[0]);
      picks.push_back(second);
    }
    std::sort(picks.begin(), picks.end());

    std::vector<const std::vector<float>*> vision_src, audio_src;
    std::vector<std::string> nouns;
    for (auto c : picks) {
      vision_src.push_back(&corpus.concepts[c].vision);
      audio_src.push_back(&corpus.concepts[c].audio);
      nouns.push_back(corpus.concepts[c].noun);
    }
    const auto t_v = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_frames), static_cast<std::int64_t>(cfg.max_frames)));
    const FeatureMatrix frames = noisy_rows(rng, vision_src, t_v, cfg.noise_fraction);

    ManifestEntry e;
    e.id = video_id(v);
    e.frame_file = "features/" + e.id + ".frames.vttf";
    write_feature_file(out_dir / e.frame_file, frames);
    if (rng.uniform() >= cfg.missing_audio_rate) {
      const auto t_a = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(cfg.max_audio_rows)));
      const FeatureMatrix audio = noisy_rows(rng, audio_src, t_a, cfg.noise_fraction);
      e.audio_file = "features/" + e.id + ".audio.vttf";
      write_feature_file(out_dir / *e.audio_file, audio);
    }
    e.captions = synth_captions(nouns);
    corpus.video_concepts.emplace_back(e.id, picks);
    entries.push_back(std::move(e));
  }

  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const std::size_t n_val = cfg.n_videos / 10;
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  corpus.train.split = "train";
  corpus.train.base_dir = out_dir;
  corpus.val.split = "val";
  corpus.val.base_dir = out_dir;
  for (auto i : train_idx) corpus.train.entries.push_back(entries[i]);
  for (auto i : val_idx) corpus.val.entries.push_back(entries[i]);
  save_manifest(corpus.train, out_dir / "train.jsonl");
  save_manifest(corpus.val, out_dir / "val.jsonl");
  return corpus;
}

}  // namespace vtt
