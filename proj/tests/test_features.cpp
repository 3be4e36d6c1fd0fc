#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>

#include "vtt/error.hpp"
#include "vtt/features.hpp"

namespace vtt {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("vtt_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

TEST(FeatureFile, RoundTripIsExact) {
  TempDir d("ff_roundtrip");
  FeatureMatrix m(2, 3, {1.5f, -0.0f, 3e-38f, 1e30f, -7.25f, 0.1f});
  write_feature_file(d.path() / "a.vttf", m);
  write_feature_file(d.path() / "b.vttf", m);
  EXPECT_EQ(read_feature_file(d.path() / "a.vttf"), m);
  EXPECT_EQ(slurp(d.path() / "a.vttf"), slurp(d.path() / "b.vttf"));
}

TEST(FeatureFile, HeaderLayout) {
  TempDir d("ff_header");
  FeatureMatrix m(300, 2048, std::vector<float>(300 * 2048, 0.5f));
  write_feature_file(d.path() / "big.vttf", m);
  const auto bytes = slurp(d.path() / "big.vttf");
  ASSERT_EQ(bytes.size(), kFeatureHeaderBytes + 300 * 2048 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "VTTF");
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 300u);
  EXPECT_EQ(u32(12), 2048u);
  // 0.5f little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 3]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 2]), 0x00);
}

TEST(FeatureFile, MalformedInputs) {
  TempDir d("ff_bad");
  FeatureMatrix m(2, 2, {1, 2, 3, 4});
  write_feature_file(d.path() / "ok.vttf", m);
  const auto good = slurp(d.path() / "ok.vttf");

  auto bad_magic = good;
  bad_magic[0] = 'X';
  spit(d.path() / "magic.vttf", bad_magic);
  EXPECT_THROW(read_feature_file(d.path() / "magic.vttf"), FormatError);

  spit(d.path() / "short.vttf", good.substr(0, good.size() - 2));
  EXPECT_THROW(read_feature_file(d.path() / "short.vttf"), LengthError);

  spit(d.path() / "hdr.vttf", good.substr(0, 10));
  EXPECT_THROW(read_feature_file(d.path() / "hdr.vttf"), LengthError);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 16 + 4, &q, 4);
  spit(d.path() / "nan.vttf", nan);
  EXPECT_THROW(read_feature_file(d.path() / "nan.vttf"), DataError);

  EXPECT_THROW(read_feature_file(d.path() / "absent.vttf"), IoError);
}

TEST(DummyAudio, AllZero) {
  const auto a = dummy_audio(1, 128);
  EXPECT_EQ(a.rows, 1u);
  EXPECT_EQ(a.cols, 128u);
  double s = 0;
  for (float v : a.values) s += v;
  EXPECT_EQ(s, 0.0);
  EXPECT_THROW(dummy_audio(0, 4), ContractError);
}

TEST(Manifest, RejectsDuplicateIdsAndMissingFiles) {
  TempDir d("manifest");
  write_feature_file(d.path() / "f.vttf", FeatureMatrix(1, 2, {1, 2}));
  spit(d.path() / "dup.jsonl",
       "{\"id\":\"a\",\"frame_file\":\"f.vttf\",\"audio_file\":null,\"captions\":[\"x\"]}\n"
       "{\"id\":\"a\",\"frame_file\":\"f.vttf\",\"audio_file\":null,\"captions\":[\"y\"]}\n");
  EXPECT_THROW(load_manifest(d.path() / "dup.jsonl"), FormatError);
  spit(d.path() / "missing.jsonl",
       "{\"id\":\"a\",\"frame_file\":\"nope.vttf\",\"audio_file\":null,\"captions\":[\"x\"]}\n");
  EXPECT_THROW(load_manifest(d.path() / "missing.jsonl"), IoError);
  spit(d.path() / "nocap.jsonl", "{\"id\":\"a\",\"frame_file\":\"f.vttf\",\"audio_file\":null,\"captions\":[]}\n");
  EXPECT_THROW(load_manifest(d.path() / "nocap.jsonl"), FormatError);
}

SynthConfig small_synth(std::uint64_t seed, std::size_t videos) {
  SynthConfig c;
  c.seed = seed;
  c.n_videos = videos;
  return c;
}

TEST(Synth, SplitAndDeterminism) {
  TempDir a("synth_a"), b("synth_b");
  const auto ca = synth_dataset(small_synth(7, 100), a.path());
  synth_dataset(small_synth(7, 100), b.path());
  EXPECT_EQ(ca.train.entries.size(), 90u);
  EXPECT_EQ(ca.val.entries.size(), 10u);
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    EXPECT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
  }
  const auto loaded = load_manifest(a.path() / "train.jsonl");
  EXPECT_EQ(loaded.entries.size(), 90u);
}

TEST(Synth, CaptionsArePureFunctionOfConcepts) {
  TempDir d("synth_caps");
  const auto c = synth_dataset(small_synth(3, 120), d.path());
  std::map<std::string, std::vector<std::string>> by_id;
  for (const auto* m : {&c.train, &c.val})
    for (const auto& e : m->entries) by_id[e.id] = e.captions;
  std::map<std::vector<std::size_t>, std::vector<std::string>> by_concepts;
  for (const auto& [id, picks] : c.video_concepts) {
    const auto& caps = by_id.at(id);
    EXPECT_GE(caps.size(), 2u);
    auto [it, fresh] = by_concepts.emplace(picks, caps);
    if (!fresh) EXPECT_EQ(it->second, caps);
  }
}

// A nearest-embedding classifier over the noiseless concept vectors recovers
// every video's concept set, hence its caption set.
TEST(Synth, OracleClassifierIsPerfect) {
  TempDir d("synth_oracle");
  const auto c = synth_dataset(small_synth(7, 200), d.path());
  std::map<std::string, ManifestEntry> entries;
  for (const auto* m : {&c.train, &c.val})
    for (const auto& e : m->entries) entries[e.id] = e;

  double noise_sq = 0, signal_sq = 0;
  for (const auto& [id, picks] : c.video_concepts) {
    const auto frames = read_feature_file(d.path() / entries.at(id).frame_file);
    std::vector<std::size_t> found;
    for (std::size_t r = 0; r < frames.rows; ++r) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < c.concepts.size(); ++k) {
        double dist = 0;
        for (std::size_t j = 0; j < frames.cols; ++j) {
          const double diff = frames.at(r, j) - c.concepts[k].vision[j];
          dist += diff * diff;
        }
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      noise_sq += best_d;
      for (float x : c.concepts[best].vision) signal_sq += double(x) * x;
      if (std::find(found.begin(), found.end(), best) == found.end()) found.push_back(best);
      for (std::size_t j = 0; j < frames.cols; ++j) ASSERT_TRUE(std::isfinite(frames.at(r, j)));
    }
    std::sort(found.begin(), found.end());
    EXPECT_EQ(found, picks) << id;
    std::vector<std::string> nouns;
    for (auto k : found) nouns.push_back(c.concepts[k].noun);
    EXPECT_EQ(synth_captions(nouns), entries.at(id).captions);
  }
  const double ratio = std::sqrt(noise_sq / signal_sq);
  EXPECT_GT(ratio, 0.05);
  EXPECT_LT(ratio, 0.15);
}

TEST(Synth, Preconditions) {
  TempDir d("synth_pre");
  auto cfg = small_synth(1, 9);
  EXPECT_THROW(synth_dataset(cfg, d.path()), ContractError);
  cfg.n_videos = 20;
  cfg.n_concepts = 1;
  EXPECT_THROW(synth_dataset(cfg, d.path()), ContractError);
}

}  // namespace
}  // namespace vtt
