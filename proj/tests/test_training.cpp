#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "support/oracles.hpp"
#include "support/suites.hpp"
#include "vtt/error.hpp"
#include "vtt/training.hpp"

namespace vtt {
namespace {

namespace fs = std::filesystem;

ScheduleConfig default_schedule(std::size_t d, std::size_t w) {
  ScheduleConfig s;
  s.kind = ScheduleKind::kDefault;
  s.d_model = d;
  s.warmup = w;
  return s;
}

TEST(Schedule, DefaultPeakAtWarmup) {
  const auto s = default_schedule(512, 10000);
  const double peak = lr_at(10000, s);
  EXPECT_NEAR(peak, 4.42e-4, 5e-7);
  EXPECT_NEAR(peak, std::pow(512.0, -0.5) * std::pow(10000.0, -0.5), 1e-18);
  // Both branches of the min agree at the peak.
  EXPECT_NEAR(std::pow(512.0, -0.5) * 10000.0 * std::pow(10000.0, -1.5), peak, 1e-18);
  EXPECT_LT(lr_at(9999, s), peak);
  EXPECT_LT(lr_at(10001, s), peak);
  EXPECT_THROW(lr_at(0, s), ContractError);
}

TEST(Schedule, DefaultMonotoneOnEachSide) {
  for (std::size_t w : {1u, 7u, 200u}) {
    const auto s = default_schedule(32, w);
    for (std::size_t t = 1; t < w; ++t) EXPECT_LT(lr_at(t, s), lr_at(t + 1, s));
    for (std::size_t t = w; t < w + 500; ++t) EXPECT_GT(lr_at(t, s), lr_at(t + 1, s));
  }
}

TEST(Schedule, SgdrRestartsAndHalfCycles) {
  ScheduleConfig s;
  s.kind = ScheduleKind::kSgdr;
  s.d_model = 32;
  s.warmup = 200;
  s.t0 = 400;
  s.t_mult = 2;
  const double hi = s.resolved_eta_max(), lo = s.resolved_eta_min();
  EXPECT_NEAR(hi, 1.0 / std::sqrt(32.0 * 200.0), 1e-18);
  EXPECT_NEAR(lo, hi / 100.0, 1e-18);
  const auto restarts = sgdr_restart_steps(s, 20000);
  ASSERT_GE(restarts.size(), 4u);
  EXPECT_EQ(restarts[0], 201u);
  EXPECT_EQ(restarts[1], 601u);
  EXPECT_EQ(restarts[2], 1401u);
  std::size_t len = s.t0;
  for (auto r : restarts) {
    EXPECT_NEAR(lr_at(r, s), hi, 1e-12);
    EXPECT_NEAR(lr_at(r + len / 2, s), (hi + lo) / 2.0, 1e-12);
    len *= s.t_mult;
  }
  EXPECT_NEAR(lr_at(200, s), hi, 1e-12);
  EXPECT_NEAR(lr_at(100, s), hi / 2, 1e-12);
  for (std::size_t t = 201; t < 6000; ++t) {
    EXPECT_LE(lr_at(t, s), hi + 1e-15);
    EXPECT_GE(lr_at(t, s), lo - 1e-15);
  }
}

TEST(Schedule, Validation) {
  ScheduleConfig s;
  s.eta_max = 1e-3;
  s.eta_min = 1e-2;
  EXPECT_THROW(s.validate(), ContractError);
  nlohmann::json j = {{"kind", "sgdr"}, {"warmup", 5}, {"bogus", 1}};
  ScheduleConfig t;
  EXPECT_THROW(from_json(j, t), FormatError);
}

std::vector<NamedParameter<double>> scalar_param(double value, double grad) {
  auto t = Tensor<double>::scalar(value, true);
  t.grad()[0] = grad;
  return {{"theta", t}};
}

TEST(Adam, ClosedFormFirstStep) {
  for (double g : {3.0, -0.25, 1e-3}) {
    auto p = scalar_param(1.0, g);
    Adam<double> adam(p);
    adam.step(0.01);
    const double expect = 1.0 - 0.01 * g / (std::abs(g) + 1e-9);
    EXPECT_NEAR(p[0].tensor.item(), expect, 1e-15);
    EXPECT_NEAR(p[0].tensor.item(), 1.0 - 0.01 * (g > 0 ? 1 : -1), 1e-8);
    EXPECT_NEAR(adam.first_moment(0)[0], 0.1 * g, 1e-15);
    EXPECT_NEAR(adam.second_moment(0)[0], 0.02 * g * g, 1e-15);
  }
}

TEST(Adam, ZeroGradientLeavesParameter) {
  auto p = scalar_param(0.5, 0.0);
  Adam<double> adam(p);
  adam.step(0.1);
  EXPECT_EQ(p[0].tensor.item(), 0.5);
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto a = Tensor<float>::from({1, 2}, {1, 2}, true);
  auto b = Tensor<float>::from({1, 1}, {3}, true);
  a.grad()[0] = 1.0f;
  b.grad()[0] = std::numeric_limits<float>::quiet_NaN();
  Adam<float> adam({{"a", a}, {"bad.weight", b}});
  try {
    adam.step(0.1);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.weight"), std::string::npos);
  }
  EXPECT_EQ(a.values()[0], 1.0f);
  EXPECT_EQ(adam.steps(), 0u);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  auto a = Tensor<double>::from({1, 2}, {0, 0}, true);
  a.grad()[0] = 3;
  a.grad()[1] = 4;
  std::vector<NamedParameter<double>> p{{"a", a}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(p, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(EarlyStop, Selection) {
  const std::vector<EpochScore> h = {{1, 0.1}, {2, 0.3}, {3, 0.2}};
  EXPECT_EQ(early_stop_select(std::span<const EpochScore>(h)), 2u);
  const std::vector<EpochScore> tie = {{1, 0.2}, {2, 0.2}};
  EXPECT_EQ(early_stop_select(std::span<const EpochScore>(tie)), 1u);
  const std::vector<EpochScore> one = {{4, 0.0}};
  EXPECT_EQ(early_stop_select(std::span<const EpochScore>(one)), 4u);
  EXPECT_THROW(early_stop_select(std::span<const EpochScore>()), ContractError);
  const std::vector<double> s = {0.5, 0.7, 0.7};
  EXPECT_EQ(early_stop_select(std::span<const double>(s)), 1u);
}

TEST(Loss, AppendedPadNeverChangesLoss) {
  for (auto kind : {AttentionKind::kMemoryScaledDot, AttentionKind::kXLinear}) {
    const auto cfg = oracle::tiny_config(kind);
    Rng rng(3);
    TransformerModel<float> m(cfg, rng);
    const auto s = oracle::random_sample(rng, cfg);
    TokenSequence ids = {2, 5, 6, 7, 3};
    const float base = caption_xe_sum(m, s, ids, 0).item();
    EXPECT_EQ(count_targets(ids, 0), 4u);
    for (int extra = 1; extra <= 2; ++extra) {
      ids.push_back(0);
      EXPECT_EQ(caption_xe_sum(m, s, ids, 0).item(), base);
      EXPECT_EQ(count_targets(ids, 0), 4u);
    }
    const std::vector<const VideoSample*> clips = {&s, &s};
    const TokenSequence plain = {2, 5, 6, 7, 3};
    const std::vector<std::span<const int>> caps = {plain, ids};
    EXPECT_EQ(mean_xe_loss(m, clips, caps, 0), static_cast<double>(base) / 4.0);
  }
}

// Clips captioned from the tiny vocabulary.
CaptionedClips tiny_split(std::uint64_t seed, std::size_t n, const ModelConfig& cfg) {
  Rng rng(seed);
  const auto vocab = oracle::tiny_vocab();
  std::vector<VideoSample> clips;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = oracle::random_sample(rng, cfg, i % 2 == 0);
    s.id = "c" + std::to_string(i);
    for (int r = 0; r < 2; ++r) s.captions.push_back(decode(oracle::random_caption(rng, 4), vocab));
    clips.push_back(std::move(s));
  }
  return prepare_clips(std::move(clips), vocab, cfg.l_max);
}

TEST(PrepareClips, TruncatesToLmax) {
  auto cfg = oracle::tiny_config(AttentionKind::kMemoryScaledDot);
  Rng rng(1);
  std::vector<VideoSample> clips(1, oracle::random_sample(rng, cfg));
  clips[0].captions = {"a cat runs on the red mat a dog"};
  const auto data = prepare_clips(clips, oracle::tiny_vocab(), 4);
  const auto& ids = data.captions[0][0];
  ASSERT_EQ(ids.size(), 6u);
  EXPECT_EQ(ids.front(), 2);
  EXPECT_EQ(ids.back(), 3);
  EXPECT_EQ(data.reference_words[0][0].size(), 9u);
}

TrainRunConfig quiet_run(std::size_t epochs, std::size_t batch) {
  TrainRunConfig r;
  r.epochs = epochs;
  r.batch_size = batch;
  r.seed = 5;
  return r;
}

TEST(TrainXe, OneEpochOneBatchReducesThatBatchLoss) {
  const auto cfg = oracle::tiny_config(AttentionKind::kMemoryScaledDot);
  const auto train = tiny_split(1, 4, cfg);
  const auto val = tiny_split(2, 2, cfg);
  Rng rng(3);
  TransformerModel<float> m(cfg, rng);
  const double before = validation_loss(m, train, 0);
  ScheduleConfig s;
  s.kind = ScheduleKind::kConstant;
  s.constant_lr = 1e-3;
  const auto result = train_xe(m, oracle::tiny_vocab(), train, val, s, quiet_run(1, 8));
  EXPECT_EQ(result.steps, 1u);
  EXPECT_EQ(result.history.size(), 1u);
  // The single evaluation is the best, so the model keeps the updated weights.
  EXPECT_LT(validation_loss(m, train, 0), before);
}

TEST(TrainXe, HistoryBestAndDeterminism) {
  const auto cfg = oracle::tiny_config(AttentionKind::kXLinear);
  const auto train = tiny_split(1, 6, cfg);
  const auto val = tiny_split(2, 3, cfg);
  ScheduleConfig s;
  s.kind = ScheduleKind::kSgdr;
  s.d_model = cfg.d_model;
  s.warmup = 3;
  s.t0 = 4;
  auto run_once = [&] {
    Rng rng(3);
    TransformerModel<float> m(cfg, rng);
    auto r = train_xe(m, oracle::tiny_vocab(), train, val, s, quiet_run(4, 2));
    std::vector<float> values;
    for (const auto& p : m.parameters()) values.insert(values.end(), p.tensor.values().begin(), p.tensor.values().end());
    return std::make_pair(r, values);
  };
  const auto [a, va] = run_once();
  const auto [b, vb] = run_once();
  EXPECT_EQ(va, vb);
  ASSERT_EQ(a.history.size(), 4u);
  EXPECT_EQ(a.steps, 24u);  // 12 (clip, caption) pairs, batches of 2, 4 epochs
  double best = -1;
  for (const auto& h : a.history) best = std::max(best, h.cider_d);
  EXPECT_EQ(a.history[a.best_index].cider_d, best);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].cider_d, b.history[i].cider_d);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  EXPECT_FALSE(a.initial.train_loss.has_value());
}

TEST(TrainXe, Preconditions) {
  const auto cfg = oracle::tiny_config(AttentionKind::kMemoryScaledDot);
  const auto train = tiny_split(1, 2, cfg);
  Rng rng(3);
  TransformerModel<float> m(cfg, rng);
  CaptionedClips empty;
  EXPECT_THROW(train_xe(m, oracle::tiny_vocab(), empty, train, {}, quiet_run(1, 1)), ContractError);
  EXPECT_THROW(train_xe(m, oracle::tiny_vocab(), train, empty, {}, quiet_run(1, 1)), ContractError);
}

TEST(TrainXe, CheckpointsAndHistoryFile) {
  const auto dir = fs::temp_directory_path() / "vtt_train_ckpt";
  fs::remove_all(dir);
  const auto cfg = oracle::tiny_config(AttentionKind::kMemoryScaledDot);
  const auto train = tiny_split(1, 4, cfg);
  const auto val = tiny_split(2, 2, cfg);
  Rng rng(3);
  TransformerModel<float> m(cfg, rng);
  auto run = quiet_run(2, 2);
  run.checkpoint_dir = dir;
  ScheduleConfig s;
  s.kind = ScheduleKind::kConstant;
  s.constant_lr = 1e-3;
  const auto r = train_xe(m, oracle::tiny_vocab(), train, val, s, run);
  EXPECT_TRUE(fs::exists(dir / "epoch_001.vttc"));
  EXPECT_TRUE(fs::exists(dir / "epoch_002.vttc"));
  EXPECT_EQ(r.best_checkpoint, dir / "best.vttc");
  std::ifstream in(dir / "history.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("cider_d"));
    ++lines;
  }
  EXPECT_EQ(lines, 3u);  // initial + two epochs
  fs::remove_all(dir);
}

TEST(Evaluate, DeterministicAndComposed) {
  const auto cfg = oracle::tiny_config(AttentionKind::kMemoryScaledDot);
  const auto val = tiny_split(4, 3, cfg);
  Rng rng(3);
  TransformerModel<float> m(cfg, rng);
  const auto vocab = oracle::tiny_vocab();
  const auto a = evaluate(m, val.clips, vocab);
  const auto b = evaluate(m, val.clips, vocab);
  EXPECT_EQ(a.bleu4, b.bleu4);
  EXPECT_EQ(a.cider_d, b.cider_d);
  const auto caps = caption_clips(m, val.clips, vocab);
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> refs;
  for (const auto& c : val.clips) {
    ids.push_back(c.id);
    refs.push_back(c.captions);
  }
  const auto manual = score_captions(ids, caps, refs);
  EXPECT_EQ(manual.cider, a.cider);
  EXPECT_EQ(manual.bleu4, a.bleu4);
  std::vector<std::string> perfect;
  for (const auto& r : refs) perfect.push_back(r[0]);
  EXPECT_DOUBLE_EQ(score_captions(ids, perfect, refs).bleu4, 1.0);
}

}  // namespace
}  // namespace vtt
