#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "support/oracles.hpp"
#include "support/suites.hpp"
#include "vtt/error.hpp"
#include "vtt/scst.hpp"

namespace vtt {
namespace {

namespace fs = std::filesystem;
using oracle::ScstFixture;

std::span<const VideoSample* const> span_of(const std::vector<const VideoSample*>& v) { return v; }
std::span<const std::vector<Words>* const> span_of(const std::vector<const std::vector<Words>*>& v) { return v; }

TEST(Reward, MixedRewardIsLinear) {
  const auto refs = std::vector<Words>{normalize_words("a cat runs on the mat"), normalize_words("the cat runs")};
  const auto cand = normalize_words("a cat runs on a mat");
  RewardConfig rc;
  rc.idf = compute_idf({refs, {normalize_words("a dog")}});
  const double c = cider_sentence(cand, refs, rc.idf, CiderVariant::kD);
  const double b = bleu4(cand, refs, true);
  rc.lambda_cider = 1;
  rc.lambda_bleu4 = 0;
  EXPECT_EQ(mixed_reward(cand, refs, rc), c);
  rc.lambda_cider = 0;
  rc.lambda_bleu4 = 1;
  EXPECT_EQ(mixed_reward(cand, refs, rc), b);
  rc.lambda_cider = 1;
  EXPECT_EQ(mixed_reward(cand, refs, rc), c + b);
}

TEST(Reward, ConfigValidationAndJson) {
  RewardConfig rc;
  rc.n_samples = 0;
  EXPECT_THROW(rc.validate(), ContractError);
  RewardConfig ok;
  nlohmann::json j = {{"lambda_cider", 0.5}, {"n_samples", 3}};
  from_json(j, ok);
  EXPECT_EQ(ok.n_samples, 3u);
  EXPECT_EQ(ok.lambda_cider, 0.5);
  j["lambda_meteor"] = 1;
  EXPECT_THROW(from_json(j, ok), FormatError);
}

TEST(ScstGradient, FrozenAdvantageSurrogateMatchesFiniteDifferences) {
  for (auto kind : {AttentionKind::kMemoryScaledDot, AttentionKind::kXLinear}) {
    for (double temp : {1.0, 0.7}) {
      const auto r = oracle::scst_fd(kind, 31, 120, temp);
      EXPECT_GT(r.nonzero_advantages, 0u);
      EXPECT_LT(r.fd.max_rel_error, 1e-4) << to_string(kind) << " T=" << temp << " worst " << r.fd.worst;
    }
  }
}

TEST(ScstGradient, ZeroAdvantagesGiveExactlyZeroGradient) {
  for (auto kind : {AttentionKind::kMemoryScaledDot, AttentionKind::kXLinear})
    EXPECT_EQ(oracle::zero_advantage_max_grad(kind, 5), 0.0);
}

TEST(ScstGradient, ColdSamplingDegeneratesToZeroGradient) {
  auto f = oracle::scst_fixture(AttentionKind::kMemoryScaledDot, 8, 1e-4);
  Rng init(1);
  TransformerModel<double> m(f.cfg, init);
  Rng rng(2);
  const auto clips = f.clip_ptrs();
  const auto refs = f.ref_ptrs();
  const auto trace = scst_batch_step(m, span_of(clips), span_of(refs), f.rc, f.vocab, rng);
  for (const auto& c : trace.clips)
    for (const auto& s : c.samples) {
      EXPECT_EQ(s.ids, c.baseline);
      EXPECT_EQ(s.advantage, 0.0);
    }
  EXPECT_EQ(trace.loss, 0.0);
  for (const auto& p : m.parameters())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) ASSERT_EQ(g, 0.0);
}

TEST(ScstGradient, UnitAdvantageIsLikelihoodAscent) {
  auto f = oracle::scst_fixture(AttentionKind::kXLinear, 9, 1.0);
  Rng init(1);
  TransformerModel<double> m(f.cfg, init);
  ScstBatchTrace trace;
  ScstClipTrace ct;
  ct.id = "only";
  ScstRollout r;
  r.ids = {2, 5, 7, 3};
  r.advantage = 1.0;
  ct.samples.push_back(r);
  trace.clips.push_back(ct);
  const std::vector<const VideoSample*> clips = {&f.clips[0]};
  backward(scst_surrogate_loss(m, span_of(clips), trace, f.rc));
  std::vector<std::vector<double>> got;
  for (const auto& p : m.parameters()) {
    got.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    p.tensor.zero_grad();
  }
  const std::span<const int> ids(r.ids);
  const auto logits = m.forward_teacher_forced(f.clips[0], ids.first(3));
  backward(scale(sum(pick(log_softmax_lastdim(logits), ids.subspan(1))), -1.0));
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto want = m.parameters()[i].tensor.grad();
    for (std::size_t j = 0; j < want.size(); ++j) ASSERT_NEAR(got[i][j], want[j], 1e-12);
  }
}

TEST(ScstTrace, AdvantageSignsAndValues) {
  auto f = oracle::scst_fixture(AttentionKind::kMemoryScaledDot, 12, 1.0);
  Rng init(1);
  TransformerModel<double> m(f.cfg, init);
  Rng rng(2);
  const auto clips = f.clip_ptrs();
  const auto refs = f.ref_ptrs();
  const auto trace = scst_rollouts(m, span_of(clips), span_of(refs), f.rc, f.vocab, rng);
  for (std::size_t b = 0; b < trace.clips.size(); ++b) {
    const auto& c = trace.clips[b];
    ASSERT_EQ(c.samples.size(), f.rc.n_samples);
    EXPECT_EQ(c.baseline_reward, mixed_reward(normalize_words(decode(c.baseline, f.vocab)), f.refs[b], f.rc));
    for (const auto& s : c.samples) {
      const double diff = s.reward - c.baseline_reward;
      EXPECT_EQ(s.advantage, diff);
      EXPECT_EQ(s.advantage > 0, diff > 0);
      EXPECT_EQ(s.advantage < 0, diff < 0);
      EXPECT_EQ(s.reward, mixed_reward(normalize_words(decode(s.ids, f.vocab)), f.refs[b], f.rc));
    }
  }
  const auto j = trace_json(trace, f.vocab);
  EXPECT_EQ(j["clips"].size(), 2u);
}

// Rewards on a dyadic grid make r + c exact, so the shifted advantages and
// the loss are bit-identical. Generic rewards agree to rounding.
TEST(ScstTrace, ConstantRewardOffsetLeavesLossUnchanged) {
  auto f = oracle::scst_fixture(AttentionKind::kXLinear, 14, 1.0);
  Rng init(1);
  TransformerModel<double> m(f.cfg, init);
  const auto clips = f.clip_ptrs();
  const auto refs = f.ref_ptrs();
  auto dyadic = [](const Words& c, const std::vector<Words>& r) {
    double hits = 0;
    for (const auto& w : c) hits += std::count(r[0].begin(), r[0].end(), w) > 0 ? 1 : 0;
    return hits / 8.0;
  };
  auto run = [&](const RewardFn& fn) {
    Rng rng(4);
    return scst_rollouts(m, span_of(clips), span_of(refs), f.rc, f.vocab, rng, fn);
  };
  auto loss_of = [&](const ScstBatchTrace& t) { return scst_surrogate_loss(m, span_of(clips), t, f.rc).item(); };

  const auto base = run(dyadic);
  const auto shifted = run([&](const Words& c, const std::vector<Words>& r) { return dyadic(c, r) + 3.0; });
  EXPECT_EQ(loss_of(base), loss_of(shifted));

  const RewardFn mixed = [&](const Words& c, const std::vector<Words>& r) { return mixed_reward(c, r, f.rc); };
  const auto a = run(mixed);
  const auto b = run([&](const Words& c, const std::vector<Words>& r) { return mixed(c, r) + 0.37; });
  EXPECT_NEAR(loss_of(a), loss_of(b), 1e-12);
}

// The batch advantage estimates E[r(sample)] - r(greedy). A second,
// independent Monte Carlo run must agree within a few standard errors, and a
// policy concentrated on the greedy caption drives it to zero.
TEST(ScstTrace, MeanAdvantageMatchesIndependentEstimate) {
  auto f = oracle::scst_fixture(AttentionKind::kMemoryScaledDot, 16, 1.0);
  Rng init(1);
  TransformerModel<double> m(f.cfg, init);
  const std::vector<const VideoSample*> clips = {&f.clips[0]};
  const std::vector<const std::vector<Words>*> refs = {&f.refs[0]};
  Rng rng(5);
  double sum = 0, sq = 0;
  const std::size_t steps = 1000;
  for (std::size_t i = 0; i < steps; ++i) {
    const auto t = scst_rollouts(m, span_of(clips), span_of(refs), f.rc, f.vocab, rng);
    const double a = t.mean_advantage();
    sum += a;
    sq += a * a;
  }
  const double mean = sum / steps;
  const double se = std::sqrt((sq / steps - mean * mean) / steps);

  const auto greedy = greedy_decode(m, f.clips[0], SequenceMarkers::from(f.vocab), f.cfg.l_max);
  const double r_greedy = mixed_reward(normalize_words(decode(greedy, f.vocab)), f.refs[0], f.rc);
  Rng other(999);
  const std::size_t draws = 5000;
  double mc = 0;
  for (const auto& s : sample_decode(m, f.clips[0], draws, 1.0, other, SequenceMarkers::from(f.vocab), f.cfg.l_max))
    mc += mixed_reward(normalize_words(decode(s.ids, f.vocab)), f.refs[0], f.rc) - r_greedy;
  mc /= draws;
  EXPECT_LT(std::abs(mean - mc), 5 * se + 0.02) << "mean " << mean << " mc " << mc;

  // Peaked policy: EOS dominates every step.
  for (auto& x : m.output_projection().weight.mutable_values()) x = 0;
  auto bias = m.output_projection().bias.mutable_values();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = i == 3 ? 12.0 : 0.0;
  sum = 0;
  for (std::size_t i = 0; i < steps; ++i)
    sum += scst_rollouts(m, span_of(clips), span_of(refs), f.rc, f.vocab, rng).mean_advantage();
  EXPECT_LT(std::abs(sum / steps), 1e-3);
}

CaptionedClips split_from(const ScstFixture& f) {
  std::vector<VideoSample> clips = f.clips;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    clips[i].id = "s" + std::to_string(i);
    for (const auto& r : f.refs[i]) {
      std::string text;
      for (const auto& w : r) text += (text.empty() ? "" : " ") + w;
      clips[i].captions.push_back(text);
    }
  }
  return prepare_clips(std::move(clips), f.vocab, f.cfg.l_max);
}

TEST(Finetune, ZeroLearningRateChangesNothing) {
  auto f = oracle::scst_fixture(AttentionKind::kMemoryScaledDot, 20, 1.0);
  Rng init(1);
  TransformerModel<float> m(f.cfg, init);
  std::vector<float> before;
  for (const auto& p : m.parameters()) before.insert(before.end(), p.tensor.values().begin(), p.tensor.values().end());
  const auto data = split_from(f);
  auto rc = f.rc;
  rc.eta = 0.0;
  TrainRunConfig run;
  run.epochs = 3;
  run.batch_size = 1;
  const auto r = finetune_scst(m, f.vocab, data, data, rc, run);
  std::vector<float> after;
  for (const auto& p : m.parameters()) after.insert(after.end(), p.tensor.values().begin(), p.tensor.values().end());
  EXPECT_EQ(before, after);
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.step_mean_advantage.size(), r.steps);
  for (const auto& h : r.history) {
    EXPECT_EQ(h.cider_d, r.initial.cider_d);
    EXPECT_EQ(h.val_reward, r.initial.val_reward);
    EXPECT_TRUE(h.mean_advantage.has_value());
  }
}

TEST(Finetune, TraceFileAndDeterminism) {
  const auto dir = fs::temp_directory_path() / "vtt_scst_trace";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto f = oracle::scst_fixture(AttentionKind::kXLinear, 21, 1.0);
  const auto data = split_from(f);
  auto rc = f.rc;
  rc.eta = 1e-3;
  TrainRunConfig run;
  run.epochs = 2;
  run.batch_size = 1;
  auto once = [&](const fs::path& trace) {
    Rng init(1);
    TransformerModel<float> m(f.cfg, init);
    finetune_scst(m, f.vocab, data, data, rc, run, trace);
    std::vector<float> v;
    for (const auto& p : m.parameters()) v.insert(v.end(), p.tensor.values().begin(), p.tensor.values().end());
    return v;
  };
  EXPECT_EQ(once(dir / "a.jsonl"), once(dir / "b.jsonl"));
  std::ifstream in(dir / "a.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("clips"));
    ++n;
  }
  EXPECT_EQ(n, 4u);
  fs::remove_all(dir);
}

TEST(Finetune, VocabularyMismatchIsContractError) {
  auto f = oracle::scst_fixture(AttentionKind::kMemoryScaledDot, 22, 1.0);
  auto cfg = f.cfg;
  cfg.vocab_size = 13;
  Rng init(1);
  TransformerModel<float> m(cfg, init);
  const auto data = split_from(f);
  EXPECT_THROW(finetune_scst(m, f.vocab, data, data, f.rc, TrainRunConfig{}), ContractError);
}

}  // namespace
}  // namespace vtt
