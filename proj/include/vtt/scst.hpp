#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vtt/metrics.hpp"
#include "vtt/model.hpp"
#include "vtt/training.hpp"

namespace vtt {

struct RewardConfig {
  double lambda_cider = 1.0;
  double lambda_bleu4 = 1.0;
  std::size_t n_samples = 5;
  double eta = 5e-6;  // constant learning rate
  double temperature = 1.0;
  IdfTable idf;  // CIDEr-D statistics of the training references

  void validate() const;
};

/// Reward-related keys only; the IDF table is computed from data.
void to_json(nlohmann::json& j, const RewardConfig& r);
void from_json(const nlohmann::json& j, RewardConfig& r);

/// lambda_cider * CIDEr-D + lambda_bleu4 * smoothed sentence BLEU-4.
double mixed_reward(const Words& candidate, const std::vector<Words>& refs, const RewardConfig& rc);

using RewardFn = std::function<double(const Words& candidate, const std::vector<Words>& refs)>;

struct ScstRollout {
  TokenSequence ids;
  double reward = 0.0;
  double advantage = 0.0;  // reward minus the greedy baseline reward
  double log_prob = 0.0;   // sum over generated tokens, tempered policy
};

struct ScstClipTrace {
  std::string id;
  TokenSequence baseline;
  double baseline_reward = 0.0;
  std::vector<ScstRollout> samples;
};

struct ScstBatchTrace {
  std::vector<ScstClipTrace> clips;
  double loss = 0.0;

  double mean_advantage() const;
  double mean_sample_reward() const;
};

nlohmann::json trace_json(const ScstBatchTrace& trace, const Vocabulary& vocab);

/// Greedy baseline and n multinomial rollouts per clip, all without graph
/// recording. `reward` defaults to mixed_reward under `rc`.
template <typename T>
ScstBatchTrace scst_rollouts(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                             std::span<const std::vector<Words>* const> refs, const RewardConfig& rc,
                             const Vocabulary& vocab, Rng& rng, const RewardFn& reward = {});

/// Policy-gradient surrogate with the advantages of `trace` held fixed:
///   -(1 / (B n)) * sum_b sum_s A_bs * sum_t log p(w_t | w_<t, clip_b)
/// Rollouts with zero advantage contribute nothing and are skipped.
template <typename T>
Tensor<T> scst_surrogate_loss(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                              const ScstBatchTrace& trace, const RewardConfig& rc);

/// Rollouts, surrogate and backward pass. Gradients accumulate into the
/// model parameters; the caller applies the optimizer step.
template <typename T>
ScstBatchTrace scst_batch_step(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                               std::span<const std::vector<Words>* const> refs, const RewardConfig& rc,
                               const Vocabulary& vocab, Rng& rng, const RewardFn& reward = {});

/// Mean mixed reward of greedy captions over a split.
template <typename T>
double validation_reward(const TransformerModel<T>& model, const CaptionedClips& data, const RewardConfig& rc,
                         const Vocabulary& vocab);

/// Self-critical finetuning at a constant learning rate with validation
/// after every epoch (and every run.eval_every steps). The model ends up
/// holding the weights with the best validation CIDEr-D seen after the
/// first update. With `trace_path` set, each batch trace is appended there
/// as one JSON line.
TrainResult finetune_scst(TransformerModel<float>& model, const Vocabulary& vocab, const CaptionedClips& train,
                          const CaptionedClips& val, const RewardConfig& rc, const TrainRunConfig& run,
                          const std::filesystem::path& trace_path = {});

}  // namespace vtt
