#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vtt/features.hpp"
#include "vtt/metrics.hpp"
#include "vtt/model.hpp"
#include "vtt/tokenizer.hpp"

namespace vtt {

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class ScheduleKind { kDefault, kSgdr, kConstant };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::kSgdr;
  std::size_t d_model = 512;
  std::size_t warmup = 10000;
  // SGDR cycle layout after warmup: first cycle t0 steps, each next cycle
  // t_mult times longer.
  std::size_t t0 = 4000;
  std::size_t t_mult = 2;
  // Unset: peak of the default schedule at step == warmup, and 1% of it.
  std::optional<double> eta_max;
  std::optional<double> eta_min;
  double constant_lr = 5e-6;

  void validate() const;
  double resolved_eta_max() const;
  double resolved_eta_min() const;
};

void to_json(nlohmann::json& j, const ScheduleConfig& s);
void from_json(const nlohmann::json& j, ScheduleConfig& s);

/// Learning rate for a 1-based optimizer step.
///   default:  d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
///   sgdr:     linear 0 -> eta_max over warmup, then cosine annealing between
///             eta_max and eta_min with warm restarts
///   constant: constant_lr
double lr_at(std::size_t step, const ScheduleConfig& s);

/// Steps (1-based) at which SGDR cycles begin, up to and including `limit`.
std::vector<std::size_t> sgdr_restart_steps(const ScheduleConfig& s, std::size_t limit);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Bias-corrected Adam over a fixed parameter list. Moments are kept in
/// double precision regardless of the parameter type.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<NamedParameter<T>> params, AdamConfig config = {});

  /// One update from the parameters' current gradients. Throws
  /// TrainingError naming the first parameter with a non-finite gradient;
  /// nothing is modified in that case.
  void step(double lr);

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  std::span<const double> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const double> second_moment(std::size_t i) const { return v_[i]; }

  void zero_grad();

 private:
  std::vector<NamedParameter<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`
/// (no-op when max_norm <= 0). Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParameter<T>>& params, double max_norm);

// ---------------------------------------------------------------------------
// Runs

struct TrainRunConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  // Validate every this many optimizer steps in addition to every epoch end
  // (0 = epoch ends only).
  std::size_t eval_every = 0;
  std::size_t patience = 0;  // evaluations without improvement before stopping; 0 = never
  double clip_norm = 5.0;
  std::filesystem::path checkpoint_dir;  // empty: keep everything in memory
  bool keep_all_checkpoints = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainRunConfig& r);
void from_json(const nlohmann::json& j, TrainRunConfig& r);

/// One validation point. `epoch` is fractional for mid-epoch evaluations.
struct HistoryRecord {
  double epoch = 0.0;
  std::size_t step = 0;
  double lr = 0.0;
  std::optional<double> train_loss;
  std::optional<double> val_loss;
  double bleu4 = 0.0;
  double cider = 0.0;
  double cider_d = 0.0;
  // SCST only.
  std::optional<double> mean_advantage;
  std::optional<double> val_reward;
};

nlohmann::json history_json(const HistoryRecord& r);

struct TrainResult {
  HistoryRecord initial;               // before the first update
  std::vector<HistoryRecord> history;  // one entry per validation point
  std::size_t best_index = 0;          // into history
  std::filesystem::path best_checkpoint;
  std::vector<double> step_mean_advantage;  // SCST only
  std::size_t steps = 0;
};

/// Clips with their tokenized captions, ready for teacher forcing.
struct CaptionedClips {
  std::vector<VideoSample> clips;
  std::vector<std::vector<TokenSequence>> captions;  // per clip, per reference
  std::vector<std::vector<Words>> reference_words;   // per clip, for metrics
};

/// Encodes each caption, truncating content to `l_max` tokens before EOS.
CaptionedClips prepare_clips(std::vector<VideoSample> clips, const Vocabulary& vocab, std::size_t l_max);

/// Sum of token cross-entropies of `caption` (teacher forced), ignoring PAD
/// targets.
template <typename T>
Tensor<T> caption_xe_sum(const TransformerModel<T>& model, const VideoSample& clip, std::span<const int> caption,
                         int pad_id, Rng* dropout_rng = nullptr);

/// Number of non-PAD prediction targets in a caption (all tokens after the first).
std::size_t count_targets(std::span<const int> caption, int pad_id);

/// Mean per-token cross-entropy over a set of (clip, caption) pairs.
template <typename T>
double mean_xe_loss(const TransformerModel<T>& model, const std::vector<const VideoSample*>& clips,
                    const std::vector<std::span<const int>>& captions, int pad_id);

/// Mean per-token cross-entropy over every reference of every clip.
template <typename T>
double validation_loss(const TransformerModel<T>& model, const CaptionedClips& data, int pad_id);

/// Greedy captions for every clip.
template <typename T>
std::vector<std::string> caption_clips(const TransformerModel<T>& model, const std::vector<VideoSample>& clips,
                                       const Vocabulary& vocab);

/// Greedy-decodes every clip and scores BLEU-4, CIDEr and CIDEr-D.
template <typename T>
MetricReport evaluate(const TransformerModel<T>& model, const std::vector<VideoSample>& clips,
                      const Vocabulary& vocab);

/// Index of the highest validation score; earliest on ties. Throws
/// ContractError on an empty history.
std::size_t early_stop_select(std::span<const double> scores);

struct EpochScore {
  std::size_t epoch = 0;
  double cider = 0.0;
};

/// Epoch with the highest CIDEr; earliest on ties.
std::size_t early_stop_select(std::span<const EpochScore> history);

/// Validation bookkeeping shared by the training loops: keeps the history,
/// writes checkpoints and remembers the best weights by score.
class RunRecorder {
 public:
  RunRecorder(TransformerModel<float>& model, const TrainRunConfig& run);

  void set_initial(HistoryRecord rec);
  /// Stores a validation point and its checkpoint (`tag` names the file).
  /// Returns true once patience is exhausted.
  bool record(HistoryRecord rec, double score, const std::string& tag);
  /// Restores the best weights into the model and writes history.jsonl.
  TrainResult finish(std::size_t steps);

 private:
  TransformerModel<float>& model_;
  TrainRunConfig run_;
  TrainResult result_;
  std::vector<double> scores_;
  std::vector<std::vector<float>> best_values_;
};

/// Cross-entropy training with Adam, validation after every epoch and
/// early stopping on validation CIDEr-D. The model ends up holding the
/// best weights.
TrainResult train_xe(TransformerModel<float>& model, const Vocabulary& vocab, const CaptionedClips& train,
                     const CaptionedClips& val, const ScheduleConfig& schedule, const TrainRunConfig& run);

/// One JSON line per record, the initial record first.
void write_history(const std::filesystem::path& path, const TrainResult& result);

}  // namespace vtt
