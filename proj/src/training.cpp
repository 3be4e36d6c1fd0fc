#include "vtt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "vtt/error.hpp"

namespace vtt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schedules

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kDefault: return "default";
    case ScheduleKind::kSgdr: return "sgdr";
    case ScheduleKind::kConstant: return "constant";
  }
  return "sgdr";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "default") return ScheduleKind::kDefault;
  if (name == "sgdr") return ScheduleKind::kSgdr;
  if (name == "constant") return ScheduleKind::kConstant;
  throw FormatError("unknown schedule '" + name + "' (expected default, sgdr or constant)");
}

void ScheduleConfig::validate() const {
  if (d_model == 0) throw ContractError("schedule: d_model must be positive");
  if (warmup == 0) throw ContractError("schedule: warmup must be positive");
  if (t0 == 0) throw ContractError("schedule: t0 must be positive");
  if (t_mult == 0) throw ContractError("schedule: t_mult must be positive");
  if (constant_lr < 0.0) throw ContractError("schedule: constant_lr must be nonnegative");
  const double hi = resolved_eta_max();
  const double lo = resolved_eta_min();
  if (!(lo >= 0.0 && lo <= hi)) throw ContractError("schedule: need 0 <= eta_min <= eta_max");
}

double ScheduleConfig::resolved_eta_max() const {
  if (eta_max) return *eta_max;
  return 1.0 / std::sqrt(static_cast<double>(d_model) * static_cast<double>(warmup));
}

double ScheduleConfig::resolved_eta_min() const {
  if (eta_min) return *eta_min;
  return resolved_eta_max() / 100.0;
}

void to_json(json& j, const ScheduleConfig& s) {
  j = json{{"kind", to_string(s.kind)}, {"d_model", s.d_model}, {"warmup", s.warmup},
           {"t0", s.t0},                {"t_mult", s.t_mult},   {"constant_lr", s.constant_lr}};
  j["eta_max"] = s.eta_max ? json(*s.eta_max) : json(nullptr);
  j["eta_min"] = s.eta_min ? json(*s.eta_min) : json(nullptr);
}

void from_json(const json& j, ScheduleConfig& s) {
  if (!j.is_object()) throw FormatError("schedule config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "kind") s.kind = schedule_kind_from_string(value.get<std::string>());
      else if (key == "d_model") s.d_model = value.get<std::size_t>();
      else if (key == "warmup") s.warmup = value.get<std::size_t>();
      else if (key == "t0") s.t0 = value.get<std::size_t>();
      else if (key == "t_mult") s.t_mult = value.get<std::size_t>();
      else if (key == "constant_lr") s.constant_lr = value.get<double>();
      else if (key == "eta_max") s.eta_max = value.is_null() ? std::nullopt : std::optional(value.get<double>());
      else if (key == "eta_min") s.eta_min = value.is_null() ? std::nullopt : std::optional(value.get<double>());
      else throw FormatError("schedule config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw FormatError("schedule config key '" + key + "': " + e.what());
    }
  }
}

double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step == 0) throw ContractError("lr_at: steps are 1-based");
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(s.warmup);
  switch (s.kind) {
    case ScheduleKind::kConstant:
      return s.constant_lr;
    case ScheduleKind::kDefault: {
      const double scale = 1.0 / std::sqrt(static_cast<double>(s.d_model));
      // Evaluate only the active branch so the peak at step == warmup is exact.
      if (step < s.warmup) return scale * t / (w * std::sqrt(w));
      return scale / std::sqrt(t);
    }
    case ScheduleKind::kSgdr: {
      const double hi = s.resolved_eta_max();
      const double lo = s.resolved_eta_min();
      if (step <= s.warmup) return hi * t / w;
      std::size_t pos = step - s.warmup - 1;
      std::size_t len = s.t0;
      while (pos >= len) {
        pos -= len;
        len *= s.t_mult;
      }
      const double phase = static_cast<double>(pos) / static_cast<double>(len);
      return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * phase));
    }
  }
  return 0.0;
}

std::vector<std::size_t> sgdr_restart_steps(const ScheduleConfig& s, std::size_t limit) {
  std::vector<std::size_t> out;
  std::size_t start = s.warmup + 1;
  std::size_t len = s.t0;
  while (start <= limit) {
    out.push_back(start);
    start += len;
    len *= s.t_mult;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
Adam<T>::Adam(std::vector<NamedParameter<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    auto values = p.mutable_values();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      values[j] = static_cast<T>(static_cast<double>(values[j]) - lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (const auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
double clip_grad_norm(const std::vector<NamedParameter<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.grad()) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(const std::vector<NamedParameter<float>>&, double);
template double clip_grad_norm(const std::vector<NamedParameter<double>>&, double);

// ---------------------------------------------------------------------------
// Run configuration

void TrainRunConfig::validate() const {
  if (batch_size == 0) throw ContractError("train: batch_size must be positive");
  if (clip_norm < 0.0) throw ContractError("train: clip_norm must be nonnegative");
}

void to_json(json& j, const TrainRunConfig& r) {
  j = json{{"epochs", r.epochs},
           {"batch_size", r.batch_size},
           {"seed", r.seed},
           {"eval_every", r.eval_every},
           {"patience", r.patience},
           {"clip_norm", r.clip_norm},
           {"checkpoint_dir", r.checkpoint_dir.string()},
           {"keep_all_checkpoints", r.keep_all_checkpoints}};
}

void from_json(const json& j, TrainRunConfig& r) {
  if (!j.is_object()) throw FormatError("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "epochs") r.epochs = value.get<std::size_t>();
      else if (key == "batch_size") r.batch_size = value.get<std::size_t>();
      else if (key == "seed") r.seed = value.get<std::uint64_t>();
      else if (key == "eval_every") r.eval_every = value.get<std::size_t>();
      else if (key == "patience") r.patience = value.get<std::size_t>();
      else if (key == "clip_norm") r.clip_norm = value.get<double>();
      else if (key == "checkpoint_dir") r.checkpoint_dir = value.get<std::string>();
      else if (key == "keep_all_checkpoints") r.keep_all_checkpoints = value.get<bool>();
      else throw FormatError("run config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw FormatError("run config key '" + key + "': " + e.what());
    }
  }
}

json history_json(const HistoryRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j{{"epoch", r.epoch},   {"step", r.step},   {"lr", r.lr},
         {"train_loss", opt(r.train_loss)}, {"val_loss", opt(r.val_loss)},
         {"bleu4", r.bleu4},   {"cider", r.cider}, {"cider_d", r.cider_d}};
  if (r.mean_advantage) j["mean_advantage"] = *r.mean_advantage;
  if (r.val_reward) j["val_reward"] = *r.val_reward;
  return j;
}

void write_history(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << history_json(result.initial).dump() << '\n';
  for (const auto& r : result.history) out << history_json(r).dump() << '\n';
  if (!out) throw IoError("error while writing " + path.string());
}

// ---------------------------------------------------------------------------
// Data and losses

CaptionedClips prepare_clips(std::vector<VideoSample> clips, const Vocabulary& vocab, std::size_t l_max) {
  CaptionedClips out;
  for (const auto& clip : clips) {
    std::vector<TokenSequence> seqs;
    std::vector<Words> words;
    for (const auto& caption : clip.captions) {
      auto ids = encode(caption, vocab);
      if (ids.size() > l_max + 2) {
        ids.resize(l_max + 1);
        ids.push_back(vocab.eos());
      }
      seqs.push_back(std::move(ids));
      words.push_back(normalize_words(caption));
    }
    out.captions.push_back(std::move(seqs));
    out.reference_words.push_back(std::move(words));
  }
  out.clips = std::move(clips);
  return out;
}

std::size_t count_targets(std::span<const int> caption, int pad_id) {
  if (caption.size() < 2) return 0;
  return static_cast<std::size_t>(std::count_if(caption.begin() + 1, caption.end(),
                                                [pad_id](int id) { return id != pad_id; }));
}

template <typename T>
Tensor<T> caption_xe_sum(const TransformerModel<T>& model, const VideoSample& clip, std::span<const int> caption,
                         int pad_id, Rng* dropout_rng) {
  if (caption.size() < 2) throw ContractError("caption_xe_sum: caption needs at least two tokens");
  const auto logits = model.forward_teacher_forced(clip, caption.first(caption.size() - 1), dropout_rng);
  return cross_entropy_sum(logits, caption.subspan(1), pad_id);
}

template <typename T>
double mean_xe_loss(const TransformerModel<T>& model, const std::vector<const VideoSample*>& clips,
                    const std::vector<std::span<const int>>& captions, int pad_id) {
  if (clips.size() != captions.size()) throw ContractError("mean_xe_loss: clip/caption count mismatch");
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const std::size_t n = count_targets(captions[i], pad_id);
    if (n == 0) continue;
    total += static_cast<double>(caption_xe_sum(model, *clips[i], captions[i], pad_id).item());
    count += n;
  }
  if (count == 0) throw ContractError("mean_xe_loss: no prediction targets");
  return total / static_cast<double>(count);
}

template <typename T>
double validation_loss(const TransformerModel<T>& model, const CaptionedClips& data, int pad_id) {
  std::vector<const VideoSample*> clips;
  std::vector<std::span<const int>> captions;
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    for (const auto& c : data.captions[i]) {
      clips.push_back(&data.clips[i]);
      captions.emplace_back(c);
    }
  }
  return mean_xe_loss(model, clips, captions, pad_id);
}

template <typename T>
std::vector<std::string> caption_clips(const TransformerModel<T>& model, const std::vector<VideoSample>& clips,
                                       const Vocabulary& vocab) {
  NoGradGuard guard;
  std::vector<std::string> out;
  out.reserve(clips.size());
  const auto markers = SequenceMarkers::from(vocab);
  for (const auto& clip : clips) {
    const auto ids = greedy_decode(model, clip, markers, model.config().l_max);
    out.push_back(decode(ids, vocab));
  }
  return out;
}

template <typename T>
MetricReport evaluate(const TransformerModel<T>& model, const std::vector<VideoSample>& clips,
                      const Vocabulary& vocab) {
  const auto captions = caption_clips(model, clips, vocab);
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> refs;
  for (const auto& c : clips) {
    ids.push_back(c.id);
    refs.push_back(c.captions);
  }
  return score_captions(ids, captions, refs);
}

#define VTT_INSTANTIATE_TRAINING(T)                                                                          \
  template Tensor<T> caption_xe_sum(const TransformerModel<T>&, const VideoSample&, std::span<const int>, int, \
                                    Rng*);                                                                    \
  template double mean_xe_loss(const TransformerModel<T>&, const std::vector<const VideoSample*>&,            \
                               const std::vector<std::span<const int>>&, int);                                \
  template double validation_loss(const TransformerModel<T>&, const CaptionedClips&, int);                    \
  template std::vector<std::string> caption_clips(const TransformerModel<T>&, const std::vector<VideoSample>&, \
                                                  const Vocabulary&);                                         \
  template MetricReport evaluate(const TransformerModel<T>&, const std::vector<VideoSample>&, const Vocabulary&);

VTT_INSTANTIATE_TRAINING(float)
VTT_INSTANTIATE_TRAINING(double)

#undef VTT_INSTANTIATE_TRAINING

std::size_t early_stop_select(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("early_stop_select: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::size_t early_stop_select(std::span<const EpochScore> history) {
  std::vector<double> scores;
  for (const auto& h : history) scores.push_back(h.cider);
  return history[early_stop_select(std::span<const double>(scores))].epoch;
}

// ---------------------------------------------------------------------------
// Recorder

RunRecorder::RunRecorder(TransformerModel<float>& model, const TrainRunConfig& run) : model_(model), run_(run) {
  if (!run_.checkpoint_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(run_.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create " + run_.checkpoint_dir.string() + ": " + ec.message());
  }
}

void RunRecorder::set_initial(HistoryRecord rec) { result_.initial = rec; }

bool RunRecorder::record(HistoryRecord rec, double score, const std::string& tag) {
  result_.history.push_back(rec);
  scores_.push_back(score);
  if (!run_.checkpoint_dir.empty() && run_.keep_all_checkpoints) {
    save_checkpoint(model_, run_.checkpoint_dir / (tag + ".vttc"));
  }
  const std::size_t best = early_stop_select(scores_);
  if (best == scores_.size() - 1) {
    result_.best_index = best;
    best_values_.clear();
    for (const auto& p : model_.parameters())
      best_values_.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    if (!run_.checkpoint_dir.empty()) {
      result_.best_checkpoint = run_.checkpoint_dir / "best.vttc";
      save_checkpoint(model_, result_.best_checkpoint);
    }
  }
  return run_.patience > 0 && scores_.size() - 1 - result_.best_index >= run_.patience;
}

TrainResult RunRecorder::finish(std::size_t steps) {
  if (!best_values_.empty()) {
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(best_values_[i].begin(), best_values_[i].end(), params[i].tensor.mutable_values().begin());
    }
  }
  result_.steps = steps;
  if (!run_.checkpoint_dir.empty()) write_history(run_.checkpoint_dir / "history.jsonl", result_);
  return result_;
}

// ---------------------------------------------------------------------------
// Cross-entropy training

namespace {

std::string epoch_tag(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu", epoch);
  return buf;
}

std::string step_tag(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%07zu", step);
  return buf;
}

void fill_metrics(HistoryRecord& rec, const MetricReport& report) {
  rec.bleu4 = report.bleu4;
  rec.cider = report.cider;
  rec.cider_d = report.cider_d;
}

}  // namespace

TrainResult train_xe(TransformerModel<float>& model, const Vocabulary& vocab, const CaptionedClips& train,
                     const CaptionedClips& val, const ScheduleConfig& schedule, const TrainRunConfig& run) {
  schedule.validate();
  run.validate();
  if (vocab.size() != model.config().vocab_size) {
    throw ContractError("train_xe: vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                        std::to_string(model.config().vocab_size));
  }
  if (val.clips.empty()) throw ContractError("train_xe: empty validation split");

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < train.clips.size(); ++i)
    for (std::size_t k = 0; k < train.captions[i].size(); ++k) pairs.emplace_back(i, k);
  if (pairs.empty()) throw ContractError("train_xe: no training captions");

  const int pad = vocab.pad();
  Rng order_rng(run.seed ^ 0x9e3779b97f4a7c15ULL);
  Rng dropout_rng(run.seed + 1);
  Rng* drop = model.config().dropout > 0.0 ? &dropout_rng : nullptr;
  Adam<float> adam(model.parameters());
  RunRecorder recorder(model, run);

  auto validate_now = [&](double epoch, std::size_t step, double lr, std::optional<double> train_loss) {
    HistoryRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = lr;
    rec.train_loss = train_loss;
    rec.val_loss = validation_loss(model, val, pad);
    fill_metrics(rec, evaluate(model, val.clips, vocab));
    return rec;
  };

  recorder.set_initial(validate_now(0.0, 0, 0.0, std::nullopt));

  const std::size_t steps_per_epoch = (pairs.size() + run.batch_size - 1) / run.batch_size;
  std::size_t step = 0;
  bool stop = false;
  for (std::size_t epoch = 1; epoch <= run.epochs && !stop; ++epoch) {
    order_rng.shuffle(pairs.begin(), pairs.end());
    double loss_sum = 0.0;
    std::size_t loss_tokens = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch && !stop; ++b) {
      const std::size_t begin = b * run.batch_size;
      const std::size_t end = std::min(pairs.size(), begin + run.batch_size);
      std::size_t targets = 0;
      for (std::size_t i = begin; i < end; ++i) {
        targets += count_targets(train.captions[pairs[i].first][pairs[i].second], pad);
      }
      if (targets == 0) continue;
      const float inv = 1.0f / static_cast<float>(targets);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& [clip, k] = pairs[i];
        const auto& caption = train.captions[clip][k];
        const auto xe = caption_xe_sum(model, train.clips[clip], caption, pad, drop);
        loss_sum += static_cast<double>(xe.item());
        backward(scale(xe, inv));
      }
      loss_tokens += targets;
      ++step;
      clip_grad_norm(model.parameters(), run.clip_norm);
      lr = lr_at(step, schedule);
      adam.step(lr);
      adam.zero_grad();

      if (run.eval_every > 0 && step % run.eval_every == 0 && b + 1 < steps_per_epoch) {
        const double frac = static_cast<double>(epoch - 1) +
                            static_cast<double>(b + 1) / static_cast<double>(steps_per_epoch);
        auto rec = validate_now(frac, step, lr, loss_sum / static_cast<double>(loss_tokens));
        stop = recorder.record(rec, rec.cider_d, step_tag(step));
      }
    }
    if (stop) break;
    auto rec = validate_now(static_cast<double>(epoch), step, lr,
                            loss_tokens ? std::optional(loss_sum / static_cast<double>(loss_tokens)) : std::nullopt);
    stop = recorder.record(rec, rec.cider_d, epoch_tag(epoch));
  }
  return recorder.finish(step);
}

}  // namespace vtt
