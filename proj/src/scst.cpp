#include "vtt/scst.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vtt/error.hpp"

namespace vtt {

using nlohmann::json;

void RewardConfig::validate() const {
  if (lambda_cider < 0.0 || lambda_bleu4 < 0.0) throw ContractError("reward: lambdas must be nonnegative");
  if (n_samples == 0) throw ContractError("reward: n_samples must be >= 1");
  if (eta < 0.0) throw ContractError("reward: eta must be nonnegative");
  if (!(temperature > 0.0)) throw ContractError("reward: temperature must be positive");
}

void to_json(json& j, const RewardConfig& r) {
  j = json{{"lambda_cider", r.lambda_cider}, {"lambda_bleu4", r.lambda_bleu4}, {"n_samples", r.n_samples},
           {"eta", r.eta},                   {"temperature", r.temperature}};
}

void from_json(const json& j, RewardConfig& r) {
  if (!j.is_object()) throw FormatError("reward config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lambda_cider") r.lambda_cider = value.get<double>();
      else if (key == "lambda_bleu4") r.lambda_bleu4 = value.get<double>();
      else if (key == "n_samples") r.n_samples = value.get<std::size_t>();
      else if (key == "eta") r.eta = value.get<double>();
      else if (key == "temperature") r.temperature = value.get<double>();
      else throw FormatError("reward config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw FormatError("reward config key '" + key + "': " + e.what());
    }
  }
}

double mixed_reward(const Words& candidate, const std::vector<Words>& refs, const RewardConfig& rc) {
  double r = 0.0;
  if (rc.lambda_cider != 0.0) r += rc.lambda_cider * cider_sentence(candidate, refs, rc.idf, CiderVariant::kD);
  if (rc.lambda_bleu4 != 0.0) r += rc.lambda_bleu4 * bleu4(candidate, refs, true);
  return r;
}

double ScstBatchTrace::mean_advantage() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : clips)
    for (const auto& s : c.samples) {
      sum += s.advantage;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double ScstBatchTrace::mean_sample_reward() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : clips)
    for (const auto& s : c.samples) {
      sum += s.reward;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

json trace_json(const ScstBatchTrace& trace, const Vocabulary& vocab) {
  json clips = json::array();
  for (const auto& c : trace.clips) {
    json samples = json::array();
    for (const auto& s : c.samples) {
      samples.push_back({{"caption", decode(s.ids, vocab)},
                         {"reward", s.reward},
                         {"advantage", s.advantage},
                         {"log_prob", s.log_prob}});
    }
    clips.push_back({{"id", c.id},
                     {"baseline", decode(c.baseline, vocab)},
                     {"baseline_reward", c.baseline_reward},
                     {"samples", std::move(samples)}});
  }
  return json{{"loss", trace.loss}, {"mean_advantage", trace.mean_advantage()}, {"clips", std::move(clips)}};
}

template <typename T>
ScstBatchTrace scst_rollouts(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                             std::span<const std::vector<Words>* const> refs, const RewardConfig& rc,
                             const Vocabulary& vocab, Rng& rng, const RewardFn& reward) {
  rc.validate();
  if (clips.size() != refs.size()) throw ContractError("scst: clip/reference count mismatch");
  const RewardFn score = reward ? reward : RewardFn([&rc](const Words& c, const std::vector<Words>& r) {
    return mixed_reward(c, r, rc);
  });
  NoGradGuard guard;
  const auto markers = SequenceMarkers::from(vocab);
  const std::size_t l_max = model.config().l_max;
  ScstBatchTrace trace;
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto encoded = model.encode(*clips[b]);
    ScstClipTrace ct;
    ct.id = clips[b]->id;
    ct.baseline = greedy_decode_encoded(model, encoded, markers, l_max);
    ct.baseline_reward = score(normalize_words(decode(ct.baseline, vocab)), *refs[b]);
    for (auto& s : sample_decode_encoded(model, encoded, rc.n_samples, rc.temperature, rng, markers, l_max)) {
      ScstRollout r;
      for (double lp : s.log_probs) r.log_prob += lp;
      if (!std::isfinite(r.log_prob)) throw TrainingError("scst: non-finite sample log-probability for " + ct.id);
      r.ids = std::move(s.ids);
      r.reward = score(normalize_words(decode(r.ids, vocab)), *refs[b]);
      r.advantage = r.reward - ct.baseline_reward;
      ct.samples.push_back(std::move(r));
    }
    trace.clips.push_back(std::move(ct));
  }
  return trace;
}

template <typename T>
Tensor<T> scst_surrogate_loss(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                              const ScstBatchTrace& trace, const RewardConfig& rc) {
  if (clips.size() != trace.clips.size()) throw ContractError("scst: trace does not match the batch");
  std::size_t n_rollouts = 0;
  for (const auto& c : trace.clips) n_rollouts += c.samples.size();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  if (n_rollouts == 0) return total;
  const double norm = 1.0 / static_cast<double>(n_rollouts);
  const T inv_temp = static_cast<T>(1.0 / rc.temperature);
  for (std::size_t b = 0; b < clips.size(); ++b) {
    bool any = false;
    for (const auto& s : trace.clips[b].samples) any = any || s.advantage != 0.0;
    if (!any) continue;
    const auto encoded = model.encode(*clips[b]);
    for (const auto& s : trace.clips[b].samples) {
      if (s.advantage == 0.0) continue;
      const std::span<const int> ids(s.ids);
      const auto logits = model.decode_logits(encoded, ids.first(ids.size() - 1));
      const auto logp = log_softmax_lastdim(scale(logits, inv_temp));
      const auto seq = sum(pick(logp, ids.subspan(1)));
      total = add(total, scale(seq, static_cast<T>(-s.advantage * norm)));
    }
  }
  return total;
}

template <typename T>
ScstBatchTrace scst_batch_step(const TransformerModel<T>& model, std::span<const VideoSample* const> clips,
                               std::span<const std::vector<Words>* const> refs, const RewardConfig& rc,
                               const Vocabulary& vocab, Rng& rng, const RewardFn& reward) {
  auto trace = scst_rollouts(model, clips, refs, rc, vocab, rng, reward);
  const auto loss = scst_surrogate_loss(model, clips, trace, rc);
  trace.loss = static_cast<double>(loss.item());
  backward(loss);
  return trace;
}

template <typename T>
double validation_reward(const TransformerModel<T>& model, const CaptionedClips& data, const RewardConfig& rc,
                         const Vocabulary& vocab) {
  if (data.clips.empty()) throw ContractError("validation_reward: empty split");
  const auto captions = caption_clips(model, data.clips, vocab);
  double sum = 0.0;
  for (std::size_t i = 0; i < captions.size(); ++i)
    sum += mixed_reward(normalize_words(captions[i]), data.reference_words[i], rc);
  return sum / static_cast<double>(captions.size());
}

#define VTT_INSTANTIATE_SCST(T)                                                                                  \
  template ScstBatchTrace scst_rollouts(const TransformerModel<T>&, std::span<const VideoSample* const>,         \
                                        std::span<const std::vector<Words>* const>, const RewardConfig&,         \
                                        const Vocabulary&, Rng&, const RewardFn&);                               \
  template Tensor<T> scst_surrogate_loss(const TransformerModel<T>&, std::span<const VideoSample* const>,        \
                                         const ScstBatchTrace&, const RewardConfig&);                            \
  template ScstBatchTrace scst_batch_step(const TransformerModel<T>&, std::span<const VideoSample* const>,       \
                                          std::span<const std::vector<Words>* const>, const RewardConfig&,       \
                                          const Vocabulary&, Rng&, const RewardFn&);                             \
  template double validation_reward(const TransformerModel<T>&, const CaptionedClips&, const RewardConfig&,      \
                                    const Vocabulary&);

VTT_INSTANTIATE_SCST(float)
VTT_INSTANTIATE_SCST(double)

#undef VTT_INSTANTIATE_SCST

TrainResult finetune_scst(TransformerModel<float>& model, const Vocabulary& vocab, const CaptionedClips& train,
                          const CaptionedClips& val, const RewardConfig& rc, const TrainRunConfig& run,
                          const std::filesystem::path& trace_path) {
  rc.validate();
  run.validate();
  if (vocab.size() != model.config().vocab_size) throw ContractError("finetune_scst: vocabulary/model mismatch");
  if (train.clips.empty()) throw ContractError("finetune_scst: empty training split");
  if (val.clips.empty()) throw ContractError("finetune_scst: empty validation split");

  std::ofstream trace_out;
  if (!trace_path.empty()) {
    trace_out.open(trace_path, std::ios::binary);
    if (!trace_out) throw IoError("cannot write " + trace_path.string());
  }

  Rng order_rng(run.seed ^ 0x9e3779b97f4a7c15ULL);
  Rng sample_rng(run.seed + 2);
  Adam<float> adam(model.parameters());
  RunRecorder recorder(model, run);
  const int pad = vocab.pad();

  auto validate_now = [&](double epoch, std::size_t step, std::optional<double> train_loss,
                          std::optional<double> mean_adv) {
    HistoryRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = rc.eta;
    rec.train_loss = train_loss;
    rec.val_loss = validation_loss(model, val, pad);
    const auto report = evaluate(model, val.clips, vocab);
    rec.bleu4 = report.bleu4;
    rec.cider = report.cider;
    rec.cider_d = report.cider_d;
    rec.mean_advantage = mean_adv;
    rec.val_reward = validation_reward(model, val, rc, vocab);
    return rec;
  };

  recorder.set_initial(validate_now(0.0, 0, std::nullopt, std::nullopt));

  std::vector<std::size_t> order(train.clips.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t steps_per_epoch = (order.size() + run.batch_size - 1) / run.batch_size;
  std::vector<double> step_adv;
  std::size_t step = 0;
  bool stop = false;
  char tag[32];
  for (std::size_t epoch = 1; epoch <= run.epochs && !stop; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    double adv_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < steps_per_epoch && !stop; ++b) {
      std::vector<const VideoSample*> clips;
      std::vector<const std::vector<Words>*> refs;
      for (std::size_t i = b * run.batch_size; i < std::min(order.size(), (b + 1) * run.batch_size); ++i) {
        clips.push_back(&train.clips[order[i]]);
        refs.push_back(&train.reference_words[order[i]]);
      }
      const auto trace = scst_batch_step(model, std::span<const VideoSample* const>(clips),
                                         std::span<const std::vector<Words>* const>(refs), rc, vocab, sample_rng);
      ++step;
      clip_grad_norm(model.parameters(), run.clip_norm);
      adam.step(rc.eta);
      adam.zero_grad();
      step_adv.push_back(trace.mean_advantage());
      loss_sum += trace.loss;
      adv_sum += trace.mean_advantage();
      ++batches;
      if (trace_out.is_open()) {
        auto j = trace_json(trace, vocab);
        j["step"] = step;
        trace_out << j.dump() << '\n';
      }
      if (run.eval_every > 0 && step % run.eval_every == 0 && b + 1 < steps_per_epoch) {
        const double frac = static_cast<double>(epoch - 1) +
                            static_cast<double>(b + 1) / static_cast<double>(steps_per_epoch);
        auto rec = validate_now(frac, step, loss_sum / static_cast<double>(batches),
                                adv_sum / static_cast<double>(batches));
        std::snprintf(tag, sizeof tag, "scst_step_%07zu", step);
        stop = recorder.record(rec, rec.cider_d, tag);
      }
    }
    if (stop) break;
    auto rec = validate_now(static_cast<double>(epoch), step, loss_sum / static_cast<double>(batches),
                            adv_sum / static_cast<double>(batches));
    std::snprintf(tag, sizeof tag, "scst_epoch_%03zu", epoch);
    stop = recorder.record(rec, rec.cider_d, tag);
  }
  auto result = recorder.finish(step);
  result.step_mean_advantage = std::move(step_adv);
  return result;
}

}  // namespace vtt
