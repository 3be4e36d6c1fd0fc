#include "vtt/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vtt/error.hpp"
#include "vtt/tokenizer.hpp"

namespace vtt {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Profiles

RunSpec RunSpec::paper() {
  RunSpec s;
  s.profile = "paper";
  s.model = ModelConfig::paper();
  s.schedule.kind = ScheduleKind::kSgdr;
  s.schedule.d_model = s.model.d_model;
  s.schedule.warmup = 10000;
  s.train.batch_size = 128;
  s.train.epochs = 50;
  s.reward.eta = 5e-6;
  s.scst_run = s.train;
  s.scst_run.epochs = 20;
  s.synth.d_vision = s.model.d_vision;
  s.synth.d_audio = s.model.d_audio;
  return s;
}

RunSpec RunSpec::desk() {
  RunSpec s;
  s.profile = "desk";
  s.model = ModelConfig::desk();
  s.schedule.kind = ScheduleKind::kSgdr;
  s.schedule.d_model = s.model.d_model;
  s.schedule.warmup = 200;
  s.schedule.t0 = 200;
  s.schedule.t_mult = 2;
  s.train.batch_size = 16;
  s.train.epochs = 30;
  s.reward.eta = 1e-4;
  s.scst_run = s.train;
  s.scst_run.epochs = 5;
  s.scst_run.eval_every = 4;
  s.synth.d_vision = s.model.d_vision;
  s.synth.d_audio = s.model.d_audio;
  return s;
}

RunSpec RunSpec::for_profile(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw FormatError("unknown profile '" + name + "' (expected paper or desk)");
}

void RunSpec::set_seed(std::uint64_t seed) {
  synth.seed = seed;
  train.seed = seed;
  scst_run.seed = seed;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  if (path.empty() || path.is_absolute() || base.empty()) return path;
  return base / path;
}

void synth_from_json(const json& j, SynthConfig& c) {
  if (!j.is_object()) throw FormatError("synth config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "videos") c.n_videos = value.get<std::size_t>();
      else if (key == "concepts") c.n_concepts = value.get<std::size_t>();
      else if (key == "min_frames") c.min_frames = value.get<std::size_t>();
      else if (key == "max_frames") c.max_frames = value.get<std::size_t>();
      else if (key == "max_audio_rows") c.max_audio_rows = value.get<std::size_t>();
      else if (key == "missing_audio_rate") c.missing_audio_rate = value.get<double>();
      else if (key == "noise_fraction") c.noise_fraction = value.get<double>();
      else throw FormatError("synth config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw FormatError("synth config key '" + key + "': " + e.what());
    }
  }
}

json synth_json(const SynthConfig& c) {
  return json{{"seed", c.seed},
              {"videos", c.n_videos},
              {"concepts", c.n_concepts},
              {"min_frames", c.min_frames},
              {"max_frames", c.max_frames},
              {"max_audio_rows", c.max_audio_rows},
              {"missing_audio_rate", c.missing_audio_rate},
              {"noise_fraction", c.noise_fraction}};
}

}  // namespace

RunSpec run_spec_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  std::string profile = "paper";
  if (j.contains("profile")) {
    try {
      profile = j.at("profile").get<std::string>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("config key 'profile': ") + e.what());
    }
  }
  RunSpec s = RunSpec::for_profile(profile);
  bool schedule_d_model_set = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "profile") continue;
    if (key == "model") {
      from_json(value, s.model);
      s.synth.d_vision = s.model.d_vision;
      s.synth.d_audio = s.model.d_audio;
    } else if (key == "schedule") {
      from_json(value, s.schedule);
      schedule_d_model_set = value.contains("d_model");
    } else if (key == "train") {
      from_json(value, s.train);
    } else if (key == "scst") {
      from_json(value, s.reward);
    } else if (key == "scst_run") {
      from_json(value, s.scst_run);
    } else if (key == "synth") {
      synth_from_json(value, s.synth);
    } else if (key == "data") {
      if (!value.is_object()) throw FormatError("config key 'data' must be an object");
      for (const auto& [dk, dv] : value.items()) {
        if (!dv.is_string()) throw FormatError("config key 'data." + dk + "' must be a string");
        if (dk == "train") s.train_manifest = resolve(base_dir, dv.get<std::string>());
        else if (dk == "val") s.val_manifest = resolve(base_dir, dv.get<std::string>());
        else if (dk == "vocab") s.vocab = resolve(base_dir, dv.get<std::string>());
        else throw FormatError("data config: unknown key '" + dk + "'");
      }
    } else if (key == "output_dir") {
      if (!value.is_string()) throw FormatError("config key 'output_dir' must be a string");
      s.output_dir = resolve(base_dir, value.get<std::string>());
    } else {
      throw FormatError("config: unknown key '" + key + "'");
    }
  }
  if (!schedule_d_model_set) s.schedule.d_model = s.model.d_model;
  s.model.validate();
  s.schedule.validate();
  s.train.validate();
  s.scst_run.validate();
  s.reward.validate();
  return s;
}

RunSpec load_run_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return run_spec_from_json(j, path.parent_path());
}

json run_spec_json(const RunSpec& s) {
  json j;
  j["profile"] = s.profile;
  j["model"] = s.model;
  j["schedule"] = s.schedule;
  j["train"] = s.train;
  j["scst"] = s.reward;
  j["scst_run"] = s.scst_run;
  j["synth"] = synth_json(s.synth);
  j["data"] = {{"train", s.train_manifest.string()}, {"val", s.val_manifest.string()}, {"vocab", s.vocab.string()}};
  j["output_dir"] = s.output_dir.string();
  return j;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct CommonOptions {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunSpec resolve_spec(const CommonOptions& o) {
  RunSpec s = o.config.empty() ? RunSpec::for_profile(o.profile.empty() ? "paper" : o.profile)
                               : load_run_spec(o.config);
  if (!o.config.empty() && !o.profile.empty() && o.profile != s.profile) {
    throw ContractError("--profile " + o.profile + " conflicts with the config's profile " + s.profile);
  }
  if (const char* env = std::getenv("VTT_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ContractError(std::string("VTT_SEED is not an unsigned integer: ") + env);
    s.set_seed(v);
  }
  if (o.seed) s.set_seed(*o.seed);
  if (!o.out.empty()) s.output_dir = o.out;
  return s;
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ContractError(what + " path not given");
  if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

void require_output_dir(const RunSpec& s) {
  if (s.output_dir.empty()) throw ContractError("output directory not given (--out or output_dir)");
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("error while writing " + path.string());
}

std::vector<std::string> all_captions(const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& e : m.entries) out.insert(out.end(), e.captions.begin(), e.captions.end());
  return out;
}

// Loads or builds the vocabulary used for training.
Vocabulary training_vocab(RunSpec& s, const DatasetManifest& train, std::ostream& err) {
  if (s.vocab.empty()) s.vocab = s.output_dir / "vocab.txt";
  if (fs::exists(s.vocab)) return load_vocab(s.vocab);
  const auto captions = all_captions(train);
  auto vocab = build_vocab(captions, s.model.vocab_size);
  fs::create_directories(s.vocab.parent_path().empty() ? fs::path(".") : s.vocab.parent_path());
  save_vocab(vocab, s.vocab);
  err << "built vocabulary of " << vocab.size() << " entries at " << s.vocab.string() << "\n";
  return vocab;
}

void align_vocab_size(ModelConfig& model, const Vocabulary& vocab, std::ostream& err) {
  if (model.vocab_size != vocab.size()) {
    err << "model vocab_size " << model.vocab_size << " adjusted to the vocabulary's " << vocab.size() << "\n";
    model.vocab_size = vocab.size();
  }
}

json record_summary(const HistoryRecord& r) { return history_json(r); }

int cmd_synth(const CommonOptions& o, std::optional<std::size_t> videos, std::optional<std::size_t> concepts,
              std::ostream& out) {
  RunSpec s = resolve_spec(o);
  require_output_dir(s);
  if (videos) s.synth.n_videos = *videos;
  if (concepts) s.synth.n_concepts = *concepts;
  const auto corpus = synth_dataset(s.synth, s.output_dir);
  out << json{{"train", (s.output_dir / "train.jsonl").string()},
              {"val", (s.output_dir / "val.jsonl").string()},
              {"train_videos", corpus.train.entries.size()},
              {"val_videos", corpus.val.entries.size()}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_build_vocab(const CommonOptions& o, const std::string& manifest, std::optional<std::size_t> size,
                    const std::string& vocab_out, std::ostream& out) {
  RunSpec s = resolve_spec(o);
  const fs::path m = manifest.empty() ? s.train_manifest : fs::path(manifest);
  require_file(m, "manifest");
  const fs::path dest = vocab_out.empty() ? s.vocab : fs::path(vocab_out);
  if (dest.empty()) throw ContractError("vocabulary output path not given (--out or data.vocab)");
  const auto captions = all_captions(load_manifest(m, "train"));
  const auto vocab = build_vocab(captions, size.value_or(s.model.vocab_size));
  save_vocab(vocab, dest);
  out << json{{"vocab", dest.string()}, {"size", vocab.size()}}.dump() << '\n';
  return kExitOk;
}

struct DataPaths {
  std::string train, val, vocab;
};

void apply_data_flags(RunSpec& s, const DataPaths& d) {
  if (!d.train.empty()) s.train_manifest = d.train;
  if (!d.val.empty()) s.val_manifest = d.val;
  if (!d.vocab.empty()) s.vocab = d.vocab;
}

int cmd_train(const CommonOptions& o, const DataPaths& d, std::optional<std::size_t> epochs, std::ostream& out,
              std::ostream& err) {
  RunSpec s = resolve_spec(o);
  apply_data_flags(s, d);
  if (epochs) s.train.epochs = *epochs;
  require_output_dir(s);
  require_file(s.train_manifest, "train manifest");
  require_file(s.val_manifest, "val manifest");

  const auto train_m = load_manifest(s.train_manifest, "train");
  const auto val_m = load_manifest(s.val_manifest, "val");
  if (train_m.entries.empty()) throw ContractError("train manifest is empty");
  if (val_m.entries.empty()) throw ContractError("val manifest is empty");
  fs::create_directories(s.output_dir);
  const auto vocab = training_vocab(s, train_m, err);
  align_vocab_size(s.model, vocab, err);

  const auto train = prepare_clips(load_samples(train_m), vocab, s.model.l_max);
  const auto val = prepare_clips(load_samples(val_m), vocab, s.model.l_max);
  Rng init_rng(s.train.seed);
  TransformerModel<float> model(s.model, init_rng);
  auto run = s.train;
  run.checkpoint_dir = s.output_dir / "xe";
  const auto result = train_xe(model, vocab, train, val, s.schedule, run);
  write_json_file(s.output_dir / "xe" / "run_config.json", run_spec_json(s));
  json summary{{"best_checkpoint", result.best_checkpoint.string()},
               {"history", (run.checkpoint_dir / "history.jsonl").string()},
               {"steps", result.steps},
               {"initial", record_summary(result.initial)}};
  if (!result.history.empty()) summary["best"] = record_summary(result.history[result.best_index]);
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_scst(const CommonOptions& o, const DataPaths& d, const std::string& init, const std::string& trace,
             std::optional<std::size_t> epochs, std::ostream& out, std::ostream& err) {
  RunSpec s = resolve_spec(o);
  apply_data_flags(s, d);
  if (epochs) s.scst_run.epochs = *epochs;
  require_output_dir(s);
  const fs::path init_path = init.empty() ? s.output_dir / "xe" / "best.vttc" : fs::path(init);
  require_file(init_path, "initial checkpoint");
  require_file(s.train_manifest, "train manifest");
  require_file(s.val_manifest, "val manifest");
  if (s.vocab.empty()) s.vocab = s.output_dir / "vocab.txt";
  require_file(s.vocab, "vocabulary");

  const auto vocab = load_vocab(s.vocab);
  auto model = load_checkpoint(init_path);
  if (model.config().vocab_size != vocab.size()) {
    throw FormatError("checkpoint expects " + std::to_string(model.config().vocab_size) +
                      " vocabulary entries, " + s.vocab.string() + " has " + std::to_string(vocab.size()));
  }
  const auto train_m = load_manifest(s.train_manifest, "train");
  const auto val_m = load_manifest(s.val_manifest, "val");
  if (train_m.entries.empty() || val_m.entries.empty()) throw ContractError("empty manifest");
  const auto train = prepare_clips(load_samples(train_m), vocab, model.config().l_max);
  const auto val = prepare_clips(load_samples(val_m), vocab, model.config().l_max);

  auto rc = s.reward;
  rc.idf = compute_idf(train.reference_words);
  auto run = s.scst_run;
  run.checkpoint_dir = s.output_dir / "scst";
  const auto result = finetune_scst(model, vocab, train, val, rc, run, trace);
  err << "finetuned for " << result.steps << " steps\n";
  json summary{{"best_checkpoint", result.best_checkpoint.string()},
               {"history", (run.checkpoint_dir / "history.jsonl").string()},
               {"steps", result.steps},
               {"initial", record_summary(result.initial)}};
  if (!result.history.empty()) summary["best"] = record_summary(result.history[result.best_index]);
  out << summary.dump() << '\n';
  return kExitOk;
}

struct InferenceInputs {
  TransformerModel<float> model;
  Vocabulary vocab;
  std::vector<VideoSample> clips;
};

InferenceInputs load_inference(const CommonOptions& o, const std::string& checkpoint, const std::string& manifest,
                               const std::string& vocab_path) {
  RunSpec s = resolve_spec(o);
  const fs::path ck = checkpoint.empty() ? s.output_dir / "xe" / "best.vttc" : fs::path(checkpoint);
  const fs::path m = manifest.empty() ? s.val_manifest : fs::path(manifest);
  const fs::path v = vocab_path.empty() ? (s.vocab.empty() ? s.output_dir / "vocab.txt" : s.vocab)
                                        : fs::path(vocab_path);
  require_file(ck, "checkpoint");
  require_file(m, "manifest");
  require_file(v, "vocabulary");
  auto vocab = load_vocab(v);
  auto model = load_checkpoint(ck);
  if (model.config().vocab_size != vocab.size()) {
    throw FormatError("checkpoint expects " + std::to_string(model.config().vocab_size) +
                      " vocabulary entries, " + v.string() + " has " + std::to_string(vocab.size()));
  }
  return {std::move(model), std::move(vocab), load_samples(load_manifest(m))};
}

json report_json(const MetricReport& r) {
  json per = json::array();
  for (const auto& s : r.per_sample) {
    per.push_back(
        {{"id", s.id}, {"caption", s.caption}, {"bleu4", s.bleu4}, {"cider", s.cider}, {"cider_d", s.cider_d}});
  }
  return json{{"bleu4", r.bleu4}, {"cider", r.cider}, {"cider_d", r.cider_d}, {"per_sample", std::move(per)}};
}

int cmd_caption(const CommonOptions& o, const std::string& checkpoint, const std::string& manifest,
                const std::string& vocab_path, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) throw ContractError("caption: --out is required");
  const auto in = load_inference(o, checkpoint, manifest, vocab_path);
  const auto captions = caption_clips(in.model, in.clips, in.vocab);
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw IoError("cannot write " + out_path);
  for (std::size_t i = 0; i < captions.size(); ++i) f << json{{"id", in.clips[i].id}, {"caption", captions[i]}}.dump() << '\n';
  if (!f) throw IoError("error while writing " + out_path);
  out << json{{"captions", out_path}, {"count", captions.size()}}.dump() << '\n';
  return kExitOk;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& manifest,
                 const std::string& vocab_path, const std::string& out_path, std::ostream& out) {
  const auto in = load_inference(o, checkpoint, manifest, vocab_path);
  const auto report = report_json(evaluate(in.model, in.clips, in.vocab));
  if (!out_path.empty()) write_json_file(out_path, report);
  out << json{{"bleu4", report["bleu4"]}, {"cider", report["cider"]}, {"cider_d", report["cider_d"]}}.dump()
      << '\n';
  return kExitOk;
}

// Captions keyed by id from a JSON-lines file; `field` is "caption" or "captions".
std::vector<std::pair<std::string, json>> read_jsonl_field(const fs::path& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::pair<std::string, json>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      rows.emplace_back(j.at("id").get<std::string>(), j.at(field));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

int cmd_score(const std::string& hyp, const std::string& refs_path, const std::string& out_path, std::ostream& out) {
  require_file(hyp, "hypothesis file");
  require_file(refs_path, "reference manifest");
  std::map<std::string, std::vector<std::string>> refs;
  for (auto& [id, caps] : read_jsonl_field(refs_path, "captions")) {
    try {
      auto list = caps.get<std::vector<std::string>>();
      if (list.empty()) throw FormatError(refs_path + ": entry '" + id + "' has no captions");
      if (!refs.emplace(id, std::move(list)).second) throw FormatError(refs_path + ": duplicate id '" + id + "'");
    } catch (const json::exception& e) {
      throw FormatError(refs_path + ": captions of '" + id + "': " + e.what());
    }
  }
  std::vector<std::string> ids, captions;
  std::vector<std::vector<std::string>> references;
  for (auto& [id, cap] : read_jsonl_field(hyp, "caption")) {
    if (!cap.is_string()) throw FormatError(hyp + ": caption of '" + id + "' is not a string");
    const auto it = refs.find(id);
    if (it == refs.end()) throw DataError(hyp + ": no references for id '" + id + "'");
    ids.push_back(id);
    captions.push_back(cap.get<std::string>());
    references.push_back(it->second);
  }
  const auto report = report_json(score_captions(ids, captions, references));
  if (!out_path.empty()) write_json_file(out_path, report);
  out << json{{"bleu4", report["bleu4"]}, {"cider", report["cider"]}, {"cider_d", report["cider_d"]}}.dump()
      << '\n';
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run config");
  cmd->add_option("--profile", o.profile, "Built-in profile: paper or desk");
  cmd->add_option("--seed", o.seed, "Seed for data, initialization and sampling");
  cmd->add_option("--out", o.out, "Output directory");
}

void add_data(CLI::App* cmd, DataPaths& d) {
  cmd->add_option("--train", d.train, "Training manifest");
  cmd->add_option("--val", d.val, "Validation manifest");
  cmd->add_option("--vocab", d.vocab, "Vocabulary file");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Video captioning transformer: data, training, finetuning and scoring", "vtt"};
  app.require_subcommand(1);

  CommonOptions common;
  DataPaths data;
  std::optional<std::size_t> videos, concepts, size, epochs;
  std::string manifest, vocab_out, init, trace, checkpoint, out_file, hyp, refs;

  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic clip corpus");
  add_common(synth, common);
  synth->add_option("--videos", videos, "Number of clips");
  synth->add_option("--concepts", concepts, "Number of concepts");

  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a WordPiece vocabulary from a manifest");
  vocab_cmd->add_option("--config", common.config, "JSON run config");
  vocab_cmd->add_option("--profile", common.profile, "Built-in profile: paper or desk");
  vocab_cmd->add_option("--manifest", manifest, "Manifest whose captions form the corpus");
  vocab_cmd->add_option("--size", size, "Target vocabulary size");
  vocab_cmd->add_option("--out", vocab_out, "Vocabulary output file");

  auto* train = app.add_subcommand("train", "Cross-entropy training");
  add_common(train, common);
  add_data(train, data);
  train->add_option("--epochs", epochs, "Epoch count");

  auto* scst = app.add_subcommand("finetune-scst", "Self-critical finetuning from a checkpoint");
  add_common(scst, common);
  add_data(scst, data);
  scst->add_option("--init", init, "Starting checkpoint (default <out>/xe/best.vttc)");
  scst->add_option("--trace", trace, "Write per-step rollout traces (JSON lines) here");
  scst->add_option("--epochs", epochs, "Epoch count");

  auto* caption = app.add_subcommand("caption", "Greedy captions for a manifest");
  add_common(caption, common);
  caption->add_option("--checkpoint", checkpoint, "Model checkpoint");
  caption->add_option("--manifest", manifest, "Clips to caption");
  caption->add_option("--vocab", data.vocab, "Vocabulary file");
  caption->add_option("--captions", out_file, "Caption output file (JSON lines)")->required();

  auto* eval = app.add_subcommand("evaluate", "Caption a manifest and score against its references");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint");
  eval->add_option("--manifest", manifest, "Clips with references");
  eval->add_option("--vocab", data.vocab, "Vocabulary file");
  eval->add_option("--report", out_file, "Full report output (JSON)");

  auto* score = app.add_subcommand("score", "Score a caption file against a reference manifest");
  score->add_option("--hyp", hyp, "Captions (JSON lines {id, caption})")->required();
  score->add_option("--refs", refs, "Reference manifest")->required();
  score->add_option("--report", out_file, "Full report output (JSON)");

  std::vector<const char*> argv;
  argv.push_back("vtt");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, videos, concepts, out);
    if (vocab_cmd->parsed()) return cmd_build_vocab(common, manifest, size, vocab_out, out);
    if (train->parsed()) return cmd_train(common, data, epochs, out, err);
    if (scst->parsed()) return cmd_scst(common, data, init, trace, epochs, out, err);
    if (caption->parsed()) return cmd_caption(common, checkpoint, manifest, data.vocab, out_file, out);
    if (eval->parsed()) return cmd_evaluate(common, checkpoint, manifest, data.vocab, out_file, out);
    if (score->parsed()) return cmd_score(hyp, refs, out_file, out);
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kExitNumeric;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace vtt
