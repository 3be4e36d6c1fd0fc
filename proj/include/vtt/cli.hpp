#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vtt/features.hpp"
#include "vtt/model.hpp"
#include "vtt/scst.hpp"
#include "vtt/training.hpp"

namespace vtt {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

/// Everything a pipeline command needs, loaded from a JSON config on top of a
/// named profile.
///
/// {
///   "profile": "paper" | "desk",
///   "model": {...}, "schedule": {...}, "train": {...},
///   "scst": {...reward keys...}, "scst_run": {...run keys...},
///   "synth": {"seed", "videos", "concepts"},
///   "data": {"train", "val", "vocab"},
///   "output_dir": "..."
/// }
///
/// Relative paths inside the file resolve against the file's directory.
struct RunSpec {
  std::string profile = "paper";
  ModelConfig model;
  ScheduleConfig schedule;
  TrainRunConfig train;
  RewardConfig reward;
  TrainRunConfig scst_run;
  SynthConfig synth;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
  std::filesystem::path vocab;
  std::filesystem::path output_dir;

  static RunSpec paper();
  static RunSpec desk();
  static RunSpec for_profile(const std::string& name);

  /// Sets every seed (data, XE, SCST) at once.
  void set_seed(std::uint64_t seed);
};

/// Applies a parsed config object on top of the profile it names (or `paper`).
/// Unknown keys raise FormatError.
RunSpec run_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunSpec load_run_spec(const std::filesystem::path& path);
nlohmann::json run_spec_json(const RunSpec& spec);

/// Parses argv and runs one subcommand. Never throws; errors map onto the
/// exit codes above with a message on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vtt
