#pragma once

#include "muie/training.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace muie {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Config file: either {"model": {...}, "train": {...}} or a flat object
/// whose keys are ModelConfig and TrainConfig fields. Unknown keys throw.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// "HxW", e.g. "720x1280". Throws std::invalid_argument when malformed.
std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& text);

/// Everything needed to repeat a command: its arguments, the resolved
/// configuration, and the files it read and wrote.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::string> weights;
  std::string data_root;
  std::string output_dir;
  std::string timestamp;  // UTC, ISO 8601
};

void to_json(nlohmann::json& j, const RunManifest& m);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

/// Entry point of the `muie` tool: train, enhance, eval, flops, gradcheck.
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace muie
