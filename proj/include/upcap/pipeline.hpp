#pragma once

#include "upcap/config.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace upcap {

enum class Stage { kPrompt, kUic, kRefine, kEvaluate, kCaption };

std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);

/// Version string recorded in every manifest.
std::string code_version();

struct StageOptions {
  /// Replace an existing stage directory instead of refusing.
  bool force = false;
  /// caption only: image JSONL to caption (defaults to test_images) and the
  /// caption JSONL to write (defaults to <out_dir>/caption/captions.jsonl).
  std::optional<std::filesystem::path> input;
  std::optional<std::filesystem::path> output;
};

struct StageResult {
  std::filesystem::path dir;
  Json manifest;
  Json summary;  // short human-oriented numbers for the CLI
};

/// <out_dir>/<stage name>
std::filesystem::path stage_dir(const RunConfig& config, Stage stage);

/// Runs one stage. Later stages read the checkpoints of earlier ones from the
/// same out_dir and raise MissingStage ("stage uic required") when absent.
/// Each stage writes its artifacts plus manifest.json and never touches
/// another stage's directory.
StageResult run_stage(Stage stage, const RunConfig& config, const StageOptions& options = {});

}  // namespace upcap
