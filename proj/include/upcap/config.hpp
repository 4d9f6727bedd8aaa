#pragma once

#include "upcap/backbone.hpp"
#include "upcap/captioner.hpp"
#include "upcap/prompt.hpp"
#include "upcap/refine.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace upcap {

/// Everything a run depends on. Parsed from a flat `key = value` file; every
/// field can be overridden from the command line.
struct RunConfig {
  // Data. Relative paths are resolved against the config file's directory.
  std::string images;
  std::string sentences;
  std::string concepts;
  std::string test_images;
  std::string test_references;
  std::string out_dir = "runs/default";

  // Frozen backbone.
  int feature_dim = 512;
  int token_dim = 512;
  double similarity_scale = 100.0;
  std::uint64_t backbone_seed = 0;

  // Vocabulary.
  int min_count = kDefaultMinCount;
  int max_len = kDefaultMaxLen;

  // Stage I.
  int prompt_length = 8;
  double lr_stage1 = 1e-3;
  int batch_stage1 = 16;
  int steps_stage1 = 200;

  // Stage II.
  bool use_prompt = true;
  int embed_dim = 512;
  int hidden_dim = 512;
  double lr_stage2 = 1e-3;
  int batch_stage2 = 16;
  int steps_stage2 = 300;
  int pretrain_steps_stage2 = 200;
  double lr_pretrain_stage2 = 1e-3;
  double lambda_concept = 1.0;
  double baseline_decay = 0.9;
  double grad_clip = 5.0;

  // Stage III.
  double lr_stage3 = 1e-5;
  int iterations = 3;
  double threshold = 30.0;
  std::string threshold_mode = "absolute";  // or "percentile"
  double threshold_percentile = 60.0;
  int epochs_stage3 = 1;
  int batch_stage3 = 16;
  int samples_stage3 = 0;

  std::uint64_t seed = 0;

  /// Directory that relative data paths are resolved against.
  std::filesystem::path base_dir = ".";

  static RunConfig parse(const std::string& text, const std::filesystem::path& base_dir = ".");
  static RunConfig load(const std::filesystem::path& path);

  /// Applies one `key`, `value` pair with the same typing rules as the file.
  void set(const std::string& key, const std::string& value);
  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Sorted `key = value` lines for every field except out_dir, so a run's
  /// identity does not depend on where its artifacts go.
  std::string canonical() const;
  std::string hash() const;
  Json to_json() const;

  std::filesystem::path resolve(const std::string& path) const;

  BackboneSpec backbone_spec() const;
  Stage1Options stage1_options() const;
  Stage2Options stage2_options() const;
  RefineOptions refine_options() const;
};

}  // namespace upcap
