#pragma once

#include "upcap/backbone.hpp"
#include "upcap/jsonl.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace upcap {

inline constexpr int kDefaultPromptLength = 8;

/// The single trainable layer in front of the frozen text encoder:
/// p = weight * f_I + bias, with p of length prompt_length * token_dim.
struct PromptExtractor {
  int prompt_length = kDefaultPromptLength;
  int token_dim = 0;
  Mat weight;  // (prompt_length * token_dim) x feature_dim
  Vec bias;

  static PromptExtractor zeros(int feature_dim, int prompt_length, int token_dim);
  static PromptExtractor random(int feature_dim, int prompt_length, int token_dim, Rng& rng);

  int output_dim() const { return prompt_length * token_dim; }
  int feature_dim() const { return static_cast<int>(weight.cols()); }

  /// Throws InvalidInput on a dimension mismatch, TrainingDiverged when the
  /// output is not finite.
  Vec extract(const ImageFeature& image) const;
};

/// Token rows [E_SOS, p_1 .. p_L, E_CLS, E_EOS] + E_pos.
struct SemanticPrompt {
  Mat rows;  // (prompt_length + 3) x token_dim
  int prompt_length = 0;

  /// Rows 1..prompt_length, positional embeddings still included.
  Mat context_rows() const { return rows.middleRows(1, prompt_length); }
};

/// Reshapes p row-major into L x token_dim and frames it. Throws InvalidInput
/// when |p| is not a positive multiple of the backbone's token_dim.
SemanticPrompt assemble_prompt(const Vec& p, const DualEncoder& backbone);

/// Inverse of assemble_prompt: strips positions and flattens the context rows.
Vec prompt_context(const SemanticPrompt& prompt, const DualEncoder& backbone);

struct InfoNceResult {
  double loss = 0.0;
  Mat grad_similarity;  // dloss / dS
};

/// Symmetric InfoNCE over a square cosine-similarity matrix S with matched
/// pairs on the diagonal; logits are scale * S and the two directions are
/// averaged.
InfoNceResult symmetric_info_nce(const Mat& similarity, double scale);

/// Contrastive loss between image features and the text features of their
/// prompts. Needs at least two pairs.
double prompt_contrastive_loss(std::span<const ImageFeature> images,
                               std::span<const SemanticPrompt> prompts,
                               const DualEncoder& backbone);

struct ExtractorGradient {
  Mat weight;
  Vec bias;
};

/// Loss for a batch of images pushed through `extractor`, with the analytic
/// gradient with respect to the extractor when `grad` is non-null.
double contrastive_loss_and_grad(const PromptExtractor& extractor,
                                 std::span<const ImageFeature> batch,
                                 const DualEncoder& backbone, ExtractorGradient* grad);

struct Stage1Options {
  double learning_rate = 1e-3;
  int batch_size = 16;
  int steps = 200;
  int prompt_length = kDefaultPromptLength;
  std::uint64_t seed = 0;
};

struct PromptCheckpoint {
  PromptExtractor extractor;
  std::string spec_hash;
  int steps = 0;
  double final_loss = 0.0;
  std::vector<double> loss_trace;

  Json to_json() const;
  static PromptCheckpoint from_json(const Json& j);
  void save(const std::filesystem::path& path) const;
  static PromptCheckpoint load(const std::filesystem::path& path);
};

/// Plain SGD on the contrastive loss; only the extractor moves. Batches walk
/// a seeded permutation that is reshuffled every epoch.
PromptCheckpoint train_stage1(std::span<const ImageFeature> images, const DualEncoder& backbone,
                              const Stage1Options& options);

/// The prompt an extractor assigns to one image.
SemanticPrompt semantic_prompt(const PromptExtractor& extractor, const ImageFeature& image,
                               const DualEncoder& backbone);

}  // namespace upcap
