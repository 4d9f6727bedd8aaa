#pragma once

#include "upcap/backbone.hpp"
#include "upcap/captioner.hpp"
#include "upcap/metrics.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace upcap {

/// L = w * cos(f_I, encode_text(caption)).
double metric_prompt(const ImageFeature& image, const TokenSequence& caption, const Vocabulary& vocab,
                     const DualEncoder& backbone);

struct PseudoPair {
  std::string image_id;
  TokenSequence caption;
  double metric = 0.0;
  bool kept = false;
  int iteration = 1;

  Json to_json(const Vocabulary& vocab) const;
};

/// Keep rule of the metric gate.
inline bool passes_gate(double metric, double threshold) { return metric >= threshold; }

/// Pairs with metric >= threshold, in input order, each marked kept.
std::vector<PseudoPair> filter_pairs(std::span<const PseudoPair> pairs, double threshold);

/// Linear-interpolated percentile (0..100) of `values`.
double percentile(std::vector<double> values, double pct);

struct SupervisedLoss {
  double mean_token_loss = 0.0;
  double total_nll = 0.0;
  std::size_t tokens = 0;
};

/// Teacher-forced cross-entropy of the generator on (condition, caption)
/// pairs, averaged per target token (EOS included). When `grad` is non-null
/// it receives the gradient of the mean.
SupervisedLoss supervised_loss(const CaptionModel& model, std::span<const Vec> conditions,
                               std::span<const TokenSequence> captions, GeneratorParams* grad);

/// One optimizer update on a batch of kept pairs. An empty batch raises
/// EmptyGate: the threshold left nothing to learn from.
SupervisedLoss supervised_step(CaptionModel& model, Adam& optimizer, std::span<const Vec> conditions,
                               std::span<const TokenSequence> captions, double grad_clip);

enum class ThresholdMode { kAbsolute, kPercentile };

struct RefineOptions {
  double learning_rate = 1e-5;
  int iterations = 3;
  double threshold = 30.0;
  ThresholdMode threshold_mode = ThresholdMode::kAbsolute;
  double threshold_percentile = 60.0;
  int epochs = 1;
  int batch_size = 16;
  /// Sampled captions scored per image on top of the greedy one.
  int samples = 0;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
};

/// Images held out from training; references are optional.
struct HeldOutSet {
  std::vector<ImageRecord> images;
  std::vector<ReferenceItem> references;
};

struct HeldOutScores {
  double mean_metric = 0.0;
  std::optional<EvalReport> eval;
};

struct IterationReport {
  int iteration = 0;
  double threshold = 0.0;
  std::size_t kept = 0;
  std::size_t total = 0;
  double mean_kept_metric = 0.0;
  double mean_metric = 0.0;
  double train_loss = 0.0;
  std::optional<HeldOutScores> heldout;
};

struct RefineReport {
  std::optional<HeldOutScores> initial;
  std::vector<IterationReport> iterations;

  Json to_json() const;
};

struct RefineResult {
  GeneratorCheckpoint checkpoint;
  RefineReport report;
  std::vector<std::vector<PseudoPair>> pairs;  // every scored pair, per iteration
};

/// Mean metric prompt of greedy captions (empty captions score -w), plus
/// B4/R/C when references are present.
HeldOutScores score_heldout(const CaptionModel& model, const DualEncoder& backbone,
                            const HeldOutSet& heldout);

/// Generate for every training image (the greedy caption plus `samples`
/// sampled ones), score, gate, re-train on the kept pairs; repeat. Warm-starts each iteration from the previous generator.
/// In percentile mode the threshold is fixed from the first iteration's
/// scores. Throws EmptyGate, with a score histogram, when nothing passes.
RefineResult refine_loop(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                         GeneratorCheckpoint checkpoint, const RefineOptions& options,
                         const HeldOutSet* heldout = nullptr);

}  // namespace upcap
