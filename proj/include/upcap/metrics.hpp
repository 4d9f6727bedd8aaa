#pragma once

#include "upcap/backbone.hpp"
#include "upcap/captioner.hpp"
#include "upcap/jsonl.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace upcap {

using Sentence = std::vector<std::string>;

struct MetricScore {
  double value = 0.0;
  bool empty_candidate = false;
};

/// Clipped n-gram matches and totals for n = 1..4 plus the lengths the
/// brevity penalty needs. Stats add across items, so corpus BLEU aggregates
/// counts before taking ratios.
struct BleuStats {
  std::array<double, 4> matches{};
  std::array<double, 4> totals{};
  double candidate_length = 0.0;
  double reference_length = 0.0;  // closest reference length, ties to the shorter

  void add(const Sentence& candidate, std::span<const Sentence> references);
  BleuStats& operator+=(const BleuStats& other);
  /// Strict geometric mean; any zero precision gives 0.
  double score() const;
  /// +1 smoothing on n > 1. Diagnostic only, never reported as BLEU-4.
  double smoothed_score() const;
};

MetricScore bleu4(const Sentence& candidate, std::span<const Sentence> references);
double bleu4_smoothed(const Sentence& candidate, std::span<const Sentence> references);

inline constexpr double kRougeBeta = 1.2;

std::size_t lcs_length(const Sentence& a, const Sentence& b);

/// LCS F-measure (beta 1.2), maximum over references.
MetricScore rouge_l(const Sentence& candidate, std::span<const Sentence> references);

struct CaptionItem {
  std::string image_id;
  Sentence candidate;
  std::vector<Sentence> references;
};

/// Plain CIDEr per item: 10 x mean over n = 1..4 of the mean TF-IDF cosine
/// between the candidate and each reference. Document frequencies count the
/// items whose references contain an n-gram.
std::vector<double> cider_scores(std::span<const CaptionItem> corpus);
double cider(std::span<const CaptionItem> corpus);

struct ItemScore {
  std::string image_id;
  std::string caption;
  BleuStats bleu;
  double bleu4_smoothed = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

/// Corpus scores scaled by 100, as caption benchmarks report them.
struct EvalReport {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::vector<ItemScore> items;

  Json to_json() const;
};

EvalReport score_corpus(std::span<const CaptionItem> corpus);

struct ReferenceItem {
  std::string image_id;
  std::vector<std::string> references;
};

/// test set JSONL: {"image_id": ..., "references": [...]}.
std::vector<ReferenceItem> load_references(const std::filesystem::path& path);

/// Greedy-decodes every test image and scores it against its references.
/// Throws InvalidInput listing the ids of images without references.
EvalReport evaluate(const CaptionModel& model, const DualEncoder& backbone,
                    std::span<const ImageRecord> test_images,
                    std::span<const ReferenceItem> references);

}  // namespace upcap
