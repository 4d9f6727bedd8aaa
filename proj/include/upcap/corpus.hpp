#pragma once

#include "upcap/jsonl.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace upcap {

// Reserved vocabulary slots. Corpus words never take these indices.
enum SpecialToken : int { kPad = 0, kSos = 1, kEos = 2, kUnk = 3 };
inline constexpr int kNumSpecials = 4;
inline constexpr int kDefaultMinCount = 4;
inline constexpr int kDefaultMaxLen = 20;

class Vocabulary {
 public:
  /// Keeps every normalized token seen at least `min_count` times. Indices
  /// after the specials follow descending frequency, ties lexicographic.
  static Vocabulary build(std::span<const std::string> sentences,
                          int min_count = kDefaultMinCount);

  /// Restores a vocabulary from its ordered word list (specials included).
  static Vocabulary from_words(std::vector<std::string> words, int min_count);

  /// Index of `word`, or kUnk when it is not in the vocabulary.
  int index(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(int index) const;
  bool valid(int index) const { return index >= 0 && index < size(); }
  int size() const { return static_cast<int>(words_.size()); }
  int min_count() const { return min_count_; }
  const std::vector<std::string>& words() const { return words_; }

  static bool is_special(int index) { return index >= 0 && index < kNumSpecials; }
  static const std::string& special_name(int index);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> lookup_;
  int min_count_ = kDefaultMinCount;
};

/// A caption as vocabulary indices. Generated captions may be empty (the
/// decoder emitted EOS first); everything that consumes text rejects that.
struct TokenSequence {
  std::vector<int> indices;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Lowercase, strip punctuation from both ends of every whitespace token,
/// drop tokens left empty.
std::vector<std::string> normalize(std::string_view text);

/// Normalizes and maps to indices; unknown words become kUnk, output is
/// truncated to `max_len`. Throws DegenerateInput when nothing survives.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab,
                       int max_len = kDefaultMaxLen);

/// Space-joined surface words with specials dropped.
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

/// Surface words with specials dropped, for metric computation.
std::vector<std::string> surface_words(const TokenSequence& seq, const Vocabulary& vocab);

/// One line of images.jsonl: either a precomputed feature or a toy latent.
struct ImageRecord {
  std::string id;
  std::optional<std::vector<double>> feature;
  std::optional<std::vector<double>> latent;
};

struct UnpairedCorpus {
  std::vector<ImageRecord> images;
  std::vector<std::string> sentences;
  std::optional<std::map<std::string, std::vector<std::string>>> concepts;
};

/// One images.jsonl row: {"id", "feature"} or {"id", "latent"}.
ImageRecord image_record_from_json(const Json& row);
std::vector<ImageRecord> load_images(const std::filesystem::path& path);
std::vector<std::string> load_sentences(const std::filesystem::path& path);
std::map<std::string, std::vector<std::string>> load_concepts(const std::filesystem::path& path);

/// Reads the three unpaired files. A missing concept path leaves concepts empty.
UnpairedCorpus load_corpus(const std::filesystem::path& image_path,
                           const std::filesystem::path& sentence_path,
                           const std::optional<std::filesystem::path>& concept_path = std::nullopt);

}  // namespace upcap
