#include "upcap/corpus.hpp"

#include "upcap/error.hpp"
#include "upcap/jsonl.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>
#include <sstream>

namespace upcap {
namespace {

const std::array<std::string, kNumSpecials> kSpecialNames = {"<pad>", "<sos>", "<eos>", "<unk>"};

std::vector<double> number_array(const Json& value, const char* field) {
  if (!value.is_array()) throw InvalidInput(std::string("field '") + field + "' must be an array");
  std::vector<double> out;
  out.reserve(value.size());
  for (const auto& v : value) {
    if (!v.is_number()) throw InvalidInput(std::string("field '") + field + "' must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

const std::string& Vocabulary::special_name(int index) { return kSpecialNames.at(index); }

Vocabulary Vocabulary::build(std::span<const std::string> sentences, int min_count) {
  if (sentences.empty()) throw InvalidInput("cannot build a vocabulary from an empty corpus");
  if (min_count < 1) throw InvalidInput("min_count must be >= 1");

  std::unordered_map<std::string, int> counts;
  for (const auto& s : sentences)
    for (auto& w : normalize(s)) ++counts[w];

  std::vector<std::pair<std::string, int>> kept;
  for (auto& [w, n] : counts) {
    if (n < min_count) continue;
    if (std::find(kSpecialNames.begin(), kSpecialNames.end(), w) != kSpecialNames.end()) continue;
    kept.emplace_back(w, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> words(kSpecialNames.begin(), kSpecialNames.end());
  for (auto& [w, n] : kept) words.push_back(w);
  return from_words(std::move(words), min_count);
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words, int min_count) {
  if (words.size() < static_cast<std::size_t>(kNumSpecials))
    throw InvalidInput("vocabulary is missing its special tokens");
  for (int i = 0; i < kNumSpecials; ++i)
    if (words[i] != kSpecialNames[i])
      throw InvalidInput("vocabulary slot " + std::to_string(i) + " must be " + kSpecialNames[i]);
  Vocabulary v;
  v.min_count_ = min_count;
  v.words_ = std::move(words);
  for (int i = 0; i < v.size(); ++i) {
    if (!v.lookup_.emplace(v.words_[i], i).second)
      throw InvalidInput("duplicate vocabulary word '" + v.words_[i] + "'");
  }
  return v;
}

int Vocabulary::index(std::string_view word) const {
  auto it = lookup_.find(std::string(word));
  if (it == lookup_.end() || it->second < kNumSpecials) return kUnk;
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  auto it = lookup_.find(std::string(word));
  return it != lookup_.end() && it->second >= kNumSpecials;
}

const std::string& Vocabulary::word(int index) const {
  if (!valid(index)) throw InvalidInput("invalid vocabulary index " + std::to_string(index));
  return words_[index];
}

std::vector<std::string> normalize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    std::size_t b = 0, e = tok.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
    if (b == e) continue;
    std::string w = tok.substr(b, e - b);
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(std::move(w));
  }
  return out;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, int max_len) {
  if (max_len < 1) throw InvalidInput("max_len must be >= 1");
  auto words = normalize(text);
  if (words.empty()) throw DegenerateInput("text is empty after normalization");
  TokenSequence seq;
  for (const auto& w : words) {
    if (static_cast<int>(seq.size()) == max_len) break;
    seq.indices.push_back(vocab.index(w));
  }
  return seq;
}

std::vector<std::string> surface_words(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int idx : seq.indices) {
    const auto& w = vocab.word(idx);
    if (!Vocabulary::is_special(idx)) out.push_back(w);
  }
  return out;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (const auto& w : surface_words(seq, vocab)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

ImageRecord image_record_from_json(const Json& row) {
  ImageRecord rec;
  if (!row.contains("id") || !row["id"].is_string()) throw InvalidInput("missing string field 'id'");
  rec.id = row["id"].get<std::string>();
  if (row.contains("feature")) rec.feature = number_array(row["feature"], "feature");
  if (row.contains("latent")) rec.latent = number_array(row["latent"], "latent");
  if (!rec.feature && !rec.latent)
    throw InvalidInput("image '" + rec.id + "' has neither 'feature' nor 'latent'");
  return rec;
}

std::vector<ImageRecord> load_images(const std::filesystem::path& path) {
  std::vector<ImageRecord> images;
  std::map<std::string, int> seen;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    ImageRecord rec = image_record_from_json(row);
    ++seen[rec.id];
    images.push_back(std::move(rec));
  });
  std::string dups;
  for (auto& [id, n] : seen)
    if (n > 1) dups += (dups.empty() ? "" : ", ") + id;
  if (!dups.empty()) throw InvalidInput(path.string() + ": duplicate image ids: " + dups);
  return images;
}

std::vector<std::string> load_sentences(const std::filesystem::path& path) {
  std::vector<std::string> out;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    if (!row.contains("text") || !row["text"].is_string())
      throw InvalidInput("missing string field 'text'");
    out.push_back(row["text"].get<std::string>());
  });
  return out;
}

std::map<std::string, std::vector<std::string>> load_concepts(const std::filesystem::path& path) {
  std::map<std::string, std::vector<std::string>> out;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    if (!row.contains("image_id") || !row["image_id"].is_string())
      throw InvalidInput("missing string field 'image_id'");
    auto id = row["image_id"].get<std::string>();
    std::vector<std::string> concepts;
    for (const auto& c : row.at("concepts")) {
      for (auto& w : normalize(c.get<std::string>())) concepts.push_back(std::move(w));
    }
    if (!out.emplace(id, std::move(concepts)).second)
      throw InvalidInput("duplicate concept entry for image '" + id + "'");
  });
  return out;
}

UnpairedCorpus load_corpus(const std::filesystem::path& image_path,
                           const std::filesystem::path& sentence_path,
                           const std::optional<std::filesystem::path>& concept_path) {
  UnpairedCorpus corpus;
  corpus.images = load_images(image_path);
  corpus.sentences = load_sentences(sentence_path);
  // Concepts are optional side information; an absent file simply means none.
  if (concept_path && std::filesystem::exists(*concept_path))
    corpus.concepts = load_concepts(*concept_path);
  return corpus;
}

}  // namespace upcap
