#include "upcap/metrics.hpp"

#include "upcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace upcap {
namespace {

using NgramCounts = std::map<Sentence, double>;

NgramCounts ngram_counts(const Sentence& s, std::size_t n) {
  NgramCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    out[Sentence(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))] += 1.0;
  return out;
}

double bleu_from(const BleuStats& st, bool smooth) {
  if (st.candidate_length == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    const double add = (smooth && n > 0) ? 1.0 : 0.0;
    const double num = st.matches[n] + add;
    const double den = st.totals[n] + add;
    if (num <= 0.0 || den <= 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  double bp = 0.0;
  if (st.candidate_length < st.reference_length) bp = 1.0 - st.reference_length / st.candidate_length;
  return std::exp(log_sum / 4.0 + bp);
}

}  // namespace

void BleuStats::add(const Sentence& candidate, std::span<const Sentence> references) {
  if (references.empty()) throw InvalidInput("BLEU needs at least one reference");
  for (std::size_t n = 1; n <= 4; ++n) {
    const NgramCounts cand = ngram_counts(candidate, n);
    NgramCounts max_ref;
    for (const auto& r : references)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : cand) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matches[n - 1] += std::min(c, it->second);
      totals[n - 1] += c;
    }
  }
  const double c = static_cast<double>(candidate.size());
  double best = static_cast<double>(references.front().size());
  for (const auto& r : references) {
    const double len = static_cast<double>(r.size());
    const double d = std::abs(len - c), bd = std::abs(best - c);
    if (d < bd || (d == bd && len < best)) best = len;
  }
  candidate_length += c;
  reference_length += best;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (int n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  candidate_length += o.candidate_length;
  reference_length += o.reference_length;
  return *this;
}

double BleuStats::score() const { return bleu_from(*this, false); }
double BleuStats::smoothed_score() const { return bleu_from(*this, true); }

MetricScore bleu4(const Sentence& candidate, std::span<const Sentence> references) {
  if (references.empty()) throw InvalidInput("BLEU needs at least one reference");
  if (candidate.empty()) return {0.0, true};
  BleuStats st;
  st.add(candidate, references);
  return {st.score(), false};
}

double bleu4_smoothed(const Sentence& candidate, std::span<const Sentence> references) {
  if (candidate.empty()) return 0.0;
  BleuStats st;
  st.add(candidate, references);
  return st.smoothed_score();
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

MetricScore rouge_l(const Sentence& candidate, std::span<const Sentence> references) {
  if (references.empty()) throw InvalidInput("ROUGE-L needs at least one reference");
  if (candidate.empty()) return {0.0, true};
  const double b2 = kRougeBeta * kRougeBeta;
  double best = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(candidate, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(r.size());
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return {best, false};
}

std::vector<double> cider_scores(std::span<const CaptionItem> corpus) {
  if (corpus.empty()) throw InvalidInput("CIDEr needs a non-empty corpus");
  const double log_n = std::log(static_cast<double>(corpus.size()));

  std::array<std::map<Sentence, double>, 4> doc_freq;
  for (const auto& item : corpus) {
    if (item.references.empty()) throw InvalidInput("item '" + item.image_id + "' has no references");
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Sentence, bool> seen;
      for (const auto& r : item.references)
        for (const auto& [g, c] : ngram_counts(r, n)) seen[g] = true;
      for (const auto& [g, _] : seen) doc_freq[n - 1][g] += 1.0;
    }
  }

  auto tfidf = [&](const Sentence& s, std::size_t n) {
    NgramCounts v = ngram_counts(s, n);
    for (auto& [g, tf] : v) {
      auto it = doc_freq[n - 1].find(g);
      const double df = it == doc_freq[n - 1].end() ? 0.0 : it->second;
      tf *= log_n - std::log(std::max(1.0, df));
    }
    return v;
  };
  auto cosine = [](const NgramCounts& a, const NgramCounts& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, x] : a) {
      na += x * x;
      auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& [g, y] : b) nb += y * y;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& item : corpus) {
    double total = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts c = tfidf(item.candidate, n);
      double sum = 0.0;
      for (const auto& r : item.references) sum += cosine(c, tfidf(r, n));
      total += sum / static_cast<double>(item.references.size());
    }
    out.push_back(10.0 * total / 4.0);
  }
  return out;
}

double cider(std::span<const CaptionItem> corpus) {
  const auto scores = cider_scores(corpus);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

Json EvalReport::to_json() const {
  Json rows = Json::array();
  for (const auto& it : items) {
    rows.push_back({{"image_id", it.image_id},
                    {"caption", it.caption},
                    {"bleu_stats",
                     {{"matches", it.bleu.matches},
                      {"totals", it.bleu.totals},
                      {"candidate_length", it.bleu.candidate_length},
                      {"reference_length", it.bleu.reference_length}}},
                    {"bleu4_smoothed_diagnostic", it.bleu4_smoothed},
                    {"rouge_l", it.rouge_l},
                    {"cider", it.cider}});
  }
  return Json{{"B4", bleu4}, {"R", rouge_l}, {"C", cider}, {"items", rows}};
}

EvalReport score_corpus(std::span<const CaptionItem> corpus) {
  if (corpus.empty()) throw InvalidInput("cannot score an empty test set");
  EvalReport report;
  const auto ciders = cider_scores(corpus);
  BleuStats total;
  double rouge_sum = 0.0, cider_sum = 0.0;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto& item = corpus[k];
    ItemScore s;
    s.image_id = item.image_id;
    for (const auto& w : item.candidate) s.caption += (s.caption.empty() ? "" : " ") + w;
    s.bleu.add(item.candidate, item.references);
    s.bleu4_smoothed = s.bleu.smoothed_score();
    s.rouge_l = rouge_l(item.candidate, item.references).value;
    s.cider = ciders[k];
    total += s.bleu;
    rouge_sum += s.rouge_l;
    cider_sum += s.cider;
    report.items.push_back(std::move(s));
  }
  const double n = static_cast<double>(corpus.size());
  report.bleu4 = 100.0 * total.score();
  report.rouge_l = 100.0 * rouge_sum / n;
  report.cider = 100.0 * cider_sum / n;
  return report;
}

std::vector<ReferenceItem> load_references(const std::filesystem::path& path) {
  std::vector<ReferenceItem> out;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    ReferenceItem item;
    item.image_id = row.at("image_id").get<std::string>();
    item.references = row.at("references").get<std::vector<std::string>>();
    out.push_back(std::move(item));
  });
  return out;
}

EvalReport evaluate(const CaptionModel& model, const DualEncoder& backbone,
                    std::span<const ImageRecord> test_images,
                    std::span<const ReferenceItem> references) {
  if (test_images.empty()) throw InvalidInput("empty test set");
  std::map<std::string, const ReferenceItem*> by_id;
  for (const auto& r : references) by_id[r.image_id] = &r;

  std::string missing;
  for (const auto& im : test_images) {
    auto it = by_id.find(im.id);
    if (it == by_id.end() || it->second->references.empty())
      missing += (missing.empty() ? "" : ", ") + im.id;
  }
  if (!missing.empty()) throw InvalidInput("missing references for: " + missing);

  std::vector<CaptionItem> corpus;
  for (const auto& im : test_images) {
    CaptionItem item;
    item.image_id = im.id;
    const auto seq = model.caption(backbone.encode_image(im), backbone);
    item.candidate = surface_words(seq, model.vocab);
    for (const auto& r : by_id[im.id]->references) item.references.push_back(normalize(r));
    corpus.push_back(std::move(item));
  }
  return score_corpus(corpus);
}

}  // namespace upcap
