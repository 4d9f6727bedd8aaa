#include "upcap/refine.hpp"

#include "upcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace upcap {
namespace {

std::string histogram(const std::vector<double>& scores, int bins = 10) {
  if (scores.empty()) return "(no scores)";
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  std::vector<int> counts(bins, 0);
  for (double s : scores) counts[std::min(bins - 1, static_cast<int>((s - lo) / width))]++;
  std::ostringstream out;
  out.precision(4);
  for (int b = 0; b < bins; ++b) out << "[" << lo + b * width << "," << lo + (b + 1) * width << "):" << counts[b] << " ";
  return out.str();
}

Json heldout_json(const HeldOutScores& s) {
  Json j{{"mean_metric", s.mean_metric}};
  if (s.eval) j["eval"] = {{"B4", s.eval->bleu4}, {"R", s.eval->rouge_l}, {"C", s.eval->cider}};
  return j;
}

double caption_metric(const ImageFeature& f, const TokenSequence& caption, const Vocabulary& vocab,
                      const DualEncoder& backbone) {
  // An empty caption matches nothing; it gets the floor of the metric range.
  if (caption.empty()) return -backbone.similarity_scale();
  return metric_prompt(f, caption, vocab, backbone);
}

}  // namespace

double metric_prompt(const ImageFeature& image, const TokenSequence& caption, const Vocabulary& vocab,
                     const DualEncoder& backbone) {
  const TextFeature text = backbone.encode_text(caption, vocab);
  return backbone.similarity_scale() * cosine_similarity(image.vector, text.vector);
}

Json PseudoPair::to_json(const Vocabulary& vocab) const {
  return Json{{"image_id", image_id},
              {"caption", detokenize(caption, vocab)},
              {"metric", metric},
              {"kept", kept},
              {"iteration", iteration}};
}

std::vector<PseudoPair> filter_pairs(std::span<const PseudoPair> pairs, double threshold) {
  std::vector<PseudoPair> kept;
  for (const auto& p : pairs) {
    if (!passes_gate(p.metric, threshold)) continue;
    kept.push_back(p);
    kept.back().kept = true;
  }
  return kept;
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw InvalidInput("percentile of an empty set");
  if (pct < 0.0 || pct > 100.0) throw InvalidInput("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SupervisedLoss supervised_loss(const CaptionModel& model, std::span<const Vec> conditions,
                               std::span<const TokenSequence> captions, GeneratorParams* grad) {
  if (conditions.size() != captions.size()) throw InvalidInput("conditions and captions differ in count");
  if (captions.empty()) throw EmptyGate("empty supervised batch: the threshold kept no pseudo pairs");

  std::vector<std::vector<int>> actions;
  SupervisedLoss out;
  for (const auto& c : captions) {
    if (c.empty()) throw DegenerateInput("cannot train on an empty caption");
    actions.push_back(teacher_actions(c, model.max_len));
    out.tokens += actions.back().size();
  }
  const double w = 1.0 / static_cast<double>(out.tokens);
  for (std::size_t k = 0; k < captions.size(); ++k) {
    std::vector<double> ones(actions[k].size(), 1.0);
    out.total_nll += model.generator.weighted_nll(conditions[k], actions[k], ones, nullptr);
    if (grad) {
      std::vector<double> scaled(actions[k].size(), w);
      model.generator.weighted_nll(conditions[k], actions[k], scaled, grad);
    }
  }
  out.mean_token_loss = out.total_nll * w;
  if (!std::isfinite(out.mean_token_loss)) throw TrainingDiverged("supervised loss is not finite");
  return out;
}

SupervisedLoss supervised_step(CaptionModel& model, Adam& optimizer, std::span<const Vec> conditions,
                               std::span<const TokenSequence> captions, double grad_clip) {
  GeneratorParams grad = GeneratorParams::zeros(model.generator.shape());
  const SupervisedLoss loss = supervised_loss(model, conditions, captions, &grad);
  clip_global_norm(grad, grad_clip);
  optimizer.step(model.generator.params(), grad);
  if (!params_finite(model.generator.params()))
    throw TrainingDiverged("generator parameters became non-finite");
  return loss;
}

HeldOutScores score_heldout(const CaptionModel& model, const DualEncoder& backbone,
                            const HeldOutSet& heldout) {
  HeldOutScores s;
  if (heldout.images.empty()) return s;
  double sum = 0.0;
  for (const auto& rec : heldout.images) {
    const ImageFeature f = backbone.encode_image(rec);
    sum += caption_metric(f, model.caption(f, backbone), model.vocab, backbone);
  }
  s.mean_metric = sum / static_cast<double>(heldout.images.size());
  if (!heldout.references.empty()) s.eval = evaluate(model, backbone, heldout.images, heldout.references);
  return s;
}

Json RefineReport::to_json() const {
  Json its = Json::array();
  for (const auto& it : iterations) {
    Json j{{"iteration", it.iteration},
           {"threshold", it.threshold},
           {"kept", it.kept},
           {"total", it.total},
           {"mean_kept_metric", it.mean_kept_metric},
           {"mean_metric", it.mean_metric},
           {"train_loss", it.train_loss}};
    if (it.heldout) j["heldout"] = heldout_json(*it.heldout);
    its.push_back(std::move(j));
  }
  Json out{{"iterations", its}};
  out["initial"] = initial ? heldout_json(*initial) : Json(nullptr);
  return out;
}

RefineResult refine_loop(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                         GeneratorCheckpoint checkpoint, const RefineOptions& options,
                         const HeldOutSet* heldout) {
  if (options.iterations < 0) throw ConfigError("iterations must be >= 0");
  if (options.learning_rate < 0.0) throw ConfigError("lr_stage3 must be >= 0");
  if (options.batch_size < 1) throw ConfigError("batch_size_stage3 must be >= 1");
  if (options.samples < 0) throw ConfigError("samples_stage3 must be >= 0");
  if (checkpoint.spec_hash != backbone.spec().hash())
    throw InvalidInput("generator checkpoint was trained against a different backbone spec");

  RefineResult result;
  CaptionModel& model = checkpoint.model;
  if (heldout && options.iterations > 0) result.report.initial = score_heldout(model, backbone, *heldout);

  std::vector<ImageFeature> features;
  std::vector<Vec> conditions;
  for (const auto& rec : corpus.images) {
    features.push_back(backbone.encode_image(rec));
    conditions.push_back(model.condition(features.back(), backbone));
  }

  Rng rng(options.seed ^ 0x2545f4914f6cdd1dULL);
  std::optional<double> threshold;
  if (options.threshold_mode == ThresholdMode::kAbsolute) threshold = options.threshold;

  for (int iter = 1; iter <= options.iterations; ++iter) {
    std::vector<PseudoPair> pairs;
    std::vector<double> scores;
    std::vector<std::size_t> source;  // image index of every pair
    for (std::size_t k = 0; k < features.size(); ++k) {
      for (int s = 0; s <= options.samples; ++s) {
        PseudoPair p;
        p.image_id = features[k].image_id;
        p.iteration = iter;
        p.caption = s == 0
                        ? model.generator.generate(conditions[k], DecodeMode::kGreedy, model.max_len).tokens
                        : model.generator.generate(conditions[k], DecodeMode::kSample, model.max_len, &rng).tokens;
        p.metric = caption_metric(features[k], p.caption, model.vocab, backbone);
        scores.push_back(p.metric);
        pairs.push_back(std::move(p));
        source.push_back(k);
      }
    }
    if (!threshold) threshold = percentile(scores, options.threshold_percentile);

    IterationReport rep;
    rep.iteration = iter;
    rep.threshold = *threshold;
    rep.total = pairs.size();
    std::vector<Vec> kept_conditions;
    std::vector<TokenSequence> kept_captions;
    double kept_sum = 0.0, all_sum = 0.0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      all_sum += pairs[k].metric;
      // Empty captions carry nothing to imitate, whatever the threshold.
      pairs[k].kept = passes_gate(pairs[k].metric, *threshold) && !pairs[k].caption.empty();
      if (!pairs[k].kept) continue;
      kept_sum += pairs[k].metric;
      kept_conditions.push_back(conditions[source[k]]);
      kept_captions.push_back(pairs[k].caption);
    }
    rep.kept = kept_captions.size();
    rep.mean_metric = pairs.empty() ? 0.0 : all_sum / static_cast<double>(pairs.size());
    if (rep.kept == 0) {
      throw EmptyGate("refine iteration " + std::to_string(iter) + ": no pseudo pair reached threshold " +
                      std::to_string(*threshold) + "; score histogram: " + histogram(scores));
    }
    rep.mean_kept_metric = kept_sum / static_cast<double>(rep.kept);

    Adam optimizer(options.learning_rate);
    std::vector<std::size_t> order(rep.kept);
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0;
    int batches = 0;
    std::vector<Vec> bc;
    std::vector<TokenSequence> bt;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
        bc.clear();
        bt.clear();
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
        for (std::size_t k = start; k < stop; ++k) {
          bc.push_back(kept_conditions[order[k]]);
          bt.push_back(kept_captions[order[k]]);
        }
        try {
          loss_sum += supervised_step(model, optimizer, bc, bt, options.grad_clip).mean_token_loss;
        } catch (const TrainingDiverged& e) {
          throw TrainingDiverged("refine iteration " + std::to_string(iter) + ": " + e.what());
        }
        ++batches;
      }
    }
    rep.train_loss = batches > 0 ? loss_sum / batches : 0.0;
    if (heldout) rep.heldout = score_heldout(model, backbone, *heldout);

    result.report.iterations.push_back(std::move(rep));
    result.pairs.push_back(std::move(pairs));
  }

  if (options.iterations > 0) checkpoint.stage = "refine";
  result.checkpoint = std::move(checkpoint);
  return result;
}

}  // namespace upcap
