#pragma once

#include "upcap/backbone.hpp"
#include "upcap/corpus.hpp"
#include "upcap/jsonl.hpp"
#include "upcap/lstm.hpp"
#include "upcap/optim.hpp"
#include "upcap/prompt.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace upcap {

/// Mean over the prompt's context rows; the three framing rows are ignored.
Vec pool_prompt(const SemanticPrompt& prompt);

/// [f_I ; pooled prompt]. Pass an empty pooled vector for prompt-free models.
Vec decoder_condition(const ImageFeature& image, const Vec& pooled_prompt);

struct GeneratorShape {
  int vocab_size = 0;
  int feature_dim = 512;
  int prompt_dim = 512;  // 0 for a model that takes no semantic prompt
  int embed_dim = 512;
  int hidden_dim = 512;

  int condition_dim() const { return feature_dim + prompt_dim; }
  bool operator==(const GeneratorShape&) const = default;
};

struct GeneratorParams {
  Mat in_w;   // embed_dim x condition_dim
  Vec in_b;   // embed_dim
  Mat embed;  // vocab x embed_dim
  LstmParams lstm;
  Mat out_w;  // vocab x hidden
  Vec out_b;  // vocab

  static GeneratorParams zeros(const GeneratorShape& shape);

  template <class F>
  void for_each(F&& f) {
    f("in_w", in_w);
    f("in_b", in_b);
    f("embed", embed);
    lstm.for_each(f);
    f("out_w", out_w);
    f("out_b", out_b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("in_w", in_w);
    f("in_b", in_b);
    f("embed", embed);
    lstm.for_each(f);
    f("out_w", out_w);
    f("out_b", out_b);
  }
};

enum class DecodeMode { kGreedy, kSample };

struct Generation {
  TokenSequence tokens;          // caption words, EOS excluded
  std::vector<int> actions;      // tokens plus the EOS that ended them, if any
  std::vector<double> log_probs; // log pi(action_t | prefix), one per action
  std::vector<Vec> distributions; // o_t per action, when requested
  bool ended_with_eos = false;

  bool empty() const { return tokens.empty(); }
};

/// Recurrent caption decoder. x_0 = FC_in(condition), x_t = W_e c_t,
/// h_0 = 0, o_t = softmax(W_o h_t + b_o) with PAD and SOS masked out.
class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorShape& shape, Rng& rng);
  static Generator zeros(const GeneratorShape& shape);

  const GeneratorShape& shape() const { return shape_; }
  GeneratorParams& params() { return params_; }
  const GeneratorParams& params() const { return params_; }

  /// x_0. Throws InvalidInput when the condition has the wrong width.
  Vec initial_input(const Vec& condition) const;
  /// Masked softmax over the output head.
  Vec distribution(const Vec& hidden) const;

  /// Greedy decoding takes the lowest-index argmax; sampling needs `rng`.
  /// Stops after EOS or `max_len` words.
  Generation generate(const Vec& condition, DecodeMode mode, int max_len, Rng* rng = nullptr,
                      bool record_distributions = false) const;

  /// sum_t -weights[t] * log pi(actions[t] | actions[<t]). With unit weights
  /// this is the teacher-forced NLL; with advantages it is the REINFORCE
  /// surrogate. Gradients are accumulated into `grad` when non-null.
  double weighted_nll(const Vec& condition, std::span<const int> actions,
                      std::span<const double> weights, GeneratorParams* grad) const;

 private:
  void check_condition(const Vec& condition) const;

  GeneratorShape shape_;
  GeneratorParams params_;
};

/// Actions a teacher-forced pass predicts for `caption`: its words, then EOS
/// unless the caption already fills max_len.
std::vector<int> teacher_actions(const TokenSequence& caption, int max_len);

struct DiscriminatorShape {
  int vocab_size = 0;
  int embed_dim = 512;
  int hidden_dim = 512;
  bool operator==(const DiscriminatorShape&) const = default;
};

struct DiscriminatorParams {
  Mat embed;  // vocab x embed_dim
  LstmParams lstm;
  Vec head_w;  // hidden
  Vec head_b;  // 1

  static DiscriminatorParams zeros(const DiscriminatorShape& shape);

  template <class F>
  void for_each(F&& f) {
    f("embed", embed);
    lstm.for_each(f);
    f("head_w", head_w);
    f("head_b", head_b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("embed", embed);
    lstm.for_each(f);
    f("head_w", head_w);
    f("head_b", head_b);
  }
};

/// Recurrent real/fake scorer: q_t = sigmoid(w . h_t + b) for every prefix.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorShape& shape, Rng& rng);
  static Discriminator zeros(const DiscriminatorShape& shape);

  const DiscriminatorShape& shape() const { return shape_; }
  DiscriminatorParams& params() { return params_; }
  const DiscriminatorParams& params() const { return params_; }

  /// One score per prefix. Throws DegenerateInput on an empty sequence.
  std::vector<double> discriminate(std::span<const int> tokens) const;
  std::vector<double> discriminate(const TokenSequence& seq) const { return discriminate(seq.indices); }

  /// Mean per-step binary cross-entropy against a constant target, with
  /// gradients accumulated into `grad` (scaled by `grad_weight`) when non-null.
  double bce(std::span<const int> tokens, double target, DiscriminatorParams* grad,
             double grad_weight = 1.0) const;

 private:
  DiscriminatorShape shape_;
  DiscriminatorParams params_;
};

struct ConceptSet {
  std::string image_id;
  std::set<int> indices;
};

/// Concept words that are in the vocabulary; unknown ones are dropped.
ConceptSet make_concept_set(const std::string& image_id, std::span<const std::string> words,
                            const Vocabulary& vocab);

/// Distinct concepts mentioned / max(1, |concepts|); always in [0, 1].
double concept_reward(const TokenSequence& seq, const ConceptSet& concepts);

/// Everything needed to caption an image: vocabulary, optional prompt
/// extractor, generator and its discriminator.
struct CaptionModel {
  Vocabulary vocab;
  std::optional<PromptExtractor> prompt;
  Generator generator;
  Discriminator discriminator;
  int max_len = kDefaultMaxLen;

  /// Decoder conditioning for one image: [f_I ; pool(P)] or just f_I.
  Vec condition(const ImageFeature& image, const DualEncoder& backbone) const;
  TokenSequence caption(const ImageFeature& image, const DualEncoder& backbone) const;
};

struct GeneratorCheckpoint {
  CaptionModel model;
  std::string spec_hash;
  std::string stage;  // "uic" or "refine"
  int steps = 0;
  std::vector<double> lm_loss_trace;  // per-token loss of the warm start
  std::vector<double> gen_loss_trace;
  std::vector<double> disc_loss_trace;

  Json to_json() const;
  static GeneratorCheckpoint from_json(const Json& j);
  void save(const std::filesystem::path& path) const;
  static GeneratorCheckpoint load(const std::filesystem::path& path);
};

struct Stage2Options {
  double learning_rate = 1e-3;
  int steps = 300;
  int pretrain_steps = 200;  // language-model warm start on the sentence corpus
  double pretrain_learning_rate = 1e-3;
  int batch_size = 16;
  double lambda_concept = 1.0;
  double baseline_decay = 0.9;
  double grad_clip = 5.0;
  int embed_dim = 512;
  int hidden_dim = 512;
  int max_len = kDefaultMaxLen;
  int min_count = kDefaultMinCount;
  bool use_prompt = true;
  std::uint64_t seed = 0;
};

struct AdversarialLosses {
  double gen_loss = 0.0;
  double disc_loss = 0.0;
  double mean_reward = 0.0;
};

/// Mutable state of adversarial training: the model, both optimizers and
/// the moving-average reward baseline.
class AdversarialTrainer {
 public:
  AdversarialTrainer(CaptionModel model, const Stage2Options& options);

  /// One discriminator update (real -> 1, generated -> 0 at every step)
  /// followed by one REINFORCE generator update with per-step reward
  /// q_t + lambda * concept_reward against the moving-average baseline.
  AdversarialLosses step(std::span<const Vec> conditions, std::span<const ConceptSet> concepts,
                         std::span<const TokenSequence> real_sentences, Rng& rng);

  const CaptionModel& model() const { return model_; }
  CaptionModel& model() { return model_; }
  std::optional<double> baseline() const { return baseline_; }

 private:
  CaptionModel model_;
  Stage2Options options_;
  Adam gen_opt_;
  Adam disc_opt_;
  std::optional<double> baseline_;
};

/// Fresh stage II model: vocabulary from the sentence corpus, seeded random
/// generator and discriminator, prompt extractor copied in when given.
CaptionModel initial_caption_model(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                                   const PromptCheckpoint* prompt, const Stage2Options& options);

/// For every concept set, the indices of the sentences that mention the most
/// of its concepts (all sentences when none match). Empty when there are no
/// sentences.
std::vector<std::vector<std::size_t>> concept_matches(std::span<const ConceptSet> concepts,
                                                     std::span<const TokenSequence> sentences);

GeneratorCheckpoint train_stage2(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                                 const PromptCheckpoint* prompt, const Stage2Options& options);

}  // namespace upcap
