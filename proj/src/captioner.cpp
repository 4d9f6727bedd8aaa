#include "upcap/captioner.hpp"

#include "upcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace upcap {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

int sample_index(const Vec& probs, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double target = u(rng);
  double acc = 0.0;
  int last = -1;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = static_cast<int>(i);
    if (target < acc) return last;
  }
  return last;
}

template <class Params>
Json params_to_json(const Params& p) {
  Json out = Json::object();
  p.for_each([&](const char* name, const auto& m) { out[name] = matrix_to_json(m); });
  return out;
}

template <class Params>
void params_from_json(Params& p, const Json& j, const char* what) {
  p.for_each([&](const char* name, auto& m) {
    Mat loaded = matrix_from_json(j.at(name));
    if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
      throw InvalidInput(std::string(what) + " parameter '" + name + "' has the wrong shape");
    m = loaded;
  });
}

}  // namespace

Vec pool_prompt(const SemanticPrompt& prompt) {
  if (prompt.prompt_length <= 0 || prompt.rows.rows() != prompt.prompt_length + 3)
    throw InvalidInput("malformed semantic prompt");
  return prompt.context_rows().colwise().mean().transpose();
}

Vec decoder_condition(const ImageFeature& image, const Vec& pooled_prompt) {
  Vec out(image.vector.size() + pooled_prompt.size());
  out << image.vector, pooled_prompt;
  return out;
}

// ---------------------------------------------------------------- generator

GeneratorParams GeneratorParams::zeros(const GeneratorShape& s) {
  GeneratorParams p;
  p.in_w = Mat::Zero(s.embed_dim, s.condition_dim());
  p.in_b = Vec::Zero(s.embed_dim);
  p.embed = Mat::Zero(s.vocab_size, s.embed_dim);
  p.lstm = LstmParams::zeros(s.embed_dim, s.hidden_dim);
  p.out_w = Mat::Zero(s.vocab_size, s.hidden_dim);
  p.out_b = Vec::Zero(s.vocab_size);
  return p;
}

Generator Generator::zeros(const GeneratorShape& shape) {
  if (shape.vocab_size <= kNumSpecials || shape.feature_dim <= 0 || shape.prompt_dim < 0 ||
      shape.embed_dim <= 0 || shape.hidden_dim <= 0)
    throw InvalidInput("invalid generator shape");
  Generator g;
  g.shape_ = shape;
  g.params_ = GeneratorParams::zeros(shape);
  return g;
}

Generator::Generator(const GeneratorShape& shape, Rng& rng) : Generator(zeros(shape)) {
  params_.in_w = gaussian(shape.embed_dim, shape.condition_dim(),
                          1.0 / std::sqrt(static_cast<double>(shape.condition_dim())), rng);
  params_.embed = gaussian(shape.vocab_size, shape.embed_dim, 0.1, rng);
  params_.lstm = LstmParams::random(shape.embed_dim, shape.hidden_dim, rng);
  params_.out_w = gaussian(shape.vocab_size, shape.hidden_dim,
                           0.1 / std::sqrt(static_cast<double>(shape.hidden_dim)), rng);
}

void Generator::check_condition(const Vec& condition) const {
  if (condition.size() != shape_.condition_dim())
    throw InvalidInput("decoder condition has length " + std::to_string(condition.size()) +
                       ", expected " + std::to_string(shape_.condition_dim()));
}

Vec Generator::initial_input(const Vec& condition) const {
  check_condition(condition);
  return params_.in_w * condition + params_.in_b;
}

Vec Generator::distribution(const Vec& hidden) const {
  Vec logits = params_.out_w * hidden + params_.out_b;
  logits[kPad] = kNegInf;
  logits[kSos] = kNegInf;
  return softmax(logits);
}

Generation Generator::generate(const Vec& condition, DecodeMode mode, int max_len, Rng* rng,
                               bool record_distributions) const {
  if (max_len < 1) throw InvalidInput("max_len must be >= 1");
  if (mode == DecodeMode::kSample && rng == nullptr)
    throw InvalidInput("sampling requires a random generator");
  Generation out;
  const int H = shape_.hidden_dim;
  Vec x = initial_input(condition);
  Vec h = Vec::Zero(H), c = Vec::Zero(H);
  while (true) {
    LstmCache s = lstm_step(params_.lstm, x, h, c);
    h = s.h;
    c = s.c;
    Vec logits = params_.out_w * h + params_.out_b;
    logits[kPad] = kNegInf;
    logits[kSos] = kNegInf;
    const Vec probs = softmax(logits);
    const int a = mode == DecodeMode::kGreedy ? argmax_lowest(logits) : sample_index(probs, *rng);
    out.actions.push_back(a);
    out.log_probs.push_back(std::log(probs[a]));
    if (record_distributions) out.distributions.push_back(probs);
    if (a == kEos) {
      out.ended_with_eos = true;
      break;
    }
    out.tokens.indices.push_back(a);
    if (static_cast<int>(out.tokens.size()) == max_len) break;
    x = params_.embed.row(a).transpose();
  }
  return out;
}

double Generator::weighted_nll(const Vec& condition, std::span<const int> actions,
                               std::span<const double> weights, GeneratorParams* grad) const {
  if (actions.empty()) throw InvalidInput("no actions to score");
  if (actions.size() != weights.size()) throw InvalidInput("actions and weights differ in length");
  for (std::size_t t = 0; t < actions.size(); ++t) {
    const int a = actions[t];
    if (a < 0 || a >= shape_.vocab_size || a == kPad || a == kSos)
      throw InvalidInput("action " + std::to_string(a) + " cannot be emitted");
    if (a == kEos && t + 1 != actions.size()) throw InvalidInput("EOS must be the last action");
  }

  const int H = shape_.hidden_dim;
  const std::size_t T = actions.size();
  std::vector<LstmCache> caches;
  std::vector<Vec> probs;
  caches.reserve(T);
  probs.reserve(T);

  Vec x = initial_input(condition);
  Vec h = Vec::Zero(H), c = Vec::Zero(H);
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    caches.push_back(lstm_step(params_.lstm, x, h, c));
    h = caches.back().h;
    c = caches.back().c;
    probs.push_back(distribution(h));
    loss -= weights[t] * std::log(probs.back()[actions[t]]);
    if (t + 1 < T) x = params_.embed.row(actions[t]).transpose();
  }
  if (!grad) return loss;

  Vec dh_next = Vec::Zero(H), dc_next = Vec::Zero(H);
  Vec dx(shape_.embed_dim), dh_prev(H), dc_prev(H);
  for (std::size_t k = T; k-- > 0;) {
    Vec dlogits = weights[k] * probs[k];
    dlogits[actions[k]] -= weights[k];
    grad->out_w.noalias() += dlogits * caches[k].h.transpose();
    grad->out_b += dlogits;
    Vec dh = params_.out_w.transpose() * dlogits + dh_next;
    lstm_step_backward(params_.lstm, caches[k], dh, dc_next, grad->lstm, &dx, dh_prev, dc_prev);
    if (k > 0) {
      grad->embed.row(actions[k - 1]) += dx.transpose();
    } else {
      grad->in_w.noalias() += dx * condition.transpose();
      grad->in_b += dx;
    }
    dh_next = dh_prev;
    dc_next = dc_prev;
  }
  return loss;
}

std::vector<int> teacher_actions(const TokenSequence& caption, int max_len) {
  std::vector<int> actions = caption.indices;
  if (static_cast<int>(actions.size()) < max_len) actions.push_back(kEos);
  return actions;
}

// ------------------------------------------------------------ discriminator

DiscriminatorParams DiscriminatorParams::zeros(const DiscriminatorShape& s) {
  DiscriminatorParams p;
  p.embed = Mat::Zero(s.vocab_size, s.embed_dim);
  p.lstm = LstmParams::zeros(s.embed_dim, s.hidden_dim);
  p.head_w = Vec::Zero(s.hidden_dim);
  p.head_b = Vec::Zero(1);
  return p;
}

Discriminator Discriminator::zeros(const DiscriminatorShape& shape) {
  if (shape.vocab_size <= 0 || shape.embed_dim <= 0 || shape.hidden_dim <= 0)
    throw InvalidInput("invalid discriminator shape");
  Discriminator d;
  d.shape_ = shape;
  d.params_ = DiscriminatorParams::zeros(shape);
  return d;
}

Discriminator::Discriminator(const DiscriminatorShape& shape, Rng& rng) : Discriminator(zeros(shape)) {
  params_.embed = gaussian(shape.vocab_size, shape.embed_dim, 0.1, rng);
  params_.lstm = LstmParams::random(shape.embed_dim, shape.hidden_dim, rng);
  params_.head_w = gaussian(shape.hidden_dim, 1, 1.0 / std::sqrt(static_cast<double>(shape.hidden_dim)), rng);
}

std::vector<double> Discriminator::discriminate(std::span<const int> tokens) const {
  if (tokens.empty()) throw DegenerateInput("cannot discriminate an empty sequence");
  const int H = shape_.hidden_dim;
  Vec h = Vec::Zero(H), c = Vec::Zero(H);
  std::vector<double> q;
  q.reserve(tokens.size());
  for (int tok : tokens) {
    if (tok < 0 || tok >= shape_.vocab_size) throw InvalidInput("token index out of range");
    LstmCache s = lstm_step(params_.lstm, params_.embed.row(tok).transpose(), h, c);
    h = s.h;
    c = s.c;
    q.push_back(sigmoid(params_.head_w.dot(h) + params_.head_b[0]));
  }
  return q;
}

double Discriminator::bce(std::span<const int> tokens, double target, DiscriminatorParams* grad,
                          double grad_weight) const {
  if (tokens.empty()) throw DegenerateInput("cannot discriminate an empty sequence");
  const int H = shape_.hidden_dim;
  const std::size_t T = tokens.size();
  std::vector<LstmCache> caches;
  std::vector<double> q;
  Vec h = Vec::Zero(H), c = Vec::Zero(H);
  double loss = 0.0;
  for (int tok : tokens) {
    if (tok < 0 || tok >= shape_.vocab_size) throw InvalidInput("token index out of range");
    caches.push_back(lstm_step(params_.lstm, params_.embed.row(tok).transpose(), h, c));
    h = caches.back().h;
    c = caches.back().c;
    const double z = params_.head_w.dot(h) + params_.head_b[0];
    q.push_back(sigmoid(z));
    // -[y log q + (1 - y) log(1 - q)] with log q = -softplus(-z).
    loss += target * softplus(-z) + (1.0 - target) * softplus(z);
  }
  loss /= static_cast<double>(T);
  if (!grad) return loss;

  const double scale = grad_weight / static_cast<double>(T);
  Vec dh_next = Vec::Zero(H), dc_next = Vec::Zero(H);
  Vec dx(shape_.embed_dim), dh_prev(H), dc_prev(H);
  for (std::size_t k = T; k-- > 0;) {
    const double dz = scale * (q[k] - target);
    grad->head_w += dz * caches[k].h;
    grad->head_b[0] += dz;
    Vec dh = dz * params_.head_w + dh_next;
    lstm_step_backward(params_.lstm, caches[k], dh, dc_next, grad->lstm, &dx, dh_prev, dc_prev);
    grad->embed.row(tokens[k]) += dx.transpose();
    dh_next = dh_prev;
    dc_next = dc_prev;
  }
  return loss;
}

// ----------------------------------------------------------------- concepts

ConceptSet make_concept_set(const std::string& image_id, std::span<const std::string> words,
                            const Vocabulary& vocab) {
  ConceptSet out{image_id, {}};
  for (const auto& w : words)
    if (vocab.contains(w)) out.indices.insert(vocab.index(w));
  return out;
}

double concept_reward(const TokenSequence& seq, const ConceptSet& concepts) {
  if (concepts.indices.empty()) return 0.0;
  std::set<int> hit;
  for (int tok : seq.indices)
    if (concepts.indices.count(tok)) hit.insert(tok);
  return static_cast<double>(hit.size()) / static_cast<double>(concepts.indices.size());
}

// -------------------------------------------------------------------- model

Vec CaptionModel::condition(const ImageFeature& image, const DualEncoder& backbone) const {
  if (!prompt) return image.vector;
  return decoder_condition(image, pool_prompt(semantic_prompt(*prompt, image, backbone)));
}

TokenSequence CaptionModel::caption(const ImageFeature& image, const DualEncoder& backbone) const {
  return generator.generate(condition(image, backbone), DecodeMode::kGreedy, max_len).tokens;
}

Json GeneratorCheckpoint::to_json() const {
  const auto& g = model.generator.shape();
  const auto& d = model.discriminator.shape();
  Json prompt_json = nullptr;
  if (model.prompt) {
    prompt_json = Json{{"prompt_length", model.prompt->prompt_length},
                       {"token_dim", model.prompt->token_dim},
                       {"weight", matrix_to_json(model.prompt->weight)},
                       {"bias", vector_to_json(model.prompt->bias)}};
  }
  return Json{
      {"format", "upcap.generator_checkpoint"},
      {"version", 1},
      {"spec_hash", spec_hash},
      {"stage", stage},
      {"steps", steps},
      {"max_len", model.max_len},
      {"vocab", {{"min_count", model.vocab.min_count()}, {"words", model.vocab.words()}}},
      {"prompt", prompt_json},
      {"generator",
       {{"shape",
         {{"vocab_size", g.vocab_size},
          {"feature_dim", g.feature_dim},
          {"prompt_dim", g.prompt_dim},
          {"embed_dim", g.embed_dim},
          {"hidden_dim", g.hidden_dim}}},
        {"params", params_to_json(model.generator.params())}}},
      {"discriminator",
       {{"shape", {{"vocab_size", d.vocab_size}, {"embed_dim", d.embed_dim}, {"hidden_dim", d.hidden_dim}}},
        {"params", params_to_json(model.discriminator.params())}}},
      {"lm_loss_trace", lm_loss_trace},
      {"gen_loss_trace", gen_loss_trace},
      {"disc_loss_trace", disc_loss_trace}};
}

GeneratorCheckpoint GeneratorCheckpoint::from_json(const Json& j) {
  if (j.value("format", "") != "upcap.generator_checkpoint")
    throw InvalidInput("not a generator checkpoint");
  GeneratorCheckpoint ck;
  ck.spec_hash = j.at("spec_hash").get<std::string>();
  ck.stage = j.at("stage").get<std::string>();
  ck.steps = j.at("steps").get<int>();
  ck.model.max_len = j.at("max_len").get<int>();
  ck.model.vocab = Vocabulary::from_words(j.at("vocab").at("words").get<std::vector<std::string>>(),
                                          j.at("vocab").at("min_count").get<int>());
  if (!j.at("prompt").is_null()) {
    const auto& p = j.at("prompt");
    PromptExtractor ex;
    ex.prompt_length = p.at("prompt_length").get<int>();
    ex.token_dim = p.at("token_dim").get<int>();
    ex.weight = matrix_from_json(p.at("weight"));
    ex.bias = vector_from_json(p.at("bias"));
    if (ex.weight.rows() != ex.output_dim() || ex.bias.size() != ex.output_dim())
      throw InvalidInput("embedded prompt extractor has inconsistent shape");
    ck.model.prompt = std::move(ex);
  }
  const auto& gs = j.at("generator").at("shape");
  GeneratorShape g{gs.at("vocab_size").get<int>(), gs.at("feature_dim").get<int>(),
                   gs.at("prompt_dim").get<int>(), gs.at("embed_dim").get<int>(),
                   gs.at("hidden_dim").get<int>()};
  ck.model.generator = Generator::zeros(g);
  params_from_json(ck.model.generator.params(), j.at("generator").at("params"), "generator");
  const auto& ds = j.at("discriminator").at("shape");
  DiscriminatorShape d{ds.at("vocab_size").get<int>(), ds.at("embed_dim").get<int>(),
                       ds.at("hidden_dim").get<int>()};
  ck.model.discriminator = Discriminator::zeros(d);
  params_from_json(ck.model.discriminator.params(), j.at("discriminator").at("params"), "discriminator");
  if (g.vocab_size != ck.model.vocab.size())
    throw InvalidInput("generator vocabulary size does not match the stored vocabulary");
  ck.lm_loss_trace = j.value("lm_loss_trace", std::vector<double>{});
  ck.gen_loss_trace = j.at("gen_loss_trace").get<std::vector<double>>();
  ck.disc_loss_trace = j.at("disc_loss_trace").get<std::vector<double>>();
  return ck;
}

void GeneratorCheckpoint::save(const std::filesystem::path& path) const { write_json(path, to_json()); }

GeneratorCheckpoint GeneratorCheckpoint::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

// --------------------------------------------------------------- stage II

AdversarialTrainer::AdversarialTrainer(CaptionModel model, const Stage2Options& options)
    : model_(std::move(model)),
      options_(options),
      gen_opt_(options.learning_rate),
      disc_opt_(options.learning_rate) {}

AdversarialLosses AdversarialTrainer::step(std::span<const Vec> conditions,
                                           std::span<const ConceptSet> concepts,
                                           std::span<const TokenSequence> real_sentences, Rng& rng) {
  if (conditions.empty()) throw InvalidInput("adversarial step needs at least one image");
  if (real_sentences.empty()) throw InvalidInput("adversarial step needs at least one real sentence");
  if (!concepts.empty() && concepts.size() != conditions.size())
    throw InvalidInput("concept sets must match the image batch");

  const int max_len = model_.max_len;
  auto& gen = model_.generator;
  auto& disc = model_.discriminator;

  std::vector<Generation> fakes;
  fakes.reserve(conditions.size());
  for (const auto& cond : conditions) fakes.push_back(gen.generate(cond, DecodeMode::kSample, max_len, &rng));

  // Discriminator: real -> 1, generated -> 0 at every prefix.
  AdversarialLosses out;
  DiscriminatorParams dgrad = DiscriminatorParams::zeros(disc.shape());
  const double n_disc = static_cast<double>(real_sentences.size() + fakes.size());
  for (const auto& s : real_sentences) {
    if (s.empty()) throw DegenerateInput("empty real sentence");
    out.disc_loss += disc.bce(teacher_actions(s, max_len), 1.0, &dgrad, 1.0 / n_disc);
  }
  for (const auto& f : fakes) out.disc_loss += disc.bce(f.actions, 0.0, &dgrad, 1.0 / n_disc);
  out.disc_loss /= n_disc;
  clip_global_norm(dgrad, options_.grad_clip);
  disc_opt_.step(disc.params(), dgrad);

  // Generator: REINFORCE with r_t = q_t + lambda * concept reward.
  std::vector<std::vector<double>> rewards(fakes.size());
  double reward_sum = 0.0;
  std::size_t n_actions = 0;
  for (std::size_t k = 0; k < fakes.size(); ++k) {
    const auto q = disc.discriminate(fakes[k].actions);
    const double cr = concepts.empty() ? 0.0 : concept_reward(fakes[k].tokens, concepts[k]);
    for (double qt : q) {
      rewards[k].push_back(qt + options_.lambda_concept * cr);
      reward_sum += rewards[k].back();
    }
    n_actions += q.size();
  }
  out.mean_reward = reward_sum / static_cast<double>(n_actions);
  const double baseline = baseline_.value_or(out.mean_reward);

  GeneratorParams ggrad = GeneratorParams::zeros(gen.shape());
  const double inv_batch = 1.0 / static_cast<double>(fakes.size());
  for (std::size_t k = 0; k < fakes.size(); ++k) {
    std::vector<double> weights;
    for (std::size_t t = 0; t < rewards[k].size(); ++t) {
      weights.push_back((rewards[k][t] - baseline) * inv_batch);
      out.gen_loss -= rewards[k][t] * fakes[k].log_probs[t];
    }
    gen.weighted_nll(conditions[k], fakes[k].actions, weights, &ggrad);
  }
  out.gen_loss /= static_cast<double>(n_actions);
  clip_global_norm(ggrad, options_.grad_clip);
  gen_opt_.step(gen.params(), ggrad);

  baseline_ = options_.baseline_decay * baseline + (1.0 - options_.baseline_decay) * out.mean_reward;

  if (!std::isfinite(out.gen_loss) || !std::isfinite(out.disc_loss) || !params_finite(gen.params()) ||
      !params_finite(disc.params()))
    throw TrainingDiverged("adversarial step produced non-finite values (gen_loss=" +
                           std::to_string(out.gen_loss) + ", disc_loss=" + std::to_string(out.disc_loss) + ")");
  return out;
}

CaptionModel initial_caption_model(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                                   const PromptCheckpoint* prompt, const Stage2Options& options) {
  if (options.use_prompt && prompt == nullptr)
    throw MissingStage("stage prompt required: a prompt-conditioned model needs a prompt checkpoint");
  if (prompt && options.use_prompt && prompt->spec_hash != backbone.spec().hash())
    throw InvalidInput("prompt checkpoint was trained against a different backbone spec");

  CaptionModel model;
  model.vocab = Vocabulary::build(corpus.sentences, options.min_count);
  model.max_len = options.max_len;
  if (options.use_prompt) model.prompt = prompt->extractor;

  Rng rng(options.seed);
  GeneratorShape gs{model.vocab.size(), backbone.spec().feature_dim,
                    options.use_prompt ? backbone.spec().token_dim : 0, options.embed_dim,
                    options.hidden_dim};
  model.generator = Generator(gs, rng);
  model.discriminator = Discriminator({model.vocab.size(), options.embed_dim, options.hidden_dim}, rng);
  return model;
}

std::vector<std::vector<std::size_t>> concept_matches(std::span<const ConceptSet> concepts,
                                                     std::span<const TokenSequence> sentences) {
  std::vector<std::vector<std::size_t>> out;
  if (sentences.empty()) return out;
  for (const auto& c : concepts) {
    std::size_t best = 0;
    std::vector<std::size_t> pool;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      const std::set<int> words(sentences[s].indices.begin(), sentences[s].indices.end());
      std::size_t hits = 0;
      for (int idx : c.indices) hits += words.count(idx);
      if (hits > best) {
        best = hits;
        pool.clear();
      }
      if (hits == best) pool.push_back(s);
    }
    out.push_back(std::move(pool));
  }
  return out;
}

GeneratorCheckpoint train_stage2(const UnpairedCorpus& corpus, const DualEncoder& backbone,
                                 const PromptCheckpoint* prompt, const Stage2Options& options) {
  if (corpus.images.empty()) throw InvalidInput("stage II needs images");
  if (options.learning_rate < 0.0) throw ConfigError("lr_stage2 must be >= 0");
  if (options.steps < 0) throw ConfigError("steps_stage2 must be >= 0");
  if (options.batch_size < 1) throw ConfigError("batch_size_stage2 must be >= 1");

  GeneratorCheckpoint ck;
  ck.spec_hash = backbone.spec().hash();
  ck.stage = "uic";
  CaptionModel model = initial_caption_model(corpus, backbone, prompt, options);

  std::vector<Vec> conditions;
  std::vector<ConceptSet> concepts;
  for (const auto& rec : corpus.images) {
    const ImageFeature f = backbone.encode_image(rec);
    conditions.push_back(model.condition(f, backbone));
    if (corpus.concepts) {
      auto it = corpus.concepts->find(rec.id);
      std::vector<std::string> words;
      if (it != corpus.concepts->end()) words = it->second;
      concepts.push_back(make_concept_set(rec.id, words, model.vocab));
    }
  }
  std::vector<TokenSequence> sentences;
  for (const auto& s : corpus.sentences) sentences.push_back(tokenize(s, model.vocab, model.max_len));

  Rng rng(options.seed ^ 0x5851f42d4c957f2dULL);

  // Warm start: teacher-forced corpus sentences. With concepts, each image is
  // paired with the sentences that mention the most of its concepts; without
  // them, with sentences drawn at random, which only teaches fluency.
  if (options.pretrain_steps > 0 && !sentences.empty()) {
    const auto candidates = concept_matches(concepts, sentences);
    Adam lm_opt(options.pretrain_learning_rate);
    std::uniform_int_distribution<std::size_t> pick_image(0, conditions.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_sentence(0, sentences.size() - 1);
    for (int step = 0; step < options.pretrain_steps; ++step) {
      GeneratorParams grad = GeneratorParams::zeros(model.generator.shape());
      std::vector<std::vector<int>> actions;
      std::vector<std::size_t> images;
      std::size_t tokens = 0;
      for (int k = 0; k < options.batch_size; ++k) {
        images.push_back(pick_image(rng));
        std::size_t sentence;
        if (candidates.empty()) {
          sentence = pick_sentence(rng);
        } else {
          const auto& pool = candidates[images.back()];
          std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
          sentence = pool[pick(rng)];
        }
        actions.push_back(teacher_actions(sentences[sentence], model.max_len));
        tokens += actions.back().size();
      }
      double nll = 0.0;
      for (std::size_t k = 0; k < actions.size(); ++k) {
        const std::vector<double> w(actions[k].size(), 1.0 / static_cast<double>(tokens));
        nll += model.generator.weighted_nll(conditions[images[k]], actions[k], w, &grad);
      }
      clip_global_norm(grad, options.grad_clip);
      lm_opt.step(model.generator.params(), grad);
      if (!std::isfinite(nll) || !params_finite(model.generator.params()))
        throw TrainingDiverged("stage II warm start diverged at step " + std::to_string(step));
      ck.lm_loss_trace.push_back(nll);
    }
  }

  AdversarialTrainer trainer(std::move(model), options);
  std::vector<std::size_t> image_order(conditions.size()), sentence_order(sentences.size());
  std::iota(image_order.begin(), image_order.end(), 0);
  std::iota(sentence_order.begin(), sentence_order.end(), 0);
  std::size_t image_cursor = image_order.size(), sentence_cursor = sentence_order.size();
  const std::size_t batch_images = std::min<std::size_t>(options.batch_size, image_order.size());
  const std::size_t batch_sentences = std::min<std::size_t>(options.batch_size, sentence_order.size());

  std::vector<Vec> cond_batch;
  std::vector<ConceptSet> concept_batch;
  std::vector<TokenSequence> real_batch;
  for (int step = 0; step < options.steps; ++step) {
    if (image_cursor + batch_images > image_order.size()) {
      std::shuffle(image_order.begin(), image_order.end(), rng);
      image_cursor = 0;
    }
    if (sentence_cursor + batch_sentences > sentence_order.size()) {
      std::shuffle(sentence_order.begin(), sentence_order.end(), rng);
      sentence_cursor = 0;
    }
    cond_batch.clear();
    concept_batch.clear();
    real_batch.clear();
    for (std::size_t k = 0; k < batch_images; ++k) {
      const auto idx = image_order[image_cursor + k];
      cond_batch.push_back(conditions[idx]);
      if (!concepts.empty()) concept_batch.push_back(concepts[idx]);
    }
    for (std::size_t k = 0; k < batch_sentences; ++k)
      real_batch.push_back(sentences[sentence_order[sentence_cursor + k]]);
    image_cursor += batch_images;
    sentence_cursor += batch_sentences;

    AdversarialLosses l;
    try {
      l = trainer.step(cond_batch, concept_batch, real_batch, rng);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged("stage II diverged at step " + std::to_string(step) + ": " + e.what());
    }
    ck.gen_loss_trace.push_back(l.gen_loss);
    ck.disc_loss_trace.push_back(l.disc_loss);
  }
  ck.steps = options.steps;
  ck.model = std::move(trainer.model());
  return ck;
}

}  // namespace upcap
