#include "doctest.h"

#include "upcap/captioner.hpp"
#include "upcap/error.hpp"
#include "upcap/refine.hpp"
#include "upcap/toy_world.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

using namespace upcap;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Scalar LSTM written from the gate equations, independent of lstm.cpp.
struct RefLstm {
  const LstmParams& p;
  std::vector<double> h, c;

  explicit RefLstm(const LstmParams& params)
      : p(params), h(params.hidden_dim(), 0.0), c(params.hidden_dim(), 0.0) {}

  void step(const Vec& x) {
    const int H = p.hidden_dim();
    std::vector<double> z(4 * H);
    for (int r = 0; r < 4 * H; ++r) {
      double acc = p.b[r];
      for (int k = 0; k < x.size(); ++k) acc += p.w_x(r, k) * x[k];
      for (int k = 0; k < H; ++k) acc += p.w_h(r, k) * h[k];
      z[r] = acc;
    }
    for (int k = 0; k < H; ++k) {
      const double i = sig(z[k]), f = sig(z[H + k]), g = std::tanh(z[2 * H + k]), o = sig(z[3 * H + k]);
      c[k] = f * c[k] + i * g;
      h[k] = o * std::tanh(c[k]);
    }
  }
};

GeneratorShape tiny_shape() { return {9, 4, 2, 3, 5}; }

Generator random_generator(std::uint64_t seed) {
  Rng rng(seed);
  Generator g(tiny_shape(), rng);
  g.params().out_w *= 30.0;  // make the argmax chain depend on the state
  g.params().out_b = gaussian(9, 1, 0.5, rng);
  g.params().in_b = gaussian(3, 1, 0.5, rng);
  return g;
}

ToyWorld small_world(int train = 48) {
  ToyWorldOptions o;
  o.backbone.feature_dim = 24;
  o.backbone.token_dim = 12;
  o.backbone.seed = 1;
  o.train_images = train;
  o.test_images = 48;
  o.sentences = 120;
  return make_toy_world(o);
}

Stage2Options small_stage2() {
  Stage2Options s;
  s.embed_dim = 16;
  s.hidden_dim = 32;
  s.max_len = 12;
  s.batch_size = 8;
  s.use_prompt = false;
  s.seed = 3;
  return s;
}

}  // namespace

TEST_CASE("pool_prompt averages the context rows only") {
  SemanticPrompt p;
  p.prompt_length = 3;
  p.rows = Mat::Constant(6, 4, 99.0);
  Vec v(4);
  v << 1, -2, 3, 0.5;
  for (int r = 1; r <= 3; ++r) p.rows.row(r) = v.transpose();
  CHECK(pool_prompt(p).isApprox(v, 1e-15));

  SemanticPrompt sym;
  sym.prompt_length = 2;
  sym.rows = Mat::Constant(5, 4, 7.0);
  sym.rows.row(1) = v.transpose();
  sym.rows.row(2) = -v.transpose();
  CHECK(pool_prompt(sym).isZero(0.0));

  SemanticPrompt big;
  big.prompt_length = 8;
  Rng rng(2);
  big.rows = gaussian(11, 512, 1.0, rng);
  Vec pooled = pool_prompt(big);
  for (int c = 0; c < 512; ++c) {
    double s = 0.0;
    for (int r = 1; r <= 8; ++r) s += big.rows(r, c);
    CHECK(pooled[c] == doctest::Approx(s / 8.0).epsilon(1e-13));
  }

  SemanticPrompt bad;
  bad.prompt_length = 4;
  bad.rows = Mat::Zero(5, 2);
  CHECK_THROWS_AS(pool_prompt(bad), InvalidInput);
}

TEST_CASE("decoder input: concatenation and the input projection") {
  ImageFeature f{"x", Vec::Ones(512)};
  CHECK(decoder_condition(f, Vec::Zero(512)).size() == 1024);
  CHECK(decoder_condition(f, Vec()).size() == 512);

  auto g = Generator::zeros(tiny_shape());
  g.params().in_b << 0.1, -0.2, 0.3;
  CHECK(g.initial_input(Vec::Random(6)) == g.params().in_b);

  Generator r = random_generator(4);
  Vec cond = Vec::LinSpaced(6, -1.0, 1.5);
  Vec x0 = r.initial_input(cond);
  for (int i = 0; i < 3; ++i) {
    double acc = r.params().in_b[i];
    for (int k = 0; k < 6; ++k) acc += r.params().in_w(i, k) * cond[k];
    CHECK(x0[i] == doctest::Approx(acc).epsilon(1e-13));
  }
  CHECK_THROWS_AS(r.initial_input(Vec::Zero(5)), InvalidInput);
}

TEST_CASE("a head that always picks EOS yields a flagged empty caption") {
  auto g = Generator::zeros(tiny_shape());
  g.params().out_b[kEos] = 50.0;
  auto gen = g.generate(Vec::Zero(6), DecodeMode::kGreedy, 10);
  CHECK(gen.empty());
  CHECK(gen.ended_with_eos);
  CHECK(gen.actions == std::vector<int>{kEos});
}

TEST_CASE("greedy decoding is deterministic and matches a hand-unrolled recurrence") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Generator g = random_generator(seed);
    g.params().out_b[kEos] = -100.0;  // keep both steps
    Rng crng(seed + 50);
    Vec cond = gaussian(6, 1, 1.0, crng);
    auto a = g.generate(cond, DecodeMode::kGreedy, 2);
    auto b = g.generate(cond, DecodeMode::kGreedy, 2);
    CHECK(a.actions == b.actions);

    RefLstm ref(g.params().lstm);
    Vec x = g.params().in_w * cond + g.params().in_b;
    std::vector<int> chain;
    for (int t = 0; t < 2; ++t) {
      ref.step(x);
      int best = -1;
      double best_logit = -1e300;
      for (int v = 0; v < 9; ++v) {
        if (v == kPad || v == kSos) continue;
        double z = g.params().out_b[v];
        for (int k = 0; k < 5; ++k) z += g.params().out_w(v, k) * ref.h[k];
        if (z > best_logit) {
          best_logit = z;
          best = v;
        }
      }
      chain.push_back(best);
      x = g.params().embed.row(best).transpose();
    }
    CHECK(a.tokens.indices == chain);
    CHECK_FALSE(a.ended_with_eos);
  }
}

TEST_CASE("greedy ties go to the lowest index") {
  auto g = Generator::zeros(tiny_shape());
  g.params().out_b[kEos] = -5.0;
  auto gen = g.generate(Vec::Zero(6), DecodeMode::kGreedy, 3);
  CHECK(gen.tokens.indices == std::vector<int>{kUnk, kUnk, kUnk});
}

TEST_CASE("emitted distributions are normalized and greedy output ignores logit scale") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Generator g = random_generator(seed);
    Rng rng(seed);
    Vec cond = gaussian(6, 1, 1.0, rng);
    auto s = g.generate(cond, DecodeMode::kSample, 8, &rng, true);
    for (const auto& o : s.distributions) {
      CHECK(std::abs(o.sum() - 1.0) < 1e-6);
      CHECK(o.minCoeff() >= 0.0);
      CHECK(o[kPad] == 0.0);
      CHECK(o[kSos] == 0.0);
    }
    Generator scaled = g;
    scaled.params().out_w *= 3.7;
    scaled.params().out_b *= 3.7;
    CHECK(scaled.generate(cond, DecodeMode::kGreedy, 8).actions ==
          g.generate(cond, DecodeMode::kGreedy, 8).actions);
  }
}

TEST_CASE("discriminator shape, range and a hand-computed step") {
  Rng rng(1);
  Discriminator d({9, 4, 6}, rng);
  std::vector<int> seq{4, 5, 6, 2, 8};
  auto q = d.discriminate(seq);
  CHECK(q.size() == seq.size());
  for (double v : q) {
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK_THROWS_AS(d.discriminate(std::vector<int>{}), DegenerateInput);

  auto h1 = Discriminator::zeros({5, 1, 1});
  auto& p = h1.params();
  p.embed(4, 0) = 0.8;
  p.lstm.w_x << 0.5, -0.3, 1.2, 0.7;  // i, f, g, o
  p.lstm.b << 0.1, 0.2, -0.4, 0.3;
  p.head_w << 2.0;
  p.head_b << -0.5;
  const double x = 0.8;
  const double i = sig(0.5 * x + 0.1), g = std::tanh(1.2 * x - 0.4), o = sig(0.7 * x + 0.3);
  const double c = i * g;
  const double h = o * std::tanh(c);
  auto q1 = h1.discriminate(std::vector<int>{4});
  REQUIRE(q1.size() == 1);
  CHECK(q1[0] == doctest::Approx(sig(2.0 * h - 0.5)).epsilon(1e-14));
}

TEST_CASE("discriminator BCE on identical real and fake inputs never drops below ln 2") {
  Rng rng(7);
  Discriminator d({9, 4, 6}, rng);
  std::vector<int> seq{4, 6, 5, 2};
  Adam opt(0.05);
  for (int step = 0; step < 200; ++step) {
    const double both = 0.5 * (d.bce(seq, 1.0, nullptr) + d.bce(seq, 0.0, nullptr));
    CHECK(both >= std::log(2.0) - 1e-12);
    DiscriminatorParams grad = DiscriminatorParams::zeros(d.shape());
    d.bce(seq, 1.0, &grad, 0.5);
    d.bce(seq, 0.0, &grad, 0.5);
    opt.step(d.params(), grad);
  }
  const double final_loss = 0.5 * (d.bce(seq, 1.0, nullptr) + d.bce(seq, 0.0, nullptr));
  CHECK(final_loss == doctest::Approx(std::log(2.0)).epsilon(1e-3));
}

TEST_CASE("concept reward") {
  ConceptSet four{"x", {4, 5, 6, 7}};
  CHECK(concept_reward(TokenSequence{{7, 6, 5, 4}}, four) == 1.0);
  CHECK(concept_reward(TokenSequence{{4, 4, 9, 5}}, four) == 0.5);
  CHECK(concept_reward(TokenSequence{{4, 5}}, ConceptSet{"y", {}}) == 0.0);
  CHECK(concept_reward(TokenSequence{{8, 9}}, four) == 0.0);

  auto vocab = Vocabulary::build(std::vector<std::string>{"a dog in a park"}, 1);
  std::vector<std::string> words{"dog", "park", "zebra"};
  auto cs = make_concept_set("i", words, vocab);
  CHECK(cs.indices == std::set<int>{vocab.index("dog"), vocab.index("park")});

  // Bounded and monotone in the set of distinct concepts mentioned.
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(0, 12);
  for (int trial = 0; trial < 300; ++trial) {
    ConceptSet c{"r", {}};
    for (int k = tok(rng) % 6; k > 0; --k) c.indices.insert(tok(rng));
    TokenSequence s;
    for (int k = 0; k < 6; ++k) s.indices.push_back(tok(rng));
    const double r = concept_reward(s, c);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    TokenSequence more = s;
    more.indices.push_back(tok(rng));
    CHECK(concept_reward(more, c) >= r);
  }
}

TEST_CASE("REINFORCE estimate matches the exact gradient on a 1-step, 3-word policy") {
  // Vocabulary of 5 leaves EOS, UNK and one word as the only emittable actions.
  GeneratorShape shape{5, 3, 0, 2, 3};
  Rng init(11);
  Generator g(shape, init);
  g.params().out_w *= 10.0;
  g.params().out_b << 0.0, 0.0, 0.3, -0.2, 0.1;
  Vec cond(3);
  cond << 0.5, -1.0, 0.25;
  const double reward[5] = {0.0, 0.0, 0.2, 0.5, 1.0};

  auto probs = g.generate(cond, DecodeMode::kSample, 1, &init, true).distributions.front();
  double mean_r = 0.0;
  for (int a = 2; a < 5; ++a) mean_r += probs[a] * reward[a];
  // dE[r]/db_a = p_a (r_a - E[r]) for the output bias.
  Vec exact = Vec::Zero(5);
  for (int a = 2; a < 5; ++a) exact[a] = probs[a] * (reward[a] - mean_r);

  Rng rng(12);
  GeneratorParams acc = GeneratorParams::zeros(shape);
  const int n = 100000;
  for (int s = 0; s < n; ++s) {
    auto gen = g.generate(cond, DecodeMode::kSample, 1, &rng);
    REQUIRE(gen.actions.size() == 1);
    const std::vector<double> w{reward[gen.actions[0]] / n};
    g.weighted_nll(cond, gen.actions, w, &acc);
  }
  // weighted_nll accumulates the gradient of -sum w log pi.
  Vec estimate = -acc.out_b;
  CHECK((estimate - exact).norm() / exact.norm() < 0.05);
}

TEST_CASE("one adversarial step with lambda 0 gives finite positive losses") {
  Rng rng(5);
  CaptionModel m;
  m.vocab = Vocabulary::build(std::vector<std::string>{"a b c d e"}, 1);
  m.max_len = 6;
  m.generator = Generator({m.vocab.size(), 4, 0, 5, 7}, rng);
  m.discriminator = Discriminator({m.vocab.size(), 5, 7}, rng);
  Stage2Options opt;
  opt.lambda_concept = 0.0;
  AdversarialTrainer tr(m, opt);
  std::vector<Vec> conds{Vec::Ones(4), -Vec::Ones(4)};
  std::vector<TokenSequence> real{{{4, 5, 6}}, {{7, 8}}};
  auto l = tr.step(conds, {}, real, rng);
  CHECK(std::isfinite(l.gen_loss));
  CHECK(std::isfinite(l.disc_loss));
  CHECK(l.gen_loss > 0.0);
  CHECK(l.disc_loss > 0.0);
  CHECK(tr.baseline().has_value());
}

TEST_CASE("generator and discriminator parameters never touch each other") {
  Rng rng(9);
  CaptionModel m;
  m.vocab = Vocabulary::build(std::vector<std::string>{"a b c d e"}, 1);
  m.generator = Generator({m.vocab.size(), 4, 0, 5, 7}, rng);
  m.discriminator = Discriminator({m.vocab.size(), 5, 7}, rng);
  const auto disc_before = m.discriminator.params();
  const auto gen_before = m.generator.params();

  Adam gopt(0.01);
  std::vector<Vec> conds{Vec::Ones(4)};
  std::vector<TokenSequence> caps{{{4, 5}}};
  supervised_step(m, gopt, conds, caps, 5.0);
  CHECK(params_bitwise_equal(m.discriminator.params(), disc_before));
  CHECK_FALSE(params_bitwise_equal(m.generator.params(), gen_before));

  const auto gen_mid = m.generator.params();
  Adam dopt(0.01);
  DiscriminatorParams dg = DiscriminatorParams::zeros(m.discriminator.shape());
  m.discriminator.bce(std::vector<int>{4, 5, 2}, 1.0, &dg);
  dopt.step(m.discriminator.params(), dg);
  CHECK(params_bitwise_equal(m.generator.params(), gen_mid));
  CHECK_FALSE(params_bitwise_equal(m.discriminator.params(), disc_before));
}

TEST_CASE("teacher-forced NLL gradient matches central differences") {
  Generator g = random_generator(21);
  g.params().out_w /= 30.0;
  Vec cond = Vec::LinSpaced(6, -0.5, 0.7);
  std::vector<int> actions{4, 7, 5, kEos};
  std::vector<double> w{1.0, 0.5, -0.3, 1.2};
  GeneratorParams grad = GeneratorParams::zeros(g.shape());
  g.weighted_nll(cond, actions, w, &grad);

  double num = 0.0, den = 0.0;
  auto views = parameter_views(g.params());
  auto gviews = parameter_views(grad);
  for (std::size_t k = 0; k < views.size(); ++k) {
    for (Eigen::Index i = 0; i < views[k].size(); ++i) {
      const double keep = views[k][i];
      views[k][i] = keep + 1e-6;
      const double up = g.weighted_nll(cond, actions, w, nullptr);
      views[k][i] = keep - 1e-6;
      const double down = g.weighted_nll(cond, actions, w, nullptr);
      views[k][i] = keep;
      const double fd = (up - down) / 2e-6;
      num += (fd - gviews[k][i]) * (fd - gviews[k][i]);
      den += fd * fd;
    }
  }
  CHECK(std::sqrt(num / den) < 1e-6);
}

TEST_CASE("stage II training on the toy world") {
  auto world = small_world();
  ToyDualEncoder enc(BackboneSpec{24, 12, 100.0, 1});
  auto opt = small_stage2();

  SUBCASE("zero steps returns the initialization") {
    opt.steps = 0;
    opt.pretrain_steps = 0;
    auto ck = train_stage2(world.corpus, enc, nullptr, opt);
    auto init = initial_caption_model(world.corpus, enc, nullptr, opt);
    CHECK(params_bitwise_equal(ck.model.generator.params(), init.generator.params()));
    CHECK(params_bitwise_equal(ck.model.discriminator.params(), init.discriminator.params()));
    CHECK(ck.gen_loss_trace.empty());
  }
  SUBCASE("same seed, same checkpoint") {
    opt.steps = 5;
    opt.pretrain_steps = 5;
    auto a = train_stage2(world.corpus, enc, nullptr, opt);
    auto b = train_stage2(world.corpus, enc, nullptr, opt);
    CHECK(a.to_json().dump() == b.to_json().dump());
    auto c = GeneratorCheckpoint::from_json(Json::parse(a.to_json().dump()));
    CHECK(c.to_json().dump() == a.to_json().dump());
  }
  SUBCASE("the learning rate defaults to 0.001") { CHECK(Stage2Options{}.learning_rate == 0.001); }
  SUBCASE("50 adversarial steps teach the discriminator to separate real from generated") {
    opt.steps = 50;
    opt.pretrain_steps = 0;
    auto ck = train_stage2(world.corpus, enc, nullptr, opt);
    const auto& m = ck.model;
    Rng rng(77);
    int correct = 0, total = 0;
    for (const auto& ref : world.test_references) {
      auto real = tokenize(ref.references.front(), m.vocab, m.max_len);
      correct += m.discriminator.discriminate(teacher_actions(real, m.max_len)).back() > 0.5;
      ++total;
    }
    for (const auto& rec : world.test_images) {
      auto gen = m.generator.generate(m.condition(enc.encode_image(rec), enc), DecodeMode::kSample,
                                      m.max_len, &rng);
      correct += m.discriminator.discriminate(gen.actions).back() < 0.5;
      ++total;
    }
    CHECK(static_cast<double>(correct) / total > 0.5);
  }
  SUBCASE("warm start plus adversarial steps raise the metric prompt of generated captions") {
    opt.steps = 100;
    opt.pretrain_steps = 600;
    opt.pretrain_learning_rate = 3e-3;
    opt.learning_rate = 1e-4;
    HeldOutSet held{world.test_images, {}};
    auto init = initial_caption_model(world.corpus, enc, nullptr, opt);
    auto ck = train_stage2(world.corpus, enc, nullptr, opt);
    const double before = score_heldout(init, enc, held).mean_metric;
    const double after = score_heldout(ck.model, enc, held).mean_metric;
    MESSAGE("metric prompt before " << before << ", after " << after);
    CHECK(after > before + 1.0);
  }
}

TEST_CASE("concept matching picks the sentences with the most overlap") {
  std::vector<ConceptSet> cs{{"a", {4, 5}}, {"b", {9}}};
  std::vector<TokenSequence> s{{{4, 6}}, {{4, 5, 7}}, {{5, 4}}, {{8}}};
  auto m = concept_matches(cs, s);
  REQUIRE(m.size() == 2);
  CHECK(m[0] == std::vector<std::size_t>{1, 2});
  CHECK(m[1] == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(concept_matches(cs, {}).empty());
}
