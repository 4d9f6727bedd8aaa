#include "doctest.h"

#include "upcap/error.hpp"
#include "upcap/prompt.hpp"
#include "upcap/toy_world.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace upcap;

namespace {

BackboneSpec spec(int fd, int td, std::uint64_t seed = 1) {
  BackboneSpec s;
  s.feature_dim = fd;
  s.token_dim = td;
  s.seed = seed;
  return s;
}

std::vector<ImageFeature> random_features(int n, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<ImageFeature> out;
  for (int i = 0; i < n; ++i) {
    Vec v(dim);
    for (int k = 0; k < dim; ++k) v[k] = g(rng);
    out.push_back({"r" + std::to_string(i), v});
  }
  return out;
}

std::vector<ImageFeature> toy_features(const ToyWorld& w, const DualEncoder& enc, bool test) {
  std::vector<ImageFeature> out;
  for (const auto& r : test ? w.test_images : w.corpus.images) out.push_back(enc.encode_image(r));
  return out;
}

// Softmax cross-entropy of one row of logits against the diagonal target,
// written out with explicit exponentials.
double row_xent(const std::vector<double>& logits, std::size_t target) {
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z);
  return -std::log(std::exp(logits[target]) / denom);
}

}  // namespace

TEST_CASE("extract: zero map, identity map and a random map") {
  SUBCASE("zeros give a zero vector of length 8 x 512") {
    auto ex = PromptExtractor::zeros(512, 8, 512);
    ImageFeature f{"x", Vec::Random(512)};
    Vec p = ex.extract(f);
    CHECK(p.size() == 4096);
    CHECK(p.isZero(0.0));
  }
  SUBCASE("identity weight returns the feature") {
    auto ex = PromptExtractor::zeros(12, 3, 4);
    ex.weight = Mat::Identity(12, 12);
    ImageFeature f{"x", Vec::LinSpaced(12, -1.0, 2.0)};
    CHECK(bitwise_equal(ex.extract(f), f.vector));
  }
  SUBCASE("random weight matches an explicit matrix-vector loop") {
    Rng rng(4);
    auto ex = PromptExtractor::random(7, 2, 3, rng);
    ex.bias = Vec::LinSpaced(6, 0.1, 0.6);
    ImageFeature f = random_features(1, 7, 9).front();
    Vec p = ex.extract(f);
    for (int r = 0; r < 6; ++r) {
      double acc = ex.bias[r];
      for (int c = 0; c < 7; ++c) acc += ex.weight(r, c) * f.vector[c];
      CHECK(p[r] == doctest::Approx(acc).epsilon(1e-13));
    }
  }
  SUBCASE("wrong width and non-finite output are rejected") {
    auto ex = PromptExtractor::zeros(5, 1, 2);
    CHECK_THROWS_AS(ex.extract({"x", Vec::Ones(4)}), InvalidInput);
    ex.weight(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ex.extract({"x", Vec::Ones(5)}), TrainingDiverged);
  }
}

TEST_CASE("assemble: 8 x 512 gives 11 rows, framing and reshape") {
  ToyDualEncoder enc(spec(512, 512));
  Vec p = Vec::LinSpaced(4096, -1.0, 1.0);
  auto sp = assemble_prompt(p, enc);
  CHECK(sp.rows.rows() == 11);
  CHECK(sp.rows.cols() == 512);
  CHECK(sp.prompt_length == 8);

  CHECK(sp.rows.row(0).transpose().isApprox(enc.special_embedding(kSos) + enc.positional_embedding(0), 1e-15));
  CHECK(sp.rows.row(9).transpose().isApprox(enc.class_embedding() + enc.positional_embedding(9), 1e-15));
  CHECK(sp.rows.row(10).transpose().isApprox(enc.special_embedding(kEos) + enc.positional_embedding(10), 1e-15));

  // Row k of the context holds p[k*512 .. k*512+511].
  for (int k = 0; k < 8; ++k) {
    Vec pos = enc.positional_embedding(k + 1);
    for (int c = 0; c < 512; ++c) CHECK(sp.rows(k + 1, c) - pos[c] == doctest::Approx(p[k * 512 + c]).epsilon(1e-15));
  }
  CHECK((prompt_context(sp, enc) - p).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("assemble with p = 0 leaves only framing and positions") {
  ToyDualEncoder enc(spec(8, 4));
  auto sp = assemble_prompt(Vec::Zero(12), enc);
  REQUIRE(sp.rows.rows() == 6);
  for (int r = 1; r <= 3; ++r) CHECK(sp.rows.row(r).transpose().isApprox(enc.positional_embedding(r), 0.0));
  // With positions removed the context rows are exactly zero.
  CHECK(prompt_context(sp, enc).cwiseAbs().maxCoeff() < 1e-17);
  CHECK((sp.rows.row(0).transpose() - enc.positional_embedding(0) - enc.special_embedding(kSos)).norm() < 1e-15);
}

TEST_CASE("assemble shape contract for arbitrary lengths") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> len(1, 12), dim(1, 16);
  for (int trial = 0; trial < 60; ++trial) {
    const int lp = len(rng), dp = dim(rng);
    ToyDualEncoder enc(spec(dp + 3, dp, trial));
    Vec p = Vec::Random(lp * dp);
    auto sp = assemble_prompt(p, enc);
    CHECK(sp.rows.rows() == lp + 3);
    CHECK(sp.rows.cols() == dp);
    CHECK((prompt_context(sp, enc) - p).cwiseAbs().maxCoeff() < 1e-14);
    Vec q = p;
    q[trial % q.size()] += 0.5;
    CHECK_FALSE(bitwise_equal(assemble_prompt(q, enc).rows, sp.rows));
  }
  ToyDualEncoder enc(spec(8, 4));
  CHECK_THROWS_AS(assemble_prompt(Vec::Zero(10), enc), InvalidInput);
  CHECK_THROWS_AS(assemble_prompt(Vec::Zero(0), enc), InvalidInput);
}

TEST_CASE("symmetric InfoNCE examples") {
  SUBCASE("equal similarities give ln n") {
    Mat s = Mat::Constant(2, 2, 0.3);
    CHECK(symmetric_info_nce(s, 100.0).loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    Mat s5 = Mat::Constant(5, 5, -0.2);
    CHECK(symmetric_info_nce(s5, 7.0).loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  }
  SUBCASE("a diagonal matrix drives the loss to zero as the scale grows") {
    Mat s = Mat::Identity(4, 4);
    double prev = symmetric_info_nce(s, 1.0).loss;
    for (double scale : {10.0, 50.0, 100.0}) {
      double l = symmetric_info_nce(s, scale).loss;
      CHECK(l <= prev);
      prev = l;
    }
    CHECK(symmetric_info_nce(s, 10.0).loss < symmetric_info_nce(s, 1.0).loss);
    CHECK(prev < 1e-30);
    CHECK(symmetric_info_nce(s, 100.0).loss >= 0.0);
  }
  SUBCASE("3 x 3 hand-computed cross-entropy") {
    const double sim[3][3] = {{0.9, 0.1, -0.2}, {0.3, 0.5, 0.0}, {-0.1, 0.4, 0.7}};
    const double scale = 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> row, col;
      for (std::size_t j = 0; j < 3; ++j) {
        row.push_back(scale * sim[i][j]);
        col.push_back(scale * sim[j][i]);
      }
      total += row_xent(row, i) + row_xent(col, i);
    }
    Mat s(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) s(i, j) = sim[i][j];
    CHECK(symmetric_info_nce(s, scale).loss == doctest::Approx(total / 6.0).epsilon(1e-13));
  }
  SUBCASE("a batch of one has no negatives") {
    CHECK_THROWS_AS(symmetric_info_nce(Mat::Ones(1, 1), 1.0), InvalidInput);
    ToyDualEncoder enc(spec(8, 4));
    auto one = random_features(1, 8, 1);
    std::vector<SemanticPrompt> p{assemble_prompt(Vec::Ones(4), enc)};
    CHECK_THROWS_AS(prompt_contrastive_loss(one, p, enc), InvalidInput);
  }
}

TEST_CASE("contrastive loss agrees with the prompt-level definition") {
  ToyDualEncoder enc(spec(10, 4, 5));
  Rng rng(3);
  auto ex = PromptExtractor::random(10, 3, 4, rng);
  auto batch = random_features(5, 10, 8);
  std::vector<SemanticPrompt> prompts;
  for (auto& f : batch) prompts.push_back(semantic_prompt(ex, f, enc));
  CHECK(contrastive_loss_and_grad(ex, batch, enc, nullptr) ==
        doctest::Approx(prompt_contrastive_loss(batch, prompts, enc)).epsilon(1e-14));
}

TEST_CASE("analytic extractor gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ToyDualEncoder enc(spec(6, 3, seed));
    Rng rng(seed + 100);
    auto ex = PromptExtractor::random(6, 2, 3, rng);
    ex.weight *= 20.0;
    ex.bias = gaussian(6, 1, 0.3, rng);
    auto batch = random_features(4, 6, seed + 200);
    ExtractorGradient g;
    contrastive_loss_and_grad(ex, batch, enc, &g);

    const double h = 1e-5;
    auto fd = [&](double& slot) {
      const double keep = slot;
      slot = keep + h;
      const double up = contrastive_loss_and_grad(ex, batch, enc, nullptr);
      slot = keep - h;
      const double down = contrastive_loss_and_grad(ex, batch, enc, nullptr);
      slot = keep;
      return (up - down) / (2.0 * h);
    };
    Mat fw(ex.weight.rows(), ex.weight.cols());
    for (Eigen::Index i = 0; i < fw.size(); ++i) fw.data()[i] = fd(ex.weight.data()[i]);
    Vec fb(ex.bias.size());
    for (Eigen::Index i = 0; i < fb.size(); ++i) fb[i] = fd(ex.bias[i]);
    CHECK((g.weight - fw).norm() / fw.norm() < 1e-4);
    CHECK((g.bias - fb).norm() / fb.norm() < 1e-4);
  }
}

TEST_CASE("stage I training") {
  ToyWorldOptions o;
  o.backbone = spec(24, 8, 2);
  o.train_images = 32;
  o.test_images = 32;
  auto world = make_toy_world(o);
  ToyDualEncoder enc(o.backbone);
  auto train = toy_features(world, enc, false);

  Stage1Options opt;
  opt.learning_rate = 0.05;
  opt.steps = 200;
  opt.batch_size = 16;
  opt.seed = 5;

  SUBCASE("full-set loss decreases and held-out matched pairs win") {
    Rng init_rng(opt.seed);
    auto init = PromptExtractor::random(24, opt.prompt_length, 8, init_rng);
    auto ck = train_stage1(train, enc, opt);
    CHECK(ck.loss_trace.size() == 200u);
    CHECK(ck.steps == 200);
    CHECK(ck.spec_hash == o.backbone.hash());
    const double before = contrastive_loss_and_grad(init, train, enc, nullptr);
    const double after = contrastive_loss_and_grad(ck.extractor, train, enc, nullptr);
    CHECK(after < before);

    auto test = toy_features(world, enc, true);
    double matched = 0.0, unmatched = 0.0;
    std::vector<Vec> text;
    for (auto& f : test) text.push_back(enc.encode_embeddings(semantic_prompt(ck.extractor, f, enc).rows).vector);
    const auto n = test.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double c = cosine_similarity(test[i].vector, text[j]);
        (i == j ? matched : unmatched) += c;
      }
    matched /= static_cast<double>(n);
    unmatched /= static_cast<double>(n * (n - 1));
    CHECK(matched > unmatched);
  }
  SUBCASE("learning rate 0 leaves parameters bitwise unchanged") {
    opt.learning_rate = 0.0;
    opt.steps = 20;
    Rng init_rng(opt.seed);
    auto init = PromptExtractor::random(24, opt.prompt_length, 8, init_rng);
    auto ck = train_stage1(train, enc, opt);
    CHECK(bitwise_equal(ck.extractor.weight, init.weight));
    CHECK(bitwise_equal(ck.extractor.bias, init.bias));
  }
  SUBCASE("same seed, same checkpoint; backbone untouched") {
    ToyDualEncoder before(o.backbone);
    opt.steps = 30;
    auto a = train_stage1(train, enc, opt);
    auto b = train_stage1(train, enc, opt);
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(bitwise_equal(enc.basis(), before.basis()));
    CHECK(bitwise_equal(enc.word_embedding("dog"), before.word_embedding("dog")));
    CHECK(bitwise_equal(enc.positional_embedding(3), before.positional_embedding(3)));
  }
  SUBCASE("checkpoint JSON round trip") {
    opt.steps = 5;
    auto a = train_stage1(train, enc, opt);
    auto b = PromptCheckpoint::from_json(Json::parse(a.to_json().dump()));
    CHECK(bitwise_equal(a.extractor.weight, b.extractor.weight));
    CHECK(a.loss_trace == b.loss_trace);
  }
}
