#include "upcap/toy_world.hpp"

#include "upcap/error.hpp"
#include "upcap/jsonl.hpp"

#include <cmath>
#include <random>

namespace upcap {
namespace {

using Concepts = std::vector<std::string>;

Concepts draw_concepts(Rng& rng) {
  Concepts out;
  for (const auto& group : toy_concept_groups()) {
    std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
    out.push_back(group[pick(rng)]);
  }
  return out;
}

std::vector<double> toy_latent(const Concepts& concepts, const ToyDualEncoder& encoder,
                               const ToyWorldOptions& o, Rng& rng) {
  const int dp = o.backbone.token_dim;
  const int df = o.backbone.feature_dim;
  Vec semantic = Vec::Zero(dp);
  for (const auto& c : concepts) semantic += encoder.word_embedding(c);
  semantic /= static_cast<double>(concepts.size());
  std::normal_distribution<double> noise(0.0, o.semantic_noise / std::sqrt(static_cast<double>(dp)));
  std::normal_distribution<double> nuisance(0.0, o.nuisance_scale);
  std::vector<double> latent(df);
  for (int i = 0; i < dp; ++i) latent[i] = semantic[i] + noise(rng);
  for (int i = dp; i < df; ++i) latent[i] = nuisance(rng);
  return latent;
}

Concepts detect(const Concepts& truth, double error, Rng& rng) {
  std::bernoulli_distribution wrong(error);
  Concepts out = truth;
  const auto& groups = toy_concept_groups();
  for (std::size_t g = 0; g < out.size(); ++g) {
    if (!wrong(rng)) continue;
    std::uniform_int_distribution<std::size_t> pick(0, groups[g].size() - 2);
    std::size_t k = pick(rng);
    if (groups[g][k] == truth[g]) k = groups[g].size() - 1;
    out[g] = groups[g][k];
  }
  return out;
}

Json image_json(const ImageRecord& r) { return Json{{"id", r.id}, {"latent", *r.latent}}; }

}  // namespace

const std::vector<std::vector<std::string>>& toy_concept_groups() {
  static const std::vector<std::vector<std::string>> groups = {
      {"red", "blue", "green"},
      {"dog", "cat", "horse"},
      {"running", "sitting", "jumping"},
      {"park", "beach", "street"},
  };
  return groups;
}

int toy_template_count() { return 3; }

std::string toy_sentence(const Concepts& c, int template_index) {
  if (c.size() != 4) throw InvalidInput("toy sentences need four concepts");
  switch (template_index) {
    case 0: return "a " + c[0] + " " + c[1] + " is " + c[2] + " in the " + c[3] + ".";
    case 1: return "the " + c[0] + " " + c[1] + " " + c[2] + " near the " + c[3] + ".";
    case 2: return "in the " + c[3] + " a " + c[0] + " " + c[1] + " is " + c[2] + ".";
    default: throw InvalidInput("unknown toy template " + std::to_string(template_index));
  }
}

ToyWorld make_toy_world(const ToyWorldOptions& o) {
  const ToyDualEncoder encoder(o.backbone);
  Rng rng(o.seed);
  std::uniform_int_distribution<int> pick_template(0, toy_template_count() - 1);
  ToyWorld world;
  world.corpus.concepts.emplace();

  auto make_image = [&](const std::string& id, const Concepts& concepts) {
    ImageRecord r;
    r.id = id;
    r.latent = toy_latent(concepts, encoder, o, rng);
    return r;
  };

  for (int k = 0; k < o.train_images; ++k) {
    const Concepts c = draw_concepts(rng);
    const std::string id = "train_" + std::to_string(k);
    world.corpus.images.push_back(make_image(id, c));
    (*world.corpus.concepts)[id] = detect(c, o.concept_error, rng);
  }
  // Sentences describe scenes of their own; nothing links them to images.
  for (int k = 0; k < o.sentences; ++k) world.corpus.sentences.push_back(toy_sentence(draw_concepts(rng), pick_template(rng)));

  for (int k = 0; k < o.test_images; ++k) {
    const Concepts c = draw_concepts(rng);
    const std::string id = "test_" + std::to_string(k);
    world.test_images.push_back(make_image(id, c));
    world.test_concepts[id] = c;
    ReferenceItem refs{id, {}};
    for (int r = 0; r < o.references_per_image; ++r) refs.references.push_back(toy_sentence(c, r % toy_template_count()));
    world.test_references.push_back(std::move(refs));
  }
  return world;
}

void write_toy_world(const ToyWorld& world, const std::filesystem::path& dir) {
  std::vector<Json> rows;
  for (const auto& r : world.corpus.images) rows.push_back(image_json(r));
  write_jsonl(dir / "images.jsonl", rows);

  rows.clear();
  for (const auto& s : world.corpus.sentences) rows.push_back(Json{{"text", s}});
  write_jsonl(dir / "sentences.jsonl", rows);

  rows.clear();
  for (const auto& r : world.corpus.images)
    rows.push_back(Json{{"image_id", r.id}, {"concepts", world.corpus.concepts->at(r.id)}});
  write_jsonl(dir / "concepts.jsonl", rows);

  rows.clear();
  for (const auto& r : world.test_images) rows.push_back(image_json(r));
  write_jsonl(dir / "test_images.jsonl", rows);

  rows.clear();
  for (const auto& r : world.test_references)
    rows.push_back(Json{{"image_id", r.image_id}, {"references", r.references}});
  write_jsonl(dir / "test_references.jsonl", rows);

  rows.clear();
  for (const auto& [id, c] : world.test_concepts) rows.push_back(Json{{"image_id", id}, {"concepts", c}});
  write_jsonl(dir / "test_concepts.jsonl", rows);
}

}  // namespace upcap
