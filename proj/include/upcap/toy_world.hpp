#pragma once

#include "upcap/backbone.hpp"
#include "upcap/corpus.hpp"
#include "upcap/metrics.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace upcap {

/// Synthetic unpaired captioning world. Each image is a scene with four
/// concepts (color, object, action, place). Its latent is the mean of the
/// concept word embeddings plus noise in the text subspace, followed by
/// nuisance coordinates the text encoder never produces. Training concept
/// annotations imitate a detector and are sometimes wrong; test concepts are
/// exact.
struct ToyWorldOptions {
  BackboneSpec backbone;
  int train_images = 64;
  int test_images = 512;
  int sentences = 200;
  int references_per_image = 5;
  double semantic_noise = 0.1;   // stddev per text-subspace coordinate, relative to 1/sqrt(d_p)
  double nuisance_scale = 0.15;  // stddev per nuisance coordinate
  double concept_error = 0.25;   // chance an annotated training concept is another value of its group
  std::uint64_t seed = 7;
};

struct ToyWorld {
  UnpairedCorpus corpus;
  std::vector<ImageRecord> test_images;
  std::vector<ReferenceItem> test_references;
  std::map<std::string, std::vector<std::string>> test_concepts;
};

const std::vector<std::vector<std::string>>& toy_concept_groups();

/// One caption of the given concepts, chosen from a small template family.
std::string toy_sentence(const std::vector<std::string>& concepts, int template_index);
int toy_template_count();

ToyWorld make_toy_world(const ToyWorldOptions& options);

/// images.jsonl, sentences.jsonl, concepts.jsonl, test_images.jsonl,
/// test_references.jsonl and test_concepts.jsonl under `dir`.
void write_toy_world(const ToyWorld& world, const std::filesystem::path& dir);

}  // namespace upcap
