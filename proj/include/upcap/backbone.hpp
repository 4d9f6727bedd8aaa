#pragma once

#include "upcap/corpus.hpp"
#include "upcap/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace upcap {

struct BackboneSpec {
  int feature_dim = 512;
  int token_dim = 512;
  double similarity_scale = 100.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Stable hash of every field; checkpoints record it.
  std::string hash() const;
  bool operator==(const BackboneSpec&) const = default;
};

struct ImageFeature {
  std::string image_id;
  Vec vector;
};

struct TextFeature {
  Vec vector;
};

/// Frozen image/text encoder pair sharing one embedding space.
///
/// Text comes in two forms: surface words (captions) and already-embedded
/// token rows (semantic prompts). The embedded route also exposes its
/// vector-Jacobian product so a trainable module can sit in front of the
/// frozen text encoder.
class DualEncoder {
 public:
  virtual ~DualEncoder() = default;

  virtual const BackboneSpec& spec() const = 0;
  virtual ImageFeature encode_image(const ImageRecord& record) const = 0;
  virtual TextFeature encode_words(std::span<const std::string> words) const = 0;
  /// `rows` is n x token_dim, one embedded token per row.
  virtual TextFeature encode_embeddings(const Mat& rows) const = 0;
  /// d(feature . grad_feature)/d(rows) for the embedded route.
  virtual Mat embeddings_vjp(const Mat& rows, const Vec& grad_feature) const = 0;
  virtual Vec special_embedding(SpecialToken token) const = 0;
  virtual Vec class_embedding() const = 0;
  virtual Vec positional_embedding(int position) const = 0;

  TextFeature encode_text(const TokenSequence& seq, const Vocabulary& vocab) const;
  double similarity_scale() const { return spec().similarity_scale; }
};

/// Deterministic stand-in for a pretrained dual encoder.
///
/// Words embed to seeded Gaussian vectors (stddev 1/sqrt(token_dim)) derived
/// from the word's bytes, so the text side needs no vocabulary. Text features
/// are Q . mean(rows), where Q holds the first token_dim columns of a seeded
/// orthonormal basis of R^feature_dim. Image latents project through the
/// leading columns of that same basis: the first token_dim latent entries
/// land in the text-reachable subspace and any further entries land in its
/// orthogonal complement, where no caption can match them.
class ToyDualEncoder final : public DualEncoder {
 public:
  explicit ToyDualEncoder(BackboneSpec spec);

  const BackboneSpec& spec() const override { return spec_; }
  ImageFeature encode_image(const ImageRecord& record) const override;
  TextFeature encode_words(std::span<const std::string> words) const override;
  TextFeature encode_embeddings(const Mat& rows) const override;
  Mat embeddings_vjp(const Mat& rows, const Vec& grad_feature) const override;
  Vec special_embedding(SpecialToken token) const override;
  Vec class_embedding() const override;
  Vec positional_embedding(int position) const override;

  Vec word_embedding(std::string_view word) const;
  /// feature_dim x feature_dim orthonormal basis; latents use leading columns.
  const Mat& basis() const { return basis_; }
  /// feature_dim x token_dim text output projection (leading basis columns).
  Mat text_projection() const { return basis_.leftCols(spec_.token_dim); }

 private:
  Vec seeded_vector(std::string_view key, double stddev) const;

  BackboneSpec spec_;
  Mat basis_;
};

/// sum(a*b) / (|a| |b|). Throws DegenerateInput on a zero-norm argument.
double cosine_similarity(const Vec& a, const Vec& b);

}  // namespace upcap
