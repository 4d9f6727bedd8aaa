#include "upcap/backbone.hpp"

#include "upcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace upcap {
namespace {

constexpr double kPositionalScale = 0.1;

std::string id_context(const ImageRecord& record) { return "image '" + record.id + "'"; }

}  // namespace

void BackboneSpec::validate() const {
  if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
  if (token_dim <= 0) throw ConfigError("token_dim must be positive");
  if (!(similarity_scale > 0.0) || !std::isfinite(similarity_scale))
    throw ConfigError("similarity_scale must be a positive finite number");
}

std::string BackboneSpec::hash() const {
  std::ostringstream key;
  key.precision(17);
  key << "feature_dim=" << feature_dim << ";token_dim=" << token_dim
      << ";similarity_scale=" << similarity_scale << ";seed=" << seed;
  return hex64(fnv1a(key.str()));
}

TextFeature DualEncoder::encode_text(const TokenSequence& seq, const Vocabulary& vocab) const {
  if (seq.empty()) throw DegenerateInput("cannot encode an empty caption");
  std::vector<std::string> words;
  words.reserve(seq.size());
  for (int idx : seq.indices) words.push_back(vocab.word(idx));
  return encode_words(words);
}

ToyDualEncoder::ToyDualEncoder(BackboneSpec spec) : spec_(spec) {
  spec_.validate();
  if (spec_.token_dim > spec_.feature_dim)
    throw ConfigError("toy backbone requires token_dim <= feature_dim");
  Rng rng(spec_.seed ^ 0x9e3779b97f4a7c15ULL);
  Mat g = gaussian(spec_.feature_dim, spec_.feature_dim, 1.0, rng);
  Eigen::HouseholderQR<Mat> qr(g);
  basis_ = qr.householderQ() * Mat::Identity(spec_.feature_dim, spec_.feature_dim);
}

Vec ToyDualEncoder::seeded_vector(std::string_view key, double stddev) const {
  Rng rng(fnv1a(key, 0xcbf29ce484222325ULL ^ spec_.seed));
  std::normal_distribution<double> normal(0.0, stddev);
  Vec v(spec_.token_dim);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

Vec ToyDualEncoder::word_embedding(std::string_view word) const {
  return seeded_vector(std::string("word:") + std::string(word),
                       1.0 / std::sqrt(static_cast<double>(spec_.token_dim)));
}

Vec ToyDualEncoder::special_embedding(SpecialToken token) const {
  return word_embedding(Vocabulary::special_name(token));
}

Vec ToyDualEncoder::class_embedding() const { return word_embedding("<cls>"); }

Vec ToyDualEncoder::positional_embedding(int position) const {
  if (position < 0) throw InvalidInput("negative position");
  return seeded_vector("pos:" + std::to_string(position),
                       kPositionalScale / std::sqrt(static_cast<double>(spec_.token_dim)));
}

ImageFeature ToyDualEncoder::encode_image(const ImageRecord& record) const {
  ImageFeature out{record.id, {}};
  if (record.feature) {
    if (static_cast<int>(record.feature->size()) != spec_.feature_dim)
      throw InvalidInput(id_context(record) + ": feature has length " +
                         std::to_string(record.feature->size()) + ", expected " +
                         std::to_string(spec_.feature_dim));
    out.vector = to_vec(*record.feature);
  } else if (record.latent) {
    const auto n = static_cast<Eigen::Index>(record.latent->size());
    if (n == 0 || n > spec_.feature_dim)
      throw InvalidInput(id_context(record) + ": latent has length " + std::to_string(n) +
                         ", expected 1.." + std::to_string(spec_.feature_dim));
    out.vector = basis_.leftCols(n) * to_vec(*record.latent);
  } else {
    throw InvalidInput(id_context(record) + ": no feature or latent");
  }
  if (!out.vector.allFinite()) throw InvalidInput(id_context(record) + ": non-finite values");
  return out;
}

TextFeature ToyDualEncoder::encode_words(std::span<const std::string> words) const {
  if (words.empty()) throw DegenerateInput("cannot encode an empty caption");
  Vec sum = Vec::Zero(spec_.token_dim);
  for (const auto& w : words) sum += word_embedding(w);
  return {basis_.leftCols(spec_.token_dim) * (sum / static_cast<double>(words.size()))};
}

TextFeature ToyDualEncoder::encode_embeddings(const Mat& rows) const {
  if (rows.rows() == 0) throw DegenerateInput("cannot encode an empty prompt");
  if (rows.cols() != spec_.token_dim)
    throw InvalidInput("prompt rows have width " + std::to_string(rows.cols()) + ", expected " +
                       std::to_string(spec_.token_dim));
  Vec mean = rows.colwise().mean().transpose();
  return {basis_.leftCols(spec_.token_dim) * mean};
}

Mat ToyDualEncoder::embeddings_vjp(const Mat& rows, const Vec& grad_feature) const {
  if (grad_feature.size() != spec_.feature_dim) throw InvalidInput("gradient has wrong length");
  Vec per_row = basis_.leftCols(spec_.token_dim).transpose() * grad_feature /
                static_cast<double>(rows.rows());
  return per_row.transpose().replicate(rows.rows(), 1);
}

double cosine_similarity(const Vec& a, const Vec& b) {
  if (a.size() != b.size())
    throw InvalidInput("cosine_similarity: length mismatch " + std::to_string(a.size()) +
                       " vs " + std::to_string(b.size()));
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateInput("cosine_similarity: zero-norm feature");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace upcap
