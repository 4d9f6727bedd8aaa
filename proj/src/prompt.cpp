#include "upcap/prompt.hpp"

#include "upcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace upcap {
namespace {

constexpr int kFramingRows = 3;

Mat reshape_rows(const Vec& p, int rows, int cols) {
  // p is laid out row-major: entry k * cols + c belongs to row k.
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      p.data(), rows, cols);
}

Vec flatten_rows(const Mat& m) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return Eigen::Map<const Vec>(rm.data(), rm.size());
}

Mat unit_columns(const std::vector<Vec>& vs, std::vector<double>* norms, const char* what) {
  Mat out(vs.front().size(), static_cast<Eigen::Index>(vs.size()));
  for (std::size_t i = 0; i < vs.size(); ++i) {
    const double n = vs[i].norm();
    if (!(n > 0.0)) throw DegenerateInput(std::string("zero-norm ") + what + " feature");
    out.col(static_cast<Eigen::Index>(i)) = vs[i] / n;
    if (norms) norms->push_back(n);
  }
  return out;
}

}  // namespace

PromptExtractor PromptExtractor::zeros(int feature_dim, int prompt_length, int token_dim) {
  if (feature_dim <= 0 || prompt_length <= 0 || token_dim <= 0)
    throw InvalidInput("prompt extractor dimensions must be positive");
  PromptExtractor ex;
  ex.prompt_length = prompt_length;
  ex.token_dim = token_dim;
  ex.weight = Mat::Zero(prompt_length * token_dim, feature_dim);
  ex.bias = Vec::Zero(prompt_length * token_dim);
  return ex;
}

PromptExtractor PromptExtractor::random(int feature_dim, int prompt_length, int token_dim,
                                        Rng& rng) {
  PromptExtractor ex = zeros(feature_dim, prompt_length, token_dim);
  ex.weight = gaussian(ex.weight.rows(), ex.weight.cols(),
                       0.1 / std::sqrt(static_cast<double>(feature_dim)), rng);
  return ex;
}

Vec PromptExtractor::extract(const ImageFeature& image) const {
  if (image.vector.size() != weight.cols())
    throw InvalidInput("image '" + image.image_id + "' has feature length " +
                       std::to_string(image.vector.size()) + ", extractor expects " +
                       std::to_string(weight.cols()));
  Vec p = weight * image.vector + bias;
  if (!p.allFinite()) throw TrainingDiverged("prompt extractor produced non-finite output");
  return p;
}

SemanticPrompt assemble_prompt(const Vec& p, const DualEncoder& backbone) {
  const int d = backbone.spec().token_dim;
  if (p.size() == 0 || p.size() % d != 0)
    throw InvalidInput("prompt vector length " + std::to_string(p.size()) +
                       " is not a positive multiple of token_dim " + std::to_string(d));
  const int len = static_cast<int>(p.size() / d);
  SemanticPrompt out;
  out.prompt_length = len;
  out.rows.resize(len + kFramingRows, d);
  out.rows.row(0) = backbone.special_embedding(kSos).transpose();
  out.rows.middleRows(1, len) = reshape_rows(p, len, d);
  out.rows.row(len + 1) = backbone.class_embedding().transpose();
  out.rows.row(len + 2) = backbone.special_embedding(kEos).transpose();
  for (int r = 0; r < len + kFramingRows; ++r)
    out.rows.row(r) += backbone.positional_embedding(r).transpose();
  return out;
}

Vec prompt_context(const SemanticPrompt& prompt, const DualEncoder& backbone) {
  Mat ctx = prompt.context_rows();
  for (int r = 0; r < prompt.prompt_length; ++r)
    ctx.row(r) -= backbone.positional_embedding(r + 1).transpose();
  return flatten_rows(ctx);
}

SemanticPrompt semantic_prompt(const PromptExtractor& extractor, const ImageFeature& image,
                               const DualEncoder& backbone) {
  return assemble_prompt(extractor.extract(image), backbone);
}

InfoNceResult symmetric_info_nce(const Mat& similarity, double scale) {
  const Eigen::Index n = similarity.rows();
  if (n != similarity.cols()) throw InvalidInput("similarity matrix must be square");
  if (n < 2) throw InvalidInput("contrastive loss needs a batch of at least 2 (no negatives)");

  const Mat logits = scale * similarity;
  Mat row_soft(n, n), col_soft(n, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    row_soft.row(i) = softmax(logits.row(i).transpose()).transpose();
    col_soft.col(i) = softmax(logits.col(i));
    loss -= std::log(row_soft(i, i)) + std::log(col_soft(i, i));
  }
  const double norm = 2.0 * static_cast<double>(n);
  InfoNceResult out;
  out.loss = loss / norm;
  out.grad_similarity = scale * (row_soft + col_soft - 2.0 * Mat::Identity(n, n)) / norm;
  return out;
}

double prompt_contrastive_loss(std::span<const ImageFeature> images,
                               std::span<const SemanticPrompt> prompts,
                               const DualEncoder& backbone) {
  if (images.size() != prompts.size()) throw InvalidInput("images and prompts differ in count");
  if (images.size() < 2) throw InvalidInput("contrastive loss needs a batch of at least 2 (no negatives)");
  std::vector<Vec> fi, fp;
  for (const auto& im : images) fi.push_back(im.vector);
  for (const auto& pr : prompts) fp.push_back(backbone.encode_embeddings(pr.rows).vector);
  const Mat a = unit_columns(fi, nullptr, "image");
  const Mat b = unit_columns(fp, nullptr, "prompt");
  return symmetric_info_nce(a.transpose() * b, backbone.similarity_scale()).loss;
}

double contrastive_loss_and_grad(const PromptExtractor& extractor,
                                 std::span<const ImageFeature> batch,
                                 const DualEncoder& backbone, ExtractorGradient* grad) {
  if (batch.size() < 2) throw InvalidInput("contrastive loss needs a batch of at least 2 (no negatives)");
  std::vector<Vec> fi, fp;
  std::vector<SemanticPrompt> prompts;
  for (const auto& im : batch) {
    fi.push_back(im.vector);
    prompts.push_back(semantic_prompt(extractor, im, backbone));
    fp.push_back(backbone.encode_embeddings(prompts.back().rows).vector);
  }
  std::vector<double> prompt_norms;
  const Mat a = unit_columns(fi, nullptr, "image");
  const Mat b = unit_columns(fp, &prompt_norms, "prompt");
  const Mat sim = a.transpose() * b;
  const InfoNceResult nce = symmetric_info_nce(sim, backbone.similarity_scale());
  if (!std::isfinite(nce.loss)) throw TrainingDiverged("contrastive loss is not finite");
  if (!grad) return nce.loss;

  grad->weight = Mat::Zero(extractor.weight.rows(), extractor.weight.cols());
  grad->bias = Vec::Zero(extractor.bias.size());
  const auto n = static_cast<Eigen::Index>(batch.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    // dS_ij/dg_j = (a_i - S_ij b_j) / |g_j|
    Vec dg = Vec::Zero(a.rows());
    for (Eigen::Index i = 0; i < n; ++i)
      dg += nce.grad_similarity(i, j) * (a.col(i) - sim(i, j) * b.col(j));
    dg /= prompt_norms[j];
    const auto& rows = prompts[j].rows;
    const Mat drows = backbone.embeddings_vjp(rows, dg);
    const Vec dp = flatten_rows(drows.middleRows(1, extractor.prompt_length));
    grad->weight.noalias() += dp * batch[j].vector.transpose();
    grad->bias += dp;
  }
  return nce.loss;
}

Json PromptCheckpoint::to_json() const {
  return Json{{"format", "upcap.prompt_checkpoint"},
              {"version", 1},
              {"spec_hash", spec_hash},
              {"prompt_length", extractor.prompt_length},
              {"token_dim", extractor.token_dim},
              {"weight", matrix_to_json(extractor.weight)},
              {"bias", vector_to_json(extractor.bias)},
              {"steps", steps},
              {"final_loss", final_loss},
              {"loss_trace", loss_trace}};
}

PromptCheckpoint PromptCheckpoint::from_json(const Json& j) {
  if (j.value("format", "") != "upcap.prompt_checkpoint")
    throw InvalidInput("not a prompt checkpoint");
  PromptCheckpoint ck;
  ck.spec_hash = j.at("spec_hash").get<std::string>();
  ck.extractor.prompt_length = j.at("prompt_length").get<int>();
  ck.extractor.token_dim = j.at("token_dim").get<int>();
  ck.extractor.weight = matrix_from_json(j.at("weight"));
  ck.extractor.bias = vector_from_json(j.at("bias"));
  if (ck.extractor.weight.rows() != ck.extractor.output_dim() ||
      ck.extractor.bias.size() != ck.extractor.output_dim())
    throw InvalidInput("prompt checkpoint parameters do not match prompt_length x token_dim");
  ck.steps = j.at("steps").get<int>();
  ck.final_loss = j.at("final_loss").get<double>();
  ck.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return ck;
}

void PromptCheckpoint::save(const std::filesystem::path& path) const { write_json(path, to_json()); }

PromptCheckpoint PromptCheckpoint::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

PromptCheckpoint train_stage1(std::span<const ImageFeature> images, const DualEncoder& backbone,
                              const Stage1Options& options) {
  if (images.size() < 2) throw InvalidInput("stage I needs at least two images");
  if (options.batch_size < 2) throw ConfigError("batch_size_stage1 must be >= 2");
  if (options.learning_rate < 0.0) throw ConfigError("lr_stage1 must be >= 0");
  if (options.steps < 0) throw ConfigError("steps_stage1 must be >= 0");

  Rng rng(options.seed);
  PromptCheckpoint ck;
  ck.spec_hash = backbone.spec().hash();
  ck.extractor = PromptExtractor::random(backbone.spec().feature_dim, options.prompt_length,
                                         backbone.spec().token_dim, rng);

  const std::size_t batch = std::min<std::size_t>(options.batch_size, images.size());
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = images.size();  // forces a shuffle on the first step

  std::vector<ImageFeature> mb;
  ExtractorGradient grad;
  for (int step = 0; step < options.steps; ++step) {
    if (cursor + batch > images.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    mb.clear();
    for (std::size_t k = 0; k < batch; ++k) mb.push_back(images[order[cursor + k]]);
    cursor += batch;

    double loss = 0.0;
    try {
      loss = contrastive_loss_and_grad(ck.extractor, mb, backbone, &grad);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step));
    }
    ck.extractor.weight -= options.learning_rate * grad.weight;
    ck.extractor.bias -= options.learning_rate * grad.bias;
    if (!ck.extractor.weight.allFinite() || !ck.extractor.bias.allFinite())
      throw TrainingDiverged("stage I parameters became non-finite at step " + std::to_string(step));
    ck.loss_trace.push_back(loss);
  }
  ck.steps = options.steps;
  ck.final_loss = ck.loss_trace.empty() ? 0.0 : ck.loss_trace.back();
  return ck;
}

}  // namespace upcap
