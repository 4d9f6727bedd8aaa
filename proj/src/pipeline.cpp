#include "upcap/pipeline.hpp"

#include "upcap/error.hpp"
#include "upcap/toy_world.hpp"

#include <fstream>

#ifndef UPCAP_VERSION
#define UPCAP_VERSION "dev"
#endif

namespace fs = std::filesystem;

namespace upcap {
namespace {

std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_text(p))); }

/// Manifest builder: records what a stage read and what it wrote.
struct Manifest {
  Stage stage;
  const RunConfig& config;
  Json inputs = Json::object();
  Json artifacts = Json::object();

  void input(const std::string& name, const fs::path& p) { inputs[name] = file_hash(p); }
  void artifact(const fs::path& dir, const std::string& name) { artifacts[name] = file_hash(dir / name); }

  Json json() const {
    return Json{{"stage", stage_name(stage)},
                {"code_version", code_version()},
                {"config", config.to_json()},
                {"config_hash", config.hash()},
                {"seed", config.seed},
                {"inputs", inputs},
                {"artifacts", artifacts}};
  }
};

fs::path require_path(const RunConfig& c, const std::string& field, const std::string& value) {
  if (value.empty()) throw ConfigError(field + ": required for this stage");
  return c.resolve(value);
}

/// Claims a fresh stage directory. Outputs are write-once.
fs::path claim_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw Error("artifacts already exist in " + dir.string() + "; choose another out_dir or pass --force");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

UnpairedCorpus read_corpus(const RunConfig& c, Manifest& m) {
  const fs::path images = require_path(c, "images", c.images);
  const fs::path sentences = require_path(c, "sentences", c.sentences);
  m.input("images", images);
  m.input("sentences", sentences);
  std::optional<fs::path> concepts;
  if (!c.concepts.empty()) {
    concepts = c.resolve(c.concepts);
    if (fs::exists(*concepts)) m.input("concepts", *concepts);
  }
  return load_corpus(images, sentences, concepts);
}

fs::path checkpoint_of(const RunConfig& c, Stage s) { return stage_dir(c, s) / "checkpoint.json"; }

/// The generator a downstream stage should use: refined when available.
std::pair<GeneratorCheckpoint, std::string> best_generator(const RunConfig& c, Manifest& m) {
  for (Stage s : {Stage::kRefine, Stage::kUic}) {
    const fs::path p = checkpoint_of(c, s);
    if (!fs::exists(p)) continue;
    m.input(stage_name(s) + "/checkpoint.json", p);
    return {GeneratorCheckpoint::load(p), stage_name(s)};
  }
  throw MissingStage("stage uic required: no generator checkpoint under " + c.out_dir);
}

void finish(const fs::path& dir, Manifest& m, StageResult& r, std::initializer_list<std::string> names) {
  for (const auto& n : names) m.artifact(dir, n);
  r.dir = dir;
  r.manifest = m.json();
  write_json(dir / "manifest.json", r.manifest);
}

StageResult run_prompt(const RunConfig& c, const StageOptions& o) {
  Manifest m{Stage::kPrompt, c};
  const UnpairedCorpus corpus = read_corpus(c, m);
  const ToyDualEncoder backbone(c.backbone_spec());
  std::vector<ImageFeature> features;
  for (const auto& rec : corpus.images) features.push_back(backbone.encode_image(rec));

  const PromptCheckpoint ckpt = train_stage1(features, backbone, c.stage1_options());
  const fs::path dir = claim_dir(stage_dir(c, Stage::kPrompt), o.force);
  ckpt.save(dir / "checkpoint.json");

  StageResult r;
  r.summary = {{"steps", ckpt.steps}, {"final_loss", ckpt.final_loss}};
  if (!ckpt.loss_trace.empty()) r.summary["initial_loss"] = ckpt.loss_trace.front();
  finish(dir, m, r, {"checkpoint.json"});
  return r;
}

StageResult run_uic(const RunConfig& c, const StageOptions& o) {
  Manifest m{Stage::kUic, c};
  std::optional<PromptCheckpoint> prompt;
  if (c.use_prompt) {
    const fs::path p = checkpoint_of(c, Stage::kPrompt);
    if (!fs::exists(p)) throw MissingStage("stage prompt required: no checkpoint at " + p.string());
    m.input("prompt/checkpoint.json", p);
    prompt = PromptCheckpoint::load(p);
  }
  const UnpairedCorpus corpus = read_corpus(c, m);
  const ToyDualEncoder backbone(c.backbone_spec());
  const GeneratorCheckpoint ckpt =
      train_stage2(corpus, backbone, prompt ? &*prompt : nullptr, c.stage2_options());

  const fs::path dir = claim_dir(stage_dir(c, Stage::kUic), o.force);
  ckpt.save(dir / "checkpoint.json");
  StageResult r;
  r.summary = {{"steps", ckpt.steps}, {"vocab_size", ckpt.model.vocab.size()}};
  if (!ckpt.gen_loss_trace.empty()) r.summary["final_gen_loss"] = ckpt.gen_loss_trace.back();
  if (!ckpt.disc_loss_trace.empty()) r.summary["final_disc_loss"] = ckpt.disc_loss_trace.back();
  finish(dir, m, r, {"checkpoint.json"});
  return r;
}

std::optional<HeldOutSet> read_heldout(const RunConfig& c, Manifest& m) {
  if (c.test_images.empty()) return std::nullopt;
  HeldOutSet h;
  const fs::path images = c.resolve(c.test_images);
  m.input("test_images", images);
  h.images = load_images(images);
  if (!c.test_references.empty()) {
    const fs::path refs = c.resolve(c.test_references);
    m.input("test_references", refs);
    h.references = load_references(refs);
  }
  return h;
}

StageResult run_refine(const RunConfig& c, const StageOptions& o) {
  Manifest m{Stage::kRefine, c};
  const fs::path uic = checkpoint_of(c, Stage::kUic);
  if (!fs::exists(uic)) throw MissingStage("stage uic required: no checkpoint at " + uic.string());
  m.input("uic/checkpoint.json", uic);
  GeneratorCheckpoint start = GeneratorCheckpoint::load(uic);
  const UnpairedCorpus corpus = read_corpus(c, m);
  const auto heldout = read_heldout(c, m);
  const ToyDualEncoder backbone(c.backbone_spec());

  const RefineResult res =
      refine_loop(corpus, backbone, std::move(start), c.refine_options(), heldout ? &*heldout : nullptr);

  const fs::path dir = claim_dir(stage_dir(c, Stage::kRefine), o.force);
  res.checkpoint.save(dir / "checkpoint.json");
  write_json(dir / "report.json", res.report.to_json());
  for (std::size_t k = 0; k < res.pairs.size(); ++k) {
    std::vector<Json> rows;
    for (const auto& p : res.pairs[k]) rows.push_back(p.to_json(res.checkpoint.model.vocab));
    const std::string name = "pseudo_pairs_iter" + std::to_string(k + 1) + ".jsonl";
    write_jsonl(dir / name, rows);
    m.artifact(dir, name);
  }

  StageResult r;
  r.summary = res.report.to_json();
  finish(dir, m, r, {"checkpoint.json", "report.json"});
  return r;
}

std::vector<Json> caption_rows(const CaptionModel& model, const DualEncoder& backbone,
                               const std::vector<ImageRecord>& images) {
  std::vector<Json> rows;
  for (const auto& rec : images) {
    const ImageFeature f = backbone.encode_image(rec);
    rows.push_back(Json{{"image_id", rec.id}, {"caption", detokenize(model.caption(f, backbone), model.vocab)}});
  }
  return rows;
}

StageResult run_evaluate(const RunConfig& c, const StageOptions& o) {
  Manifest m{Stage::kEvaluate, c};
  const auto [ckpt, source] = best_generator(c, m);
  require_path(c, "test_references", c.test_references);
  const auto heldout = read_heldout(c, m);
  if (!heldout) throw ConfigError("test_images: required for this stage");
  const ToyDualEncoder backbone(c.backbone_spec());
  if (ckpt.spec_hash != backbone.spec().hash())
    throw InvalidInput("generator checkpoint was trained against a different backbone spec");

  const HeldOutScores scores = score_heldout(ckpt.model, backbone, *heldout);
  Json report = scores.eval->to_json();
  report["checkpoint"] = source;
  report["mean_metric"] = scores.mean_metric;

  const fs::path dir = claim_dir(stage_dir(c, Stage::kEvaluate), o.force);
  write_json(dir / "report.json", report);
  write_jsonl(dir / "captions.jsonl", caption_rows(ckpt.model, backbone, heldout->images));

  StageResult r;
  r.summary = {{"checkpoint", source},
               {"B4", scores.eval->bleu4},
               {"R", scores.eval->rouge_l},
               {"C", scores.eval->cider},
               {"mean_metric", scores.mean_metric}};
  finish(dir, m, r, {"report.json", "captions.jsonl"});
  return r;
}

StageResult run_caption(const RunConfig& c, const StageOptions& o) {
  Manifest m{Stage::kCaption, c};
  const auto [ckpt, source] = best_generator(c, m);
  const fs::path input = o.input ? *o.input : require_path(c, "test_images", c.test_images);
  m.input("images", input);
  const ToyDualEncoder backbone(c.backbone_spec());
  if (ckpt.spec_hash != backbone.spec().hash())
    throw InvalidInput("generator checkpoint was trained against a different backbone spec");

  // Bad lines become error records; the rest of the file is still captioned.
  std::vector<Json> rows;
  std::size_t failures = 0;
  read_jsonl(input, [&](const Json& row, std::size_t line) {
    const std::string id = row.contains("id") && row["id"].is_string() ? row["id"].get<std::string>()
                                                                      : "line " + std::to_string(line);
    try {
      const ImageFeature f = backbone.encode_image(image_record_from_json(row));
      if (!(f.vector.norm() > 0.0)) throw DegenerateInput("image '" + id + "': zero-norm feature");
      rows.push_back(Json{{"image_id", id}, {"caption", detokenize(ckpt.model.caption(f, backbone), ckpt.model.vocab)}});
    } catch (const Error& e) {
      rows.push_back(Json{{"image_id", id}, {"error", e.what()}});
      ++failures;
    }
  });

  StageResult r;
  fs::path out_file;
  if (o.output) {
    out_file = *o.output;
    if (fs::exists(out_file) && !o.force) throw Error(out_file.string() + " already exists; pass --force to replace it");
    r.dir = out_file.parent_path().empty() ? fs::path(".") : out_file.parent_path();
  } else {
    r.dir = claim_dir(stage_dir(c, Stage::kCaption), o.force);
    out_file = r.dir / "captions.jsonl";
  }
  write_jsonl(out_file, rows);
  m.artifacts[out_file.filename().string()] = file_hash(out_file);
  r.manifest = m.json();
  r.manifest["checkpoint"] = source;
  const fs::path manifest_path =
      o.output ? fs::path(out_file.string() + ".manifest.json") : r.dir / "manifest.json";
  write_json(manifest_path, r.manifest);
  r.summary = {{"checkpoint", source}, {"captions", rows.size() - failures}, {"errors", failures},
               {"output", out_file.string()}};
  return r;
}

}  // namespace

std::string code_version() { return UPCAP_VERSION; }

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::kPrompt: return "prompt";
    case Stage::kUic: return "uic";
    case Stage::kRefine: return "refine";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kCaption: return "caption";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::kPrompt, Stage::kUic, Stage::kRefine, Stage::kEvaluate, Stage::kCaption})
    if (stage_name(s) == name) return s;
  throw ConfigError("stage: unknown stage '" + name + "'");
}

fs::path stage_dir(const RunConfig& config, Stage stage) { return fs::path(config.out_dir) / stage_name(stage); }

StageResult run_stage(Stage stage, const RunConfig& config, const StageOptions& options) {
  config.validate();
  switch (stage) {
    case Stage::kPrompt: return run_prompt(config, options);
    case Stage::kUic: return run_uic(config, options);
    case Stage::kRefine: return run_refine(config, options);
    case Stage::kEvaluate: return run_evaluate(config, options);
    case Stage::kCaption: return run_caption(config, options);
  }
  throw ConfigError("stage: unknown stage");
}

}  // namespace upcap
