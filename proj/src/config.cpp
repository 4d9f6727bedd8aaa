#include "upcap/config.hpp"

#include "upcap/error.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

namespace upcap {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define UPCAP_STR(name) \
  {#name, {[](RunConfig& c, const std::string&, const std::string& v) { c.name = v; }, \
           [](const RunConfig& c) { return c.name; }}}
#define UPCAP_INT(name) \
  {#name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.name = parse_int(k, v); }, \
           [](const RunConfig& c) { return std::to_string(c.name); }}}
#define UPCAP_U64(name) \
  {#name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.name = parse_u64(k, v); }, \
           [](const RunConfig& c) { return std::to_string(c.name); }}}
#define UPCAP_DBL(name) \
  {#name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.name = parse_double(k, v); }, \
           [](const RunConfig& c) { return format_double(c.name); }}}
#define UPCAP_BOOL(name) \
  {#name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.name = parse_bool(k, v); }, \
           [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      UPCAP_STR(images),          UPCAP_STR(sentences),       UPCAP_STR(concepts),
      UPCAP_STR(test_images),     UPCAP_STR(test_references), UPCAP_STR(out_dir),
      UPCAP_INT(feature_dim),     UPCAP_INT(token_dim),       UPCAP_DBL(similarity_scale),
      UPCAP_U64(backbone_seed),   UPCAP_INT(min_count),       UPCAP_INT(max_len),
      UPCAP_INT(prompt_length),   UPCAP_DBL(lr_stage1),       UPCAP_INT(batch_stage1),
      UPCAP_INT(steps_stage1),    UPCAP_BOOL(use_prompt),     UPCAP_INT(embed_dim),
      UPCAP_INT(hidden_dim),      UPCAP_DBL(lr_stage2),       UPCAP_INT(batch_stage2),
      UPCAP_INT(steps_stage2),    UPCAP_INT(pretrain_steps_stage2), UPCAP_DBL(lr_pretrain_stage2),
      UPCAP_DBL(lambda_concept),  UPCAP_DBL(baseline_decay),
      UPCAP_DBL(grad_clip),       UPCAP_DBL(lr_stage3),       UPCAP_INT(iterations),
      UPCAP_DBL(threshold),       UPCAP_STR(threshold_mode),  UPCAP_DBL(threshold_percentile),
      UPCAP_INT(epochs_stage3),   UPCAP_INT(batch_stage3),    UPCAP_INT(samples_stage3),
      UPCAP_U64(seed),
  };
  return table;
}

#undef UPCAP_STR
#undef UPCAP_INT
#undef UPCAP_U64
#undef UPCAP_DBL
#undef UPCAP_BOOL

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

RunConfig RunConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  cfg.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse(text, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

void RunConfig::validate() const {
  require(feature_dim > 0, "feature_dim", "must be > 0");
  require(token_dim > 0, "token_dim", "must be > 0");
  require(token_dim <= feature_dim, "token_dim", "must not exceed feature_dim");
  require(similarity_scale > 0.0, "similarity_scale", "must be > 0");
  require(min_count >= 1, "min_count", "must be >= 1");
  require(max_len >= 1, "max_len", "must be >= 1");
  require(prompt_length >= 1, "prompt_length", "must be >= 1");
  require(lr_stage1 > 0.0, "lr_stage1", "learning rate must be > 0");
  require(lr_stage2 > 0.0, "lr_stage2", "learning rate must be > 0");
  require(lr_pretrain_stage2 > 0.0, "lr_pretrain_stage2", "learning rate must be > 0");
  require(lr_stage3 > 0.0, "lr_stage3", "learning rate must be > 0");
  require(batch_stage1 >= 2, "batch_stage1", "must be >= 2 for a contrastive batch");
  require(batch_stage2 >= 1, "batch_stage2", "must be >= 1");
  require(batch_stage3 >= 1, "batch_stage3", "must be >= 1");
  require(steps_stage1 >= 0, "steps_stage1", "must be >= 0");
  require(steps_stage2 >= 0, "steps_stage2", "must be >= 0");
  require(pretrain_steps_stage2 >= 0, "pretrain_steps_stage2", "must be >= 0");
  require(embed_dim > 0, "embed_dim", "must be > 0");
  require(hidden_dim > 0, "hidden_dim", "must be > 0");
  require(lambda_concept >= 0.0, "lambda_concept", "must be >= 0");
  require(baseline_decay >= 0.0 && baseline_decay < 1.0, "baseline_decay", "must lie in [0, 1)");
  require(grad_clip >= 0.0, "grad_clip", "must be >= 0");
  require(iterations >= 0, "iterations", "must be >= 0");
  require(epochs_stage3 >= 1, "epochs_stage3", "must be >= 1");
  require(samples_stage3 >= 0, "samples_stage3", "must be >= 0");
  require(threshold_mode == "absolute" || threshold_mode == "percentile", "threshold_mode",
          "must be 'absolute' or 'percentile'");
  require(threshold_percentile >= 0.0 && threshold_percentile <= 100.0, "threshold_percentile",
          "must lie in [0, 100]");
  require(std::isfinite(threshold), "threshold", "must be finite");
  require(!out_dir.empty(), "out_dir", "must not be empty");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, field] : fields()) {
    if (key == "out_dir") continue;
    out += key + " = " + field.get(*this) + "\n";
  }
  return out;
}

std::string RunConfig::hash() const { return hex64(fnv1a(canonical())); }

Json RunConfig::to_json() const {
  Json j = Json::object();
  for (const auto& [key, field] : fields())
    if (key != "out_dir") j[key] = field.get(*this);
  return j;
}

std::filesystem::path RunConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

BackboneSpec RunConfig::backbone_spec() const {
  BackboneSpec s;
  s.feature_dim = feature_dim;
  s.token_dim = token_dim;
  s.similarity_scale = similarity_scale;
  s.seed = backbone_seed;
  return s;
}

Stage1Options RunConfig::stage1_options() const {
  Stage1Options o;
  o.learning_rate = lr_stage1;
  o.batch_size = batch_stage1;
  o.steps = steps_stage1;
  o.prompt_length = prompt_length;
  o.seed = seed;
  return o;
}

Stage2Options RunConfig::stage2_options() const {
  Stage2Options o;
  o.learning_rate = lr_stage2;
  o.steps = steps_stage2;
  o.pretrain_steps = pretrain_steps_stage2;
  o.pretrain_learning_rate = lr_pretrain_stage2;
  o.batch_size = batch_stage2;
  o.lambda_concept = lambda_concept;
  o.baseline_decay = baseline_decay;
  o.grad_clip = grad_clip;
  o.embed_dim = embed_dim;
  o.hidden_dim = hidden_dim;
  o.max_len = max_len;
  o.min_count = min_count;
  o.use_prompt = use_prompt;
  o.seed = seed;
  return o;
}

RefineOptions RunConfig::refine_options() const {
  RefineOptions o;
  o.learning_rate = lr_stage3;
  o.iterations = iterations;
  o.threshold = threshold;
  o.threshold_mode = threshold_mode == "percentile" ? ThresholdMode::kPercentile : ThresholdMode::kAbsolute;
  o.threshold_percentile = threshold_percentile;
  o.epochs = epochs_stage3;
  o.batch_size = batch_stage3;
  o.samples = samples_stage3;
  o.grad_clip = grad_clip;
  o.seed = seed;
  return o;
}

}  // namespace upcap
