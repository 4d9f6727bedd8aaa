// Command-line front end for the captioning pipeline.

#include "CLI11.hpp"
#include "upcap/error.hpp"
#include "upcap/pipeline.hpp"
#include "upcap/toy_world.hpp"

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace {

struct CommonFlags {
  std::string config;
  std::optional<double> threshold;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<std::string> out;
  std::vector<std::string> sets;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "run config file (key = value lines)")->required();
  cmd->add_option("--threshold", f.threshold, "metric gate threshold T");
  cmd->add_option("--iterations", f.iterations, "refine iterations");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--lr", f.lr, "learning rate of the stage being run");
  cmd->add_option("--out", f.out, "output directory (overrides out_dir)");
  cmd->add_option("--set", f.sets, "override any config key: --set key=value")->take_all();
  cmd->add_flag("--force", f.force, "replace existing artifacts of this stage");
}

upcap::RunConfig build_config(const CommonFlags& f, std::optional<upcap::Stage> stage) {
  upcap::RunConfig c = upcap::RunConfig::load(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw upcap::ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.threshold) c.threshold = *f.threshold;
  if (f.iterations) c.iterations = *f.iterations;
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out_dir = *f.out;
  if (f.lr) {
    if (stage == upcap::Stage::kPrompt) c.lr_stage1 = *f.lr;
    else if (stage == upcap::Stage::kUic) c.lr_stage2 = *f.lr;
    else if (stage == upcap::Stage::kRefine) c.lr_stage3 = *f.lr;
    else std::cerr << "note: --lr has no effect on a stage that does not train\n";
  }
  c.validate();
  return c;
}

void report(upcap::Stage stage, const upcap::StageResult& r) {
  std::cout << upcap::stage_name(stage) << ": wrote " << r.dir.string() << "\n" << r.summary.dump(2) << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const upcap::ConfigError*>(&e)) return 2;
  if (dynamic_cast<const upcap::MissingStage*>(&e)) return 3;
  if (dynamic_cast<const upcap::EmptyGate*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unpaired image captioning with semantic and metric prompts"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, upcap::Stage>> stages = {
      {"prompt-train", upcap::Stage::kPrompt}, {"uic-train", upcap::Stage::kUic},
      {"refine", upcap::Stage::kRefine},       {"caption", upcap::Stage::kCaption},
      {"evaluate", upcap::Stage::kEvaluate},
  };
  const std::map<std::string, std::string> blurbs = {
      {"prompt-train", "Stage I: train the semantic prompt extractor"},
      {"uic-train", "Stage II: adversarial caption generator training"},
      {"refine", "Stage III: metric-prompt gated self-training"},
      {"caption", "caption an image JSONL file"},
      {"evaluate", "BLEU-4 / ROUGE-L / CIDEr on the test set"},
  };

  CommonFlags flags;
  std::optional<std::string> input, output;
  std::map<std::string, CLI::App*> commands;
  for (const auto& [name, stage] : stages) {
    CLI::App* cmd = app.add_subcommand(name, blurbs.at(name));
    add_common(cmd, flags);
    if (stage == upcap::Stage::kCaption) {
      cmd->add_option("--input", input, "image JSONL to caption (default: test_images)");
      cmd->add_option("--output", output, "caption JSONL to write");
    }
    commands[name] = cmd;
  }

  CLI::App* pipeline = app.add_subcommand("pipeline", "run prompt-train, uic-train, refine and evaluate in order");
  add_common(pipeline, flags);

  std::string toy_dir;
  upcap::ToyWorldOptions toy;
  toy.backbone.feature_dim = 64;  // matches configs/toy.cfg
  toy.backbone.token_dim = 32;
  CLI::App* toy_cmd = app.add_subcommand("toy-world", "write the synthetic toy dataset");
  toy_cmd->add_option("--out", toy_dir, "directory for the JSONL files")->required();
  toy_cmd->add_option("--seed", toy.seed, "world seed");
  toy_cmd->add_option("--test-images", toy.test_images, "number of held-out test images");
  toy_cmd->add_option("--feature-dim", toy.backbone.feature_dim, "backbone feature width");
  toy_cmd->add_option("--token-dim", toy.backbone.token_dim, "backbone token width");
  toy_cmd->add_option("--backbone-seed", toy.backbone.seed, "backbone seed");
  toy_cmd->add_option("--semantic-noise", toy.semantic_noise, "noise inside the text subspace");
  toy_cmd->add_option("--nuisance-scale", toy.nuisance_scale, "scale of the nuisance coordinates");

  CLI11_PARSE(app, argc, argv);

  try {
    if (toy_cmd->parsed()) {
      upcap::write_toy_world(upcap::make_toy_world(toy), toy_dir);
      std::cout << "toy world written to " << toy_dir << "\n";
      return 0;
    }
    if (pipeline->parsed()) {
      for (upcap::Stage s : {upcap::Stage::kPrompt, upcap::Stage::kUic, upcap::Stage::kRefine,
                             upcap::Stage::kEvaluate}) {
        const upcap::RunConfig c = build_config(flags, s);
        if (s == upcap::Stage::kPrompt && !c.use_prompt) continue;
        report(s, upcap::run_stage(s, c, {.force = flags.force}));
      }
      return 0;
    }
    for (const auto& [name, stage] : stages) {
      if (!commands[name]->parsed()) continue;
      upcap::StageOptions opts;
      opts.force = flags.force;
      if (input) opts.input = *input;
      if (output) opts.output = *output;
      report(stage, upcap::run_stage(stage, build_config(flags, stage), opts));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
