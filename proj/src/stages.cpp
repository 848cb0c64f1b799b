#include "mqe_align/stages.hpp"

#include <algorithm>

#include "mqe_align/error.hpp"

namespace mqe {

std::vector<int> enabled_stages(const Config& cfg) {
  std::vector<int> out;
  for (auto s : cfg.int_list("train.stages")) {
    if (s < 1 || s > 4) throw ConfigError("train.stages: stage " + std::to_string(s) + " is not in 1..4");
    out.push_back(static_cast<int>(s));
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw ConfigError("train.stages: duplicate stage");
  }
  if (out.empty()) throw ConfigError("train.stages: no stage enabled");
  return out;
}

StagePlan stage_plan(const Config& cfg, int stage) {
  if (stage < 1 || stage > 4) throw ConfigError("stage " + std::to_string(stage) + " is not in 1..4");
  const std::string p = "stage" + std::to_string(stage) + ".";
  StagePlan plan;
  plan.stage = stage;
  plan.trainable = parse_trainable_tags(cfg.list(p + "trainable"));
  for (auto s : cfg.int_list("mqe.stages")) {
    if (s == stage) plan.use_mqe = true;
  }
  if (plan.use_mqe) plan.trainable.insert(ModuleTag::mqe);

  for (const auto& name : cfg.list(p + "kinds")) {
    const auto kind = parse_sample_kind(name);
    const std::string k(to_string(kind));
    const auto batch = cfg.integer("data.batch." + k), ratio = cfg.integer("data.ratio." + k);
    if (batch < 1 || ratio < 1) {
      throw ConfigError("data." + k + ": batch size and ratio must be positive integers");
    }
    plan.mix.push_back({kind, static_cast<std::size_t>(batch), static_cast<std::size_t>(ratio)});
  }
  if (plan.mix.empty()) throw ConfigError(p + "kinds: no data kinds");

  const auto epochs = cfg.integer(p + "epochs"), iters = cfg.integer(p + "iterations");
  if (epochs < 1 || iters < 1) throw ConfigError(p + "epochs and iterations must be >= 1");
  plan.epochs = static_cast<std::size_t>(epochs);
  plan.iterations = static_cast<std::size_t>(iters);

  plan.schedule.warmup_lr = cfg.real(p + "warmup_lr");
  plan.schedule.init_lr = cfg.real(p + "init_lr");
  plan.schedule.min_lr = cfg.real(p + "min_lr");
  plan.schedule.warmup_steps = cfg.integer(p + "warmup_steps");
  plan.schedule.total_steps = static_cast<std::int64_t>(plan.total_steps());
  plan.schedule.validate();
  return plan;
}

void apply_stage_manifest(ParameterManifest& manifest, const StagePlan& plan) {
  const auto& vocab = trainable_tag_vocabulary();
  for (auto tag : plan.trainable) {
    if (std::find(vocab.begin(), vocab.end(), tag) == vocab.end()) {
      throw ConfigError("stage " + std::to_string(plan.stage) + ": module tag '" +
                        std::string(to_string(tag)) + "' cannot be trained");
    }
  }
  manifest.set_trainable(plan.trainable);
}

AdamWConfig adamw_config(const Config& cfg) {
  return {cfg.real("optim.beta1"), cfg.real("optim.beta2"), cfg.real("optim.eps"),
          cfg.real("optim.weight_decay")};
}

}  // namespace mqe
