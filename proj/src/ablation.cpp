#include "mqe_align/ablation.hpp"

#include "mqe_align/error.hpp"
#include "mqe_align/trainer.hpp"

namespace mqe {

namespace {

AblationVariant variant(std::string key, std::string value) {
  return {value, {{std::move(key), value}}};
}

std::vector<AblationAxis> make_axes() {
  std::vector<AblationAxis> axes;
  axes.push_back({"stages",
                  {variant("train.stages", "1,2,3,4"), variant("train.stages", "2,3,4"),
                   variant("train.stages", "1,3,4"), variant("train.stages", "1,2,4")},
                  false});
  axes.push_back({"mqe_stage",
                  {variant("mqe.stages", "4"), variant("mqe.stages", "3,4"),
                   variant("mqe.stages", "2,3,4")},
                  false});
  axes.push_back({"qformer_peft",
                  {variant("qformer.peft", "lora_qkv,norms"), variant("qformer.peft", "lora_qkv"),
                   variant("qformer.peft", "lora_dense"), variant("qformer.peft", "norms"),
                   variant("qformer.peft", "lora_qkv,lora_dense,norms")},
                  false});
  axes.push_back({"experts",
                  {{"1", {{"mqe.experts", "1"}, {"mqe.top", "1"}}},
                   {"3", {{"mqe.experts", "3"}, {"mqe.top", "2"}}},
                   {"8", {{"mqe.experts", "8"}, {"mqe.top", "2"}}}},
                  true});
  axes.push_back({"projection_depth",
                  {variant("projection.depth", "1"), variant("projection.depth", "2"),
                   variant("projection.depth", "3")},
                  true});
  axes.push_back({"router",
                  {variant("mqe.router", "constant"), variant("mqe.router", "soft"),
                   variant("mqe.router", "sparse")},
                  true});
  axes.push_back({"stage4_trainable",
                  {variant("stage4.trainable", "mqe"),
                   variant("stage4.trainable", "mqe,modality_projector"),
                   variant("stage4.trainable", "mqe,pc_projection,qformer_peft,modality_projector,lm_peft")},
                  false});
  return axes;
}

}  // namespace

const std::vector<AblationAxis>& ablation_axes() {
  static const auto axes = make_axes();
  return axes;
}

const AblationAxis& ablation_axis(std::string_view name) {
  for (const auto& a : ablation_axes()) {
    if (a.name == name) return a;
  }
  std::string names;
  for (const auto& a : ablation_axes()) names += (names.empty() ? "" : ", ") + a.name;
  throw ConfigError("unknown ablation axis '" + std::string(name) + "' (" + names + ")");
}

bool AblationReport::logits_distinct() const {
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      if (runs[i].logits == runs[j].logits) return false;
    }
  }
  return true;
}

AblationReport run_ablation(const Config& base, const AblationAxis& axis, const Dataset& data,
                            std::ostream* log) {
  if (data.objects.empty()) throw ConfigError("ablation: dataset has no objects");
  AblationReport report;
  report.axis = axis.name;
  report.changes_forward = axis.changes_forward;
  for (const auto& v : axis.variants) {
    Config cfg = base;
    cfg.set("lm.prior_steps", "0");
    for (int s = 1; s <= 4; ++s) {
      const std::string p = "stage" + std::to_string(s) + ".";
      cfg.set(p + "epochs", "1");
      cfg.set(p + "iterations", "1");
      cfg.set(p + "warmup_steps", "0");
    }
    for (const auto& [key, value] : v.overrides) cfg.set(key, value);

    Trainer trainer(cfg, data);
    AblationRun run;
    run.label = v.label;
    run.stages = enabled_stages(cfg);
    for (int s : run.stages) {
      const auto result = trainer.run_stage(s);
      run.losses.push_back(result.losses.front());
    }
    const auto& obj = data.objects.front();
    const std::size_t o = trainer.model().config().qformer.queries;
    const auto seq = build_sequence(o, {{"What is this?", obj.caption}});
    NoGradGuard guard;
    const auto logits = trainer.model().logits(trainer.features(obj.cloud), seq, trainer.mqe_active());
    run.logits.assign(logits.data().begin(), logits.data().end());
    if (log) {
      *log << "ablate axis=" << axis.name << " variant=" << v.label << " stages=" << run.stages.size()
           << " loss=" << run.losses.back() << "\n";
    }
    report.runs.push_back(std::move(run));
  }
  return report;
}

}  // namespace mqe
