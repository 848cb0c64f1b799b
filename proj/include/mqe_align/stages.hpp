#pragma once

#include <set>
#include <vector>

#include "mqe_align/config.hpp"
#include "mqe_align/dataset.hpp"
#include "mqe_align/diff/optim.hpp"
#include "mqe_align/manifest.hpp"

namespace mqe {

struct StagePlan {
  int stage = 1;
  std::set<ModuleTag> trainable;
  MixPlan mix;
  std::size_t epochs = 1;
  std::size_t iterations = 1;  // per epoch
  LrSchedule schedule;
  bool use_mqe = false;

  std::size_t total_steps() const { return epochs * iterations; }
};

/// Stages enabled by `train.stages`, ascending.
std::vector<int> enabled_stages(const Config& cfg);

/// Builds stage `stage` from `stageN.*`, `data.*` and `mqe.stages`. A stage
/// that runs the expert mixture also trains it.
StagePlan stage_plan(const Config& cfg, int stage);

/// Trainable flags := plan.trainable. Base tags (encoder, frozen Q-Former and
/// LM weights) can never be made trainable.
void apply_stage_manifest(ParameterManifest& manifest, const StagePlan& plan);

AdamWConfig adamw_config(const Config& cfg);

}  // namespace mqe
