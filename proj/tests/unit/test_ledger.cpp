#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "mqe_align/budget.hpp"
#include "mqe_align/error.hpp"
#include "mqe_align/model.hpp"
#include "mqe_align/stages.hpp"
#include "support.hpp"

using namespace mqe;

namespace {

ParameterManifest manifest_for(const Config& cfg) {
  return build_manifest(ModelConfig::from_config(cfg));
}

/// One AdamW step on whatever the stage marks trainable, with unit gradients.
void fake_step(ParameterStore<float>& store, const ParameterManifest& manifest) {
  store.sync_requires_grad(manifest);
  auto params = store.trainable(manifest);
  for (auto& p : params) {
    p.tensor.zero_grad();
    for (auto& g : p.tensor.grad()) g = 1.0f;
  }
  AdamW<float> opt;
  opt.reset(params);
  opt.step(params, 1e-2);
}

}  // namespace

TEST_SUITE("ledger") {

TEST_CASE("paper model census matches the published module sizes") {
  const auto budget = param_budget(Config::profile("paper"));
  CHECK(budget.module("point_encoder").exact == 21444864);
  CHECK(budget.module("pc_projection").exact == 1378432);
  CHECK(budget.module("qformer").exact == 105114624);
  CHECK(budget.module("qformer_peft").exact == 772608);
  CHECK(budget.module("mqe").exact == 395528);
  CHECK(budget.module("modality_projector").exact == 13638144);
  CHECK(budget.module("lm").exact == 2784757760);
  CHECK(budget.module("lm_peft").exact == 31626240);
  CHECK(budget.total == 2959128200);

  CHECK(budget.stage(1).exact == 1378432);
  CHECK(budget.stage(2).exact == 47415424);
  CHECK(budget.stage(3).exact == 47415424);
  CHECK(budget.stage(4).exact == 395528);
  CHECK(budget.trainable_union == 47810952);
  CHECK(round_millions(budget.stage(1).exact) == "1.4M");
  CHECK(round_millions(budget.stage(2).exact) == "47.4M");
  CHECK(round_millions(budget.stage(4).exact) == "0.4M");
  CHECK(group_thousands(1378432) == "1,378,432");
}

TEST_CASE("trainable and frozen counts always add up to the total") {
  for (const char* profile : {"desk", "paper"}) {
    const auto manifest = manifest_for(Config::profile(profile));
    std::size_t direct = 0;
    for (const auto& e : manifest.entries()) direct += e.numel();
    const auto& vocab = trainable_tag_vocabulary();
    for (std::size_t mask = 0; mask < (1u << vocab.size()); ++mask) {
      std::set<ModuleTag> tags;
      for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (mask & (1u << i)) tags.insert(vocab[i]);
      }
      const auto report = count_params(manifest, tags);
      CHECK(report.total == direct);
      CHECK(report.trainable_total + report.frozen_total == direct);
      std::size_t rows = 0;
      for (const auto& r : report.rows) rows += r.trainable + r.frozen;
      CHECK(rows == direct);
      CHECK(report.trainable_total == count_tagged(manifest, tags));
    }
  }
}

TEST_CASE("an empty trainable set counts zero") {
  const auto manifest = manifest_for(Config::profile("desk"));
  CHECK(count_params(manifest, {}).trainable_total == 0);
}

TEST_CASE("base and unknown tags cannot be made trainable") {
  CHECK_THROWS_AS(parse_trainable_tags({"qformer"}), ConfigError);
  CHECK_THROWS_AS(parse_trainable_tags({"lm"}), ConfigError);
  CHECK_THROWS_AS(parse_trainable_tags({"point_encoder"}), ConfigError);
  CHECK_THROWS_AS(parse_trainable_tags({"bogus"}), ConfigError);
  CHECK(parse_trainable_tags({"mqe", "lm_peft"}) == std::set<ModuleTag>{ModuleTag::mqe, ModuleTag::lm_peft});
  auto cfg = Config::profile("desk");
  cfg.set("stage2.trainable", "pc_projection,lm");
  CHECK_THROWS_AS(stage_plan(cfg, 2), ConfigError);
}

TEST_CASE("a stage-four step only touches expert tensors") {
  const auto cfg = Config::profile("desk");
  auto manifest = manifest_for(cfg);
  apply_stage_manifest(manifest, stage_plan(cfg, 4));
  CHECK(manifest.trainable_tags() == std::set<ModuleTag>{ModuleTag::mqe});
  ParameterStore<float> store(manifest);
  store.initialize(3, 0.2, 0.02);
  const auto before = store.snapshot();
  fake_step(store, manifest);
  const auto after = store.snapshot();

  CHECK(freeze_audit(manifest, before, after).empty());
  const auto changed = changed_paths(before, after);
  CHECK_FALSE(changed.empty());
  for (const auto& path : changed) CHECK(manifest.at(path).module == ModuleTag::mqe);
}

TEST_CASE("freeze audit reports a corrupted frozen tensor") {
  const auto cfg = Config::profile("desk");
  auto manifest = manifest_for(cfg);
  apply_stage_manifest(manifest, stage_plan(cfg, 4));
  ParameterStore<float> store(manifest);
  store.initialize(4, 0.2, 0.02);
  const auto before = store.snapshot();
  store.at("lm.layers.0.attn.q.weight")[5] += 1.0f;
  CHECK(freeze_audit(manifest, before, store.snapshot()) ==
        std::vector<std::string>{"lm.layers.0.attn.q.weight"});

  auto missing = store.snapshot();
  missing.erase("lm.head.weight");
  CHECK_THROWS_AS(freeze_audit(manifest, before, missing), AuditError);
}

TEST_CASE("no steps means no changes") {
  const auto cfg = Config::profile("desk");
  auto manifest = manifest_for(cfg);
  ParameterStore<float> store(manifest);
  store.initialize(5, 0.2, 0.02);
  const auto snap = store.snapshot();
  CHECK(changed_paths(snap, store.snapshot()).empty());
  CHECK(freeze_audit(manifest, snap, store.snapshot()).empty());
}

TEST_CASE("paper stage schedules follow the published table") {
  const auto cfg = Config::profile("paper");
  CHECK(enabled_stages(cfg) == std::vector<int>{1, 2, 3, 4});

  const auto s1 = stage_plan(cfg, 1);
  CHECK(s1.iterations == 70000);
  CHECK(s1.schedule.warmup_steps == 7000);
  CHECK(s1.schedule.init_lr == 3e-5);
  CHECK(s1.schedule.min_lr == 1e-5);
  CHECK(s1.schedule.warmup_lr == 1e-6);
  CHECK(s1.trainable == std::set<ModuleTag>{ModuleTag::pc_projection});
  CHECK_FALSE(s1.use_mqe);

  const auto s3 = stage_plan(cfg, 3);
  CHECK(s3.epochs == 3);
  CHECK(s3.iterations == 10000);
  CHECK(s3.schedule.warmup_steps == 3000);
  CHECK(s3.schedule.init_lr == 1e-5);
  CHECK(s3.schedule.min_lr == 1e-6);

  const auto s4 = stage_plan(cfg, 4);
  CHECK(s4.iterations == 10000);
  CHECK(s4.schedule.warmup_steps == 1000);
  CHECK(s4.schedule.init_lr == 5e-6);
  CHECK(s4.use_mqe);
  CHECK(s4.trainable == std::set<ModuleTag>{ModuleTag::mqe});
}

}  // TEST_SUITE
