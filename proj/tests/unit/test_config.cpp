#include "doctest.h"
#include "mqe_align/ablation.hpp"
#include "mqe_align/config.hpp"
#include "mqe_align/error.hpp"
#include "mqe_align/model_config.hpp"
#include "mqe_align/stages.hpp"

using namespace mqe;

namespace {

std::vector<std::string> keys_of(const Config& c) {
  std::vector<std::string> out;
  for (const auto& [k, v] : c.values()) out.push_back(k);
  return out;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("unknown keys and malformed lines are rejected") {
  CHECK_THROWS_AS(Config::parse("seed = 1\nnot.a.key = 3\n", "t"), ConfigError);
  CHECK_THROWS_AS(Config::parse("seed = 1\nseed = 2\n", "t"), ConfigError);
  CHECK_THROWS_AS(Config::parse("just words\n", "t"), ConfigError);
  auto cfg = Config::profile("desk");
  CHECK_THROWS_AS(cfg.set("qformer.wdith", "4"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_override("seed"), ConfigError);
  cfg.apply_override("seed=3");
  CHECK(cfg.integer("seed") == 3);
  cfg.set("seed", "three");
  CHECK_THROWS_AS(cfg.integer("seed"), ConfigError);
  CHECK_THROWS_AS(Config::profile("laptop"), ConfigError);
}

TEST_CASE("both built-in profiles define the same keys") {
  CHECK(keys_of(Config::profile("desk")) == keys_of(Config::profile("paper")));
  CHECK(keys_of(Config::profile("desk")) == Config::known_keys());
}

TEST_CASE("canonical dump round-trips and the hash follows the values") {
  const auto cfg = Config::profile("desk");
  const auto again = Config::parse(cfg.dump(), "dump");
  CHECK(again.dump() == cfg.dump());
  CHECK(again.hash() == cfg.hash());
  auto changed = cfg;
  changed.set("stage3.init_lr", "2e-3");
  CHECK(changed.hash() != cfg.hash());
}

TEST_CASE("paper profile carries the published model settings") {
  const auto m = ModelConfig::from_config(Config::profile("paper"));
  CHECK(m.encoder.num_patches == 512);
  CHECK(m.encoder.group_size == 32);
  CHECK(m.encoder.hidden == 384);
  CHECK(m.encoder.heads == 6);
  CHECK(m.encoder.layers == 12);
  CHECK(m.projection.depth == 2);
  CHECK(m.projection.hidden == 768);
  CHECK(m.qformer.encoder_width == 1408);
  CHECK(m.qformer.lora_rank == 8);
  CHECK(m.qformer.lora_alpha == 16);
  CHECK(m.mqe.experts == 8);
  CHECK(m.mqe.top == 2);
  CHECK(m.mqe.mode == RouterMode::sparse);
  CHECK(m.mqe.router_in == 768);
  CHECK(m.mqe.router_hidden == 256);
  CHECK(Config::profile("paper").integer("data.points") == 8192);
  CHECK(adamw_config(Config::profile("paper")).weight_decay == 0.05);
}

TEST_CASE("paper profile carries the published data mix") {
  const auto cfg = Config::profile("paper");
  const auto brief = stage_plan(cfg, 1).mix;
  REQUIRE(brief.size() == 1);
  CHECK(brief[0].kind == SampleKind::brief_caption);
  CHECK(brief[0].batch == 9);
  CHECK(brief[0].ratio == 1);

  const auto rich = stage_plan(cfg, 3).mix;
  REQUIRE(rich.size() == 3);
  const std::size_t batch[] = {6, 10, 4}, ratio[] = {2, 3, 3};
  const SampleKind kinds[] = {SampleKind::detailed_caption, SampleKind::single_round, SampleKind::multi_round};
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rich[i].kind == kinds[i]);
    CHECK(rich[i].batch == batch[i]);
    CHECK(rich[i].ratio == ratio[i]);
  }
  CHECK(stage_plan(cfg, 4).mix.size() == 3);
}

TEST_CASE("ablation axes are looked up by name") {
  CHECK(ablation_axis("router").variants.size() == 3);
  CHECK(ablation_axis("experts").changes_forward);
  CHECK_FALSE(ablation_axis("stages").changes_forward);
  CHECK_THROWS_AS(ablation_axis("dropout"), ConfigError);
  for (const auto& axis : ablation_axes()) {
    for (const auto& v : axis.variants) {
      auto cfg = Config::profile("desk");
      for (const auto& [key, value] : v.overrides) CHECK_NOTHROW(cfg.set(key, value));
    }
  }
}

}  // TEST_SUITE
