// mqe-align: data generation, staged training, parameter accounting,
// gradient checking, evaluation, decoding and ablation runs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mqe_align/ablation.hpp"
#include "mqe_align/budget.hpp"
#include "mqe_align/error.hpp"
#include "mqe_align/gradcheck.hpp"
#include "mqe_align/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Options {
  std::string profile = "desk";
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  std::string out = "run";
  std::string data;
  std::string ckpt;
  bool allow_mismatch = false;

  int stage = 0;
  std::string prompt = "both";
  std::string cloud;
  std::string question = "What is this?";
  std::string axis;
  bool json = false;
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

int fail(const std::string& kind, const std::string& msg, int code) {
  std::cerr << "error kind=" << kind << " msg=\"" << escape(msg) << "\"\n";
  return code;
}

/// Effective config, echoed to the run directory along with an opened log.
struct Run {
  mqe::Config cfg;
  fs::path dir;
  std::ofstream log;

  void event(const std::string& name, ordered_json fields = ordered_json::object()) {
    ordered_json j;
    j["event"] = name;
    for (auto& [k, v] : fields.items()) j[k] = v;
    log << j.dump() << "\n";
    log.flush();
  }
};

Run open_run(const Options& o, const std::string& command) {
  Run run;
  run.cfg = (o.profile == "desk" || o.profile == "paper") ? mqe::Config::profile(o.profile)
                                                          : mqe::Config::load(o.profile);
  for (const auto& s : o.sets) run.cfg.apply_override(s);
  if (o.seed) run.cfg.set("seed", std::to_string(*o.seed));
  run.dir = o.out;
  fs::create_directories(run.dir);
  std::ofstream(run.dir / "effective.profile") << run.cfg.dump();
  run.log.open(run.dir / "log.jsonl", std::ios::app);
  run.event("start", {{"command", command}, {"config_hash", run.cfg.hash_hex()}});
  return run;
}

mqe::Dataset require_data(const Options& o) {
  if (o.data.empty()) throw mqe::ConfigError("--data is required for this command");
  return mqe::load_dataset(o.data);
}

std::unique_ptr<mqe::Trainer> make_trainer(Run& run, const Options& o, mqe::Dataset data) {
  auto trainer = std::make_unique<mqe::Trainer>(run.cfg, std::move(data));
  if (!o.ckpt.empty()) {
    trainer->load(o.ckpt, o.allow_mismatch, &std::cerr);
    run.event("loaded", {{"checkpoint", o.ckpt}, {"stage", trainer->completed_stage()}});
  }
  return trainer;
}

void report_stage(Run& run, mqe::Trainer& trainer, const mqe::StageResult& r) {
  const auto [first, last] = r.trend();
  const fs::path ckpt = run.dir / ("stage" + std::to_string(r.plan.stage));
  trainer.save(ckpt);
  std::cout << "stage " << r.plan.stage << ": steps=" << r.steps << " loss " << first << " -> "
            << last << " probe " << r.probe_before << " -> " << r.probe_after
            << " violations=" << r.violations.size() << " checkpoint=" << ckpt.string() << "\n";
  run.event("stage_done", {{"stage", r.plan.stage},
                           {"steps", r.steps},
                           {"loss_first", first},
                           {"loss_last", last},
                           {"probe_before", r.probe_before},
                           {"probe_after", r.probe_after},
                           {"violations", r.violations},
                           {"checkpoint", ckpt.string()}});
  if (!r.violations.empty()) {
    throw mqe::AuditError("stage " + std::to_string(r.plan.stage) + " changed frozen tensor " +
                          r.violations.front());
  }
}

void maybe_prior(Run& run, mqe::Trainer& trainer, int stage) {
  const auto stages = mqe::enabled_stages(run.cfg);
  if (trainer.completed_stage() != 0 || stage != stages.front()) return;
  const auto losses = trainer.pretrain_lm(&run.log);
  if (!losses.empty()) {
    run.event("lm_prior", {{"steps", losses.size()}, {"loss_last", losses.back()}});
  }
}

int cmd_gen_data(const Options& o) {
  auto run = open_run(o, "gen-data");
  mqe::GenOptions g;
  g.objects = static_cast<std::size_t>(run.cfg.integer("data.objects"));
  g.points = static_cast<std::size_t>(run.cfg.integer("data.points"));
  g.seed = static_cast<std::uint64_t>(run.cfg.integer("seed"));
  const fs::path dir = o.data.empty() ? run.dir / "data" : fs::path(o.data);
  mqe::gen_synthetic(dir, g);
  const auto data = mqe::load_dataset(dir);
  std::cout << "generated " << data.objects.size() << " objects, " << data.samples.size()
            << " samples in " << dir.string() << "\n";
  run.event("gen_data", {{"dir", dir.string()}, {"objects", data.objects.size()},
                         {"samples", data.samples.size()}});
  return 0;
}

int cmd_train(const Options& o) {
  auto run = open_run(o, "train --stage " + std::to_string(o.stage));
  const auto stages = mqe::enabled_stages(run.cfg);
  if (o.ckpt.empty() && o.stage != stages.front()) {
    throw mqe::ConfigError("stage order: stage " + std::to_string(o.stage) +
                           " needs the previous stage's checkpoint (--ckpt)");
  }
  auto trainer = make_trainer(run, o, require_data(o));
  maybe_prior(run, *trainer, o.stage);
  const auto r = trainer->run_stage(o.stage, &run.log);
  report_stage(run, *trainer, r);
  return 0;
}

int cmd_train_all(const Options& o) {
  auto run = open_run(o, "train-all");
  auto trainer = make_trainer(run, o, require_data(o));
  for (int s : mqe::enabled_stages(run.cfg)) {
    if (s <= trainer->completed_stage()) continue;
    maybe_prior(run, *trainer, s);
    report_stage(run, *trainer, trainer->run_stage(s, &run.log));
  }
  return 0;
}

int cmd_count_params(const Options& o) {
  auto run = open_run(o, "count-params");
  const auto budget = mqe::param_budget(run.cfg);
  const auto json = mqe::render_budget_json(budget);
  std::ofstream(run.dir / "params.json") << json;
  std::cout << (o.json ? json : mqe::render_budget_table(budget));
  run.event("count_params", {{"trainable_union", budget.trainable_union}, {"total", budget.total}});
  return 0;
}

int cmd_gradcheck(const Options& o) {
  auto run = open_run(o, "gradcheck");
  mqe::GradcheckOptions g;
  g.seed = static_cast<std::uint64_t>(run.cfg.integer("seed"));
  const auto report = mqe::run_gradcheck(run.cfg, g);
  ordered_json rows = ordered_json::array();
  std::printf("%-20s %6s %8s %12s %14s  %s\n", "block", "tensors", "coords", "rel_error",
              "max_coord_err", "status");
  for (const auto& r : report.rows) {
    std::printf("%-20s %6zu %8zu %12.3e %14.3e  %s\n", r.block.c_str(), r.tensors, r.coords,
                r.rel_error, r.max_coord_error, r.pass ? "ok" : "FAIL");
    rows.push_back({{"block", r.block}, {"tensors", r.tensors}, {"coords", r.coords},
                    {"rel_error", r.rel_error}, {"pass", r.pass}});
  }
  std::printf("unselected experts: %zu, zero gradient: %s\n", report.unselected_experts.size(),
              report.unselected_zero ? "yes" : "no");
  std::fflush(stdout);
  run.event("gradcheck", {{"tolerance", report.tolerance}, {"rows", rows},
                          {"unselected_zero", report.unselected_zero}});
  if (!report.pass()) return fail("gradcheck", "finite-difference check failed", 1);
  return 0;
}

int cmd_eval(const Options& o) {
  auto run = open_run(o, "eval --prompt " + o.prompt);
  auto trainer = make_trainer(run, o, require_data(o));
  std::vector<mqe::PromptKind> kinds;
  if (o.prompt == "both") kinds = {mqe::PromptKind::instruction, mqe::PromptKind::completion};
  else kinds = {mqe::parse_prompt_kind(o.prompt)};
  ordered_json report;
  for (auto kind : kinds) {
    const auto r = trainer->evaluate_classification(kind);
    const std::string tag = kind == mqe::PromptKind::instruction ? "I" : "C";
    std::cout << "accuracy_" << tag << " = " << r.accuracy() << " (" << r.correct << "/" << r.total
              << ")\n";
    report["accuracy_" + tag] = r.accuracy();
    report["responses_" + tag] = r.responses;
  }
  std::ofstream(run.dir / "eval.json") << report.dump(2) << "\n";
  run.event("eval", {{"prompt", o.prompt}});
  return 0;
}

int cmd_decode(const Options& o) {
  auto run = open_run(o, "decode");
  if (o.cloud.empty()) throw mqe::ConfigError("--cloud is required for decode");
  mqe::Dataset data;
  if (!o.data.empty()) data = mqe::load_dataset(o.data);
  else data.root = ".";
  auto trainer = make_trainer(run, o, std::move(data));
  const auto response = trainer->answer(o.cloud, o.question);
  std::cout << response << "\n";
  run.event("decode", {{"cloud", o.cloud}, {"question", o.question}, {"response", response}});
  return 0;
}

int cmd_ablate(const Options& o) {
  auto run = open_run(o, "ablate --axis " + o.axis);
  std::vector<const mqe::AblationAxis*> axes;
  if (o.axis == "all") {
    for (const auto& a : mqe::ablation_axes()) axes.push_back(&a);
  } else {
    axes.push_back(&mqe::ablation_axis(o.axis));
  }
  mqe::Dataset data;
  if (!o.data.empty()) {
    data = mqe::load_dataset(o.data);
  } else {
    const fs::path dir = run.dir / "data";
    mqe::gen_synthetic(dir, {4, static_cast<std::size_t>(run.cfg.integer("data.points")),
                             static_cast<std::uint64_t>(run.cfg.integer("seed"))});
    data = mqe::load_dataset(dir);
  }
  bool ok = true;
  for (const auto* axis : axes) {
    const auto report = mqe::run_ablation(run.cfg, *axis, data);
    const bool distinct = report.logits_distinct();
    for (const auto& r : report.runs) {
      std::cout << axis->name << " " << r.label << ": stages=" << r.stages.size()
                << " last_loss=" << r.losses.back() << "\n";
    }
    std::cout << axis->name << ": logits " << (distinct ? "distinct" : "not distinct")
              << (axis->changes_forward ? " (required)" : "") << "\n";
    run.event("ablate", {{"axis", axis->name}, {"variants", report.runs.size()},
                         {"logits_distinct", distinct}});
    if (axis->changes_forward && !distinct) ok = false;
  }
  if (!ok) return fail("ablation", "variants on a forward-changing axis produced equal logits", 1);
  return 0;
}

void common(CLI::App* sub, Options& o) {
  sub->add_option("--profile", o.profile, "desk, paper, or a profile file path");
  sub->add_option("--set", o.sets, "key=value override (repeatable)");
  sub->add_option("--seed", o.seed, "Overrides the profile seed");
  sub->add_option("--out", o.out, "Run directory (effective config, log, outputs)");
}

void data_flags(CLI::App* sub, Options& o) {
  sub->add_option("--data", o.data, "Dataset directory");
  sub->add_option("--ckpt", o.ckpt, "Checkpoint directory to resume from");
  sub->add_flag("--allow-config-mismatch", o.allow_mismatch,
                "Load a checkpoint whose config hash differs (prints a warning)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mqe-align: point-cloud / language alignment with query experts"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic point-text dataset");
  common(gen, o);
  gen->add_option("--data", o.data, "Output dataset directory (default <out>/data)");

  auto* train = app.add_subcommand("train", "Run one training stage");
  common(train, o);
  data_flags(train, o);
  train->add_option("--stage", o.stage, "Stage 1-4")->required();

  auto* all = app.add_subcommand("train-all", "Run every enabled stage in order");
  common(all, o);
  data_flags(all, o);

  auto* count = app.add_subcommand("count-params", "Parameter budget per module and stage");
  common(count, o);
  count->add_flag("--json", o.json, "Print the JSON document instead of the table");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check (float64)");
  common(grad, o);

  auto* eval = app.add_subcommand("eval", "Generative classification accuracy");
  common(eval, o);
  data_flags(eval, o);
  eval->add_option("--prompt", o.prompt, "I, C or both")->check(CLI::IsMember({"I", "C", "both"}));

  auto* decode = app.add_subcommand("decode", "Greedy-decode an answer for one cloud");
  common(decode, o);
  data_flags(decode, o);
  decode->add_option("--cloud", o.cloud, "Point-cloud file (relative to --data or absolute)");
  decode->add_option("--question", o.question, "Instruction text");

  auto* ablate = app.add_subcommand("ablate", "One training step per stage for each axis variant");
  common(ablate, o);
  ablate->add_option("--data", o.data, "Dataset directory (default: 4 generated objects)");
  std::vector<std::string> axis_names{"all"};
  for (const auto& a : mqe::ablation_axes()) axis_names.push_back(a.name);
  ablate->add_option("--axis", o.axis, "Axis name or all")->required()->check(CLI::IsMember(axis_names));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*all) return cmd_train_all(o);
    if (*count) return cmd_count_params(o);
    if (*grad) return cmd_gradcheck(o);
    if (*eval) return cmd_eval(o);
    if (*decode) return cmd_decode(o);
    if (*ablate) return cmd_ablate(o);
  } catch (const mqe::ConfigError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const mqe::Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("io", e.what(), 1);
  }
  return 0;
}
