#include "mqe_align/budget.hpp"

#include <cstdio>

#include "json.hpp"
#include "mqe_align/error.hpp"
#include "mqe_align/model.hpp"
#include "mqe_align/stages.hpp"

namespace mqe {

const BudgetRow& ParamBudget::module(std::string_view name) const {
  for (const auto& r : modules) {
    if (r.name == name) return r;
  }
  throw ContractError("budget: no module row '" + std::string(name) + "'");
}

const BudgetRow& ParamBudget::stage(int stage) const {
  const std::string name = "stage" + std::to_string(stage);
  for (const auto& r : stages) {
    if (r.name == name) return r;
  }
  throw ContractError("budget: stage " + std::to_string(stage) + " is not enabled");
}

ParamBudget param_budget(const Config& cfg) {
  const auto manifest = build_manifest(ModelConfig::from_config(cfg));
  std::set<ModuleTag> trained;
  ParamBudget b;
  for (int s : enabled_stages(cfg)) {
    const auto plan = stage_plan(cfg, s);
    trained.insert(plan.trainable.begin(), plan.trainable.end());
    b.stages.push_back({"stage" + std::to_string(s), count_tagged(manifest, plan.trainable), true});
  }
  for (const auto& row : count_params(manifest, {}).rows) {
    b.modules.push_back({std::string(to_string(row.module)), row.trainable + row.frozen,
                         trained.count(row.module) != 0});
  }
  b.trainable_union = count_tagged(manifest, trained);
  b.total = manifest.total();
  return b;
}

std::string render_budget_table(const ParamBudget& b) {
  std::string out;
  char line[160];
  auto row = [&](const std::string& name, std::size_t exact, const char* flag) {
    std::snprintf(line, sizeof line, "%-20s %16s %9s  %s\n", name.c_str(),
                  group_thousands(exact).c_str(), round_millions(exact).c_str(), flag);
    out += line;
  };
  std::snprintf(line, sizeof line, "%-20s %16s %9s  %s\n", "module", "exact", "rounded", "trainable");
  out += line;
  for (const auto& r : b.modules) row(r.name, r.exact, r.trainable ? "yes" : "no");
  for (const auto& r : b.stages) row(r.name, r.exact, "yes");
  row("trainable_union", b.trainable_union, "yes");
  row("total", b.total, "-");
  return out;
}

std::string render_budget_json(const ParamBudget& b) {
  auto rows = [](const std::vector<BudgetRow>& in) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : in) {
      arr.push_back({{"name", r.name}, {"exact", r.exact}, {"rounded", round_millions(r.exact)},
                     {"trainable", r.trainable}});
    }
    return arr;
  };
  nlohmann::ordered_json j;
  j["modules"] = rows(b.modules);
  j["stages"] = rows(b.stages);
  j["trainable_union"] = {{"exact", b.trainable_union}, {"rounded", round_millions(b.trainable_union)}};
  j["total"] = {{"exact", b.total}, {"rounded", round_millions(b.total)}};
  return j.dump(2) + "\n";
}

}  // namespace mqe
