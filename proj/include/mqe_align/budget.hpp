#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mqe_align/config.hpp"

namespace mqe {

struct BudgetRow {
  std::string name;
  std::size_t exact = 0;
  bool trainable = false;  // trained in at least one enabled stage
};

/// Parameter accounting for a configuration: one row per module tag in fixed
/// order, the trainable total of every enabled stage, and the union of all
/// stage trainable sets.
struct ParamBudget {
  std::vector<BudgetRow> modules;
  std::vector<BudgetRow> stages;
  std::size_t trainable_union = 0;
  std::size_t total = 0;

  const BudgetRow& module(std::string_view name) const;
  const BudgetRow& stage(int stage) const;
};

ParamBudget param_budget(const Config& cfg);

/// Plain-text table: module, exact, rounded, trainable flag.
std::string render_budget_table(const ParamBudget& budget);
std::string render_budget_json(const ParamBudget& budget);

}  // namespace mqe
