#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mqe_align/config.hpp"
#include "mqe_align/dataset.hpp"

namespace mqe {

struct AblationVariant {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// One configuration axis. `changes_forward` marks axes whose variants run a
/// different computation, so their output logits must all differ.
struct AblationAxis {
  std::string name;
  std::vector<AblationVariant> variants;
  bool changes_forward = false;
};

const std::vector<AblationAxis>& ablation_axes();
/// Throws ConfigError for an unknown axis name.
const AblationAxis& ablation_axis(std::string_view name);

struct AblationRun {
  std::string label;
  std::vector<int> stages;
  std::vector<double> losses;   // one step per enabled stage
  std::vector<float> logits;    // probe prompt after the last stage
};

struct AblationReport {
  std::string axis;
  bool changes_forward = false;
  std::vector<AblationRun> runs;

  /// True when every pair of runs produced different logits.
  bool logits_distinct() const;
};

/// Builds each variant from `base` plus its overrides, trains one step per
/// enabled stage and records the logits of a fixed prompt on the first object.
AblationReport run_ablation(const Config& base, const AblationAxis& axis, const Dataset& data,
                            std::ostream* log = nullptr);

}  // namespace mqe
