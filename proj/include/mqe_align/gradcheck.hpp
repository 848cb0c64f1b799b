#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mqe_align/config.hpp"

namespace mqe {

struct GradcheckRow {
  std::string block;
  std::size_t tensors = 0;
  std::size_t coords = 0;
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the coordinates.
  double rel_error = 0;
  /// Largest per-coordinate |a - n| / max(|a|, |n|), ignoring pairs below 1e-10.
  double max_coord_error = 0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double tolerance = 1e-6;
  /// Experts left out by sparse routing; their analytic gradient must be zero.
  std::vector<std::string> unselected_experts;
  bool unselected_zero = true;

  bool pass() const;
};

struct GradcheckOptions {
  std::uint64_t seed = 7;
  double step = 1e-5;
  double tolerance = 1e-6;
  std::size_t coords_per_tensor = 6;
};

/// Central finite differences against reverse-mode gradients of the masked
/// sequence loss, in 64-bit, on one synthetic sample routed through the
/// sparse expert mixture. LoRA B factors are randomised first so that every
/// adapter factor has a non-trivial gradient.
GradcheckReport run_gradcheck(const Config& cfg, const GradcheckOptions& opts);

}  // namespace mqe
