#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mqe_align/diff/tensor.hpp"

namespace mqe {

/// Linear warmup from `warmup_lr` to `init_lr`, then cosine decay to `min_lr`
/// over the remaining (post-warmup) steps.
struct LrSchedule {
  double warmup_lr = 0;
  double init_lr = 0;
  double min_lr = 0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  void validate() const;
};

double lr_at(const LrSchedule& schedule, std::int64_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename Real>
struct NamedParam {
  std::string path;
  Tensor<Real> tensor;
};

/// Decoupled-weight-decay Adam. Moments are keyed by parameter path and exist
/// for exactly the parameters handed to reset().
template <typename Real>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Drops all state and allocates zero moments for `params`.
  void reset(const std::vector<NamedParam<Real>>& params);
  /// One update of every tracked parameter. Parameters outside the tracked
  /// set are never touched.
  void step(const std::vector<NamedParam<Real>>& params, double lr);

  std::int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  std::size_t tracked() const { return moments_.size(); }
  bool tracks(const std::string& path) const { return moments_.count(path) != 0; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig cfg_;
  std::map<std::string, Moments> moments_;
  std::int64_t step_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace mqe
