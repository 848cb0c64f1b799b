#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mqe_align/qformer.hpp"

namespace mqe {

/// Router output for one point cloud. `weights` is a 1 × k simplex row (on the
/// graph in soft/sparse mode); `selected` lists the experts whose Q-Former
/// passes are run, in descending weight order.
template <typename Real>
struct RoutingDecision {
  Tensor<Real> weights;
  std::vector<std::size_t> selected;
  RouterMode mode = RouterMode::sparse;

  std::vector<Real> weight_values() const;
};

/// Top-`g` indices by weight, ties to the lowest index, descending weight.
std::vector<std::size_t> top_indices(std::span<const double> weights, std::size_t g);

/// Builds a decision around fixed weights (used for injection in tests).
template <typename Real>
RoutingDecision<Real> decision_from_weights(std::vector<Real> weights, RouterMode mode,
                                            std::size_t g);

/// Expert bank of k query sets plus a two-layer router MLP with softmax.
template <typename Real>
class MixtureOfQueryExperts {
 public:
  static void describe(ParameterManifest& manifest, const MqeConfig& mqe, const QFormerConfig& qf);
  static std::string expert_path(std::size_t q) { return "mqe.experts." + std::to_string(q); }

  MixtureOfQueryExperts() = default;
  MixtureOfQueryExperts(const MqeConfig& cfg, const ParameterStore<Real>& store);

  /// hidden: m × router_in. Mean-pools rows, runs the router and picks experts.
  RoutingDecision<Real> route(const Tensor<Real>& hidden) const;

  /// Sum over selected experts of w_q · qformer(y, E_q). Weights are used as
  /// given (no renormalisation after selection).
  Tensor<Real> combine(const Tensor<Real>& y, const RoutingDecision<Real>& decision,
                       const QFormer<Real>& qformer) const;

  Tensor<Real> operator()(const Tensor<Real>& y, const Tensor<Real>& hidden,
                          const QFormer<Real>& qformer) const {
    return combine(y, route(hidden), qformer);
  }

  std::size_t experts() const { return experts_.size(); }
  const Tensor<Real>& expert(std::size_t q) const { return experts_.at(q); }
  const MqeConfig& config() const { return cfg_; }
  void set_mode(RouterMode mode) { cfg_.mode = mode; }

 private:
  MqeConfig cfg_;
  std::vector<Tensor<Real>> experts_;
  LinearLayer<Real> fc1_, fc2_;
};

extern template class MixtureOfQueryExperts<float>;
extern template class MixtureOfQueryExperts<double>;

}  // namespace mqe
