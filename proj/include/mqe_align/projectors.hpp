#pragma once

#include <vector>

#include "mqe_align/layers.hpp"
#include "mqe_align/model_config.hpp"

namespace mqe {

/// Y (Q-Former cross-attention width) plus the first-layer activation H that
/// feeds the expert router.
template <typename Real>
struct ProjectedFeatures {
  Tensor<Real> y;
  Tensor<Real> hidden;
};

/// Point-cloud projection MLP. Depth 1 maps in -> out directly; depth 2 is
/// in -> hidden -> out; depth 3 inserts hidden -> hidden.
template <typename Real>
class PcProjection {
 public:
  static void describe(ParameterManifest& manifest, const ProjectionConfig& cfg);

  PcProjection() = default;
  PcProjection(const ProjectionConfig& cfg, const ParameterStore<Real>& store);

  /// With depth 1 there is no intermediate layer; `hidden` is then the input.
  ProjectedFeatures<Real> operator()(const Tensor<Real>& x) const;

  void set_activation(ops::Activation act) { cfg_.activation = act; }
  const ProjectionConfig& config() const { return cfg_; }

 private:
  ProjectionConfig cfg_;
  std::vector<LinearLayer<Real>> layers_;
};

template <typename Real>
class ModalityProjector {
 public:
  static void describe(ParameterManifest& manifest, const ProjectorConfig& cfg);

  ModalityProjector() = default;
  ModalityProjector(const ProjectorConfig& cfg, const ParameterStore<Real>& store);

  /// o × qformer.hidden -> o × lm.hidden point tokens.
  Tensor<Real> operator()(const Tensor<Real>& q_bar) const;

  void set_activation(ops::Activation act) { cfg_.activation = act; }
  const ProjectorConfig& config() const { return cfg_; }

 private:
  ProjectorConfig cfg_;
  LinearLayer<Real> fc1_, fc2_;
};

extern template class PcProjection<float>;
extern template class PcProjection<double>;
extern template class ModalityProjector<float>;
extern template class ModalityProjector<double>;

}  // namespace mqe
