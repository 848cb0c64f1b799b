#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mqe_align/lm.hpp"
#include "mqe_align/mqe.hpp"
#include "mqe_align/point_encoder.hpp"
#include "mqe_align/projectors.hpp"
#include "mqe_align/qformer.hpp"

namespace mqe {

/// Every manifest entry for a configuration, with the Q-Former and LM PEFT
/// deltas already applied. All flags start frozen.
ParameterManifest build_manifest(const ModelConfig& cfg);

/// Intermediate values of one point-cloud pass through the bridge.
template <typename Real>
struct BridgeOutput {
  ProjectedFeatures<Real> projected;
  RoutingDecision<Real> decision;  // undefined weights on the single-query path
  Tensor<Real> queries;            // o × qformer.hidden
  Tensor<Real> point_tokens;       // o × lm.hidden
};

/// The full encoder -> projection -> Q-Former/MQE -> projector -> LM stack
/// over one parameter store.
template <typename Real>
class AlignmentModel {
 public:
  explicit AlignmentModel(const ModelConfig& cfg);
  AlignmentModel(const AlignmentModel&) = delete;
  AlignmentModel& operator=(const AlignmentModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterManifest& manifest() { return manifest_; }
  const ParameterManifest& manifest() const { return manifest_; }
  ParameterStore<Real>& store() { return store_; }
  const ParameterStore<Real>& store() const { return store_; }

  /// Frozen encoder output X (no graph is recorded).
  Tensor<Real> encode(const PointCloud& cloud) const;

  /// use_mqe selects the expert mixture; otherwise the base query set.
  BridgeOutput<Real> bridge(const Tensor<Real>& x, bool use_mqe) const;
  Tensor<Real> point_tokens(const Tensor<Real>& x, bool use_mqe) const {
    return bridge(x, use_mqe).point_tokens;
  }

  Tensor<Real> logits(const Tensor<Real>& x, const TokenSequence& seq, bool use_mqe) const;
  /// Masked mean next-token loss over the generated text of `seq`.
  Tensor<Real> sequence_loss(const Tensor<Real>& x, const TokenSequence& seq, bool use_mqe) const;
  std::string answer(const Tensor<Real>& x, std::string_view question, bool use_mqe,
                     std::size_t max_new) const;

  const PointEncoder<Real>& encoder() const { return encoder_; }
  const PcProjection<Real>& projection() const { return projection_; }
  PcProjection<Real>& projection() { return projection_; }
  const QFormer<Real>& qformer() const { return qformer_; }
  const MixtureOfQueryExperts<Real>& experts() const { return mqe_; }
  MixtureOfQueryExperts<Real>& experts() { return mqe_; }
  const ModalityProjector<Real>& projector() const { return projector_; }
  ModalityProjector<Real>& projector() { return projector_; }
  const LanguageModel<Real>& lm() const { return lm_; }

 private:
  ModelConfig cfg_;
  ParameterManifest manifest_;
  ParameterStore<Real> store_;
  PointEncoder<Real> encoder_;
  PcProjection<Real> projection_;
  QFormer<Real> qformer_;
  MixtureOfQueryExperts<Real> mqe_;
  ModalityProjector<Real> projector_;
  LanguageModel<Real> lm_;
};

extern template class AlignmentModel<float>;
extern template class AlignmentModel<double>;

}  // namespace mqe
