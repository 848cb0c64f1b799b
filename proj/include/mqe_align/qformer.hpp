#pragma once

#include <cstddef>
#include <set>
#include <vector>

#include "mqe_align/layers.hpp"
#include "mqe_align/model_config.hpp"

namespace mqe {

/// Query transformer. Each block runs self-attention over the query tokens,
/// cross-attention into the projected point features on every
/// `cross_every`-th block (starting at block 0), then an FFN. Post-norm
/// residuals throughout.
template <typename Real>
class QFormer {
 public:
  /// Registers the frozen base weights plus the shared base query set.
  static void describe(ParameterManifest& manifest, const QFormerConfig& cfg);

  QFormer() = default;
  QFormer(const QFormerConfig& cfg, const ParameterStore<Real>& store);

  /// y: m × encoder_width, queries: o × hidden -> o × hidden.
  Tensor<Real> operator()(const Tensor<Real>& y, const Tensor<Real>& queries) const;

  /// Forward passes executed since construction or the last reset.
  std::size_t invocations() const { return invocations_; }
  void reset_invocations() { invocations_ = 0; }

  const QFormerConfig& config() const { return cfg_; }

 private:
  struct Block {
    LinearLayer<Real> sq, sk, sv, so;
    NormLayer<Real> self_ln;
    bool cross = false;
    LinearLayer<Real> cq, ck, cv, co;
    NormLayer<Real> cross_ln;
    LinearLayer<Real> fc1, fc2;
    NormLayer<Real> ffn_ln;
  };
  QFormerConfig cfg_;
  NormLayer<Real> embed_ln_;
  std::vector<Block> blocks_;
  mutable std::size_t invocations_ = 0;
};

/// Adds LoRA pairs (lora_qkv: self and cross Q/K/V; lora_dense: FFN fc1/fc2)
/// and retags every Q-Former norm to qformer_peft when `norms` is selected.
ManifestDelta apply_qformer_peft(ParameterManifest& manifest, const QFormerConfig& cfg,
                                 const std::set<QFormerPeft>& which);

extern template class QFormer<float>;
extern template class QFormer<double>;

}  // namespace mqe
