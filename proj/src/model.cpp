#include "mqe_align/model.hpp"

#include "mqe_align/rng.hpp"

namespace mqe {

ParameterManifest build_manifest(const ModelConfig& cfg) {
  ParameterManifest m;
  PointEncoder<float>::describe(m, cfg.encoder);
  PcProjection<float>::describe(m, cfg.projection);
  QFormer<float>::describe(m, cfg.qformer);
  apply_qformer_peft(m, cfg.qformer, cfg.qformer.peft);
  MixtureOfQueryExperts<float>::describe(m, cfg.mqe, cfg.qformer);
  ModalityProjector<float>::describe(m, cfg.projector);
  LanguageModel<float>::describe(m, cfg.lm);
  apply_lm_peft(m, cfg.lm);
  return m;
}

namespace {

// Experts start as copies of the base query set. With more than one expert a
// small per-expert perturbation separates them.
template <typename Real>
void init_experts(ParameterStore<Real>& store, const ModelConfig& cfg) {
  const auto base = store.at("qformer.queries").data();
  for (std::size_t q = 0; q < cfg.mqe.experts; ++q) {
    const auto path = MixtureOfQueryExperts<Real>::expert_path(q);
    auto e = store.at(path).data();
    Rng rng(derive_seed(cfg.seed, path + "#noise"));
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double noise = cfg.mqe.experts > 1 ? cfg.mqe.expert_noise * rng.normal() : 0.0;
      e[i] = static_cast<Real>(static_cast<double>(base[i]) + noise);
    }
  }
}

}  // namespace

template <typename Real>
AlignmentModel<Real>::AlignmentModel(const ModelConfig& cfg)
    : cfg_(cfg), manifest_(build_manifest(cfg)), store_(manifest_) {
  cfg_.validate();
  store_.initialize(cfg.seed, cfg.init_std, cfg.lora_std);
  init_experts(store_, cfg_);
  encoder_ = PointEncoder<Real>(cfg.encoder, store_);
  projection_ = PcProjection<Real>(cfg.projection, store_);
  qformer_ = QFormer<Real>(cfg.qformer, store_);
  mqe_ = MixtureOfQueryExperts<Real>(cfg.mqe, store_);
  projector_ = ModalityProjector<Real>(cfg.projector, store_);
  lm_ = LanguageModel<Real>(cfg.lm, store_);
}

template <typename Real>
Tensor<Real> AlignmentModel<Real>::encode(const PointCloud& cloud) const {
  NoGradGuard guard;
  return encoder_.encode(cloud);
}

template <typename Real>
BridgeOutput<Real> AlignmentModel<Real>::bridge(const Tensor<Real>& x, bool use_mqe) const {
  BridgeOutput<Real> out;
  out.projected = projection_(x);
  if (use_mqe) {
    out.decision = mqe_.route(out.projected.hidden);
    out.queries = mqe_.combine(out.projected.y, out.decision, qformer_);
  } else {
    out.queries = qformer_(out.projected.y, store_.at("qformer.queries"));
  }
  out.point_tokens = projector_(out.queries);
  return out;
}

template <typename Real>
Tensor<Real> AlignmentModel<Real>::logits(const Tensor<Real>& x, const TokenSequence& seq,
                                          bool use_mqe) const {
  return lm_.logits(seq, point_tokens(x, use_mqe));
}

template <typename Real>
Tensor<Real> AlignmentModel<Real>::sequence_loss(const Tensor<Real>& x, const TokenSequence& seq,
                                                 bool use_mqe) const {
  const auto shifted = shift_targets(seq);
  return ops::cross_entropy_masked(logits(x, seq, use_mqe), shifted.targets, shifted.mask);
}

template <typename Real>
std::string AlignmentModel<Real>::answer(const Tensor<Real>& x, std::string_view question,
                                         bool use_mqe, std::size_t max_new) const {
  NoGradGuard guard;
  const auto prompt = build_prompt(cfg_.qformer.queries, question);
  return ByteTokenizer::decode(lm_.greedy_decode(prompt, point_tokens(x, use_mqe), max_new));
}

template class AlignmentModel<float>;
template class AlignmentModel<double>;

}  // namespace mqe
