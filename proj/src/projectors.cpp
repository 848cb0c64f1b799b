#include "mqe_align/projectors.hpp"

#include "mqe_align/error.hpp"

namespace mqe {

namespace {

std::vector<std::pair<std::size_t, std::size_t>> projection_dims(const ProjectionConfig& cfg) {
  switch (cfg.depth) {
    case 1: return {{cfg.in, cfg.out}};
    case 2: return {{cfg.in, cfg.hidden}, {cfg.hidden, cfg.out}};
    case 3: return {{cfg.in, cfg.hidden}, {cfg.hidden, cfg.hidden}, {cfg.hidden, cfg.out}};
    default:
      throw ConfigError("projection: unsupported depth " + std::to_string(cfg.depth) +
                        " (expected 1, 2 or 3)");
  }
}

}  // namespace

template <typename Real>
void PcProjection<Real>::describe(ParameterManifest& manifest, const ProjectionConfig& cfg) {
  const auto dims = projection_dims(cfg);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    manifest.add_linear("projection.layers." + std::to_string(i), dims[i].first, dims[i].second,
                        ModuleTag::pc_projection);
  }
}

template <typename Real>
PcProjection<Real>::PcProjection(const ProjectionConfig& cfg, const ParameterStore<Real>& store)
    : cfg_(cfg) {
  const auto dims = projection_dims(cfg);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    layers_.push_back(bind_linear(store, "projection.layers." + std::to_string(i)));
  }
}

template <typename Real>
ProjectedFeatures<Real> PcProjection<Real>::operator()(const Tensor<Real>& x) const {
  if (x.cols() != cfg_.in) {
    throw DimensionError("pc_project: input width " + std::to_string(x.cols()) +
                         " but encoder hidden is " + std::to_string(cfg_.in));
  }
  ProjectedFeatures<Real> out;
  Tensor<Real> h = x;
  out.hidden = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) {
      h = ops::activate(h, cfg_.activation);
      if (i == 0) out.hidden = h;
    }
  }
  out.y = h;
  return out;
}

template <typename Real>
void ModalityProjector<Real>::describe(ParameterManifest& manifest, const ProjectorConfig& cfg) {
  manifest.add_linear("projector.fc1", cfg.in, cfg.hidden, ModuleTag::modality_projector);
  manifest.add_linear("projector.fc2", cfg.hidden, cfg.out, ModuleTag::modality_projector);
}

template <typename Real>
ModalityProjector<Real>::ModalityProjector(const ProjectorConfig& cfg,
                                           const ParameterStore<Real>& store)
    : cfg_(cfg), fc1_(bind_linear(store, "projector.fc1")), fc2_(bind_linear(store, "projector.fc2")) {}

template <typename Real>
Tensor<Real> ModalityProjector<Real>::operator()(const Tensor<Real>& q_bar) const {
  if (q_bar.cols() != cfg_.in) {
    throw DimensionError("modality_project: input width " + std::to_string(q_bar.cols()) +
                         " but expected " + std::to_string(cfg_.in));
  }
  return fc2_(ops::activate(fc1_(q_bar), cfg_.activation));
}

template class PcProjection<float>;
template class PcProjection<double>;
template class ModalityProjector<float>;
template class ModalityProjector<double>;

}  // namespace mqe
