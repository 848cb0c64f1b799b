#pragma once

#include <string>

#include "mqe_align/diff/ops.hpp"
#include "mqe_align/manifest.hpp"

namespace mqe {

/// Handles to one dense layer's tensors, with an optional LoRA branch
/// y = x·W + b + (alpha/rank)·(x·A)·B.
template <typename Real>
struct LinearLayer {
  Tensor<Real> weight;
  Tensor<Real> bias;
  Tensor<Real> lora_a;
  Tensor<Real> lora_b;
  Real lora_scale = 0;

  bool has_lora() const { return lora_a.defined(); }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    auto y = ops::linear(x, weight, bias);
    if (!has_lora()) return y;
    auto delta = ops::matmul(ops::matmul(x, lora_a), lora_b);
    return ops::add(y, ops::scale(delta, lora_scale));
  }

  /// W <- W + scale·A·B, then B <- 0. The layer computes the same function
  /// (up to rounding) without the adapter contributing.
  void merge_lora() {
    if (!has_lora()) return;
    NoGradGuard guard;
    auto ab = ops::matmul(lora_a, lora_b);
    auto w = weight.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += lora_scale * ab[i];
    auto b = lora_b.data();
    std::fill(b.begin(), b.end(), Real(0));
  }
};

template <typename Real>
struct NormLayer {
  Tensor<Real> gain;
  Tensor<Real> bias;

  Tensor<Real> operator()(const Tensor<Real>& x) const { return ops::layer_norm(x, gain, bias); }
};

template <typename Real>
LinearLayer<Real> bind_linear(const ParameterStore<Real>& store, const std::string& prefix,
                              double lora_alpha = 0, std::size_t lora_rank = 1) {
  LinearLayer<Real> l;
  l.weight = store.at(prefix + ".weight");
  l.bias = store.get(prefix + ".bias");
  l.lora_a = store.get(prefix + ".lora_A");
  l.lora_b = store.get(prefix + ".lora_B");
  l.lora_scale = static_cast<Real>(lora_alpha / static_cast<double>(lora_rank));
  return l;
}

template <typename Real>
NormLayer<Real> bind_norm(const ParameterStore<Real>& store, const std::string& prefix) {
  return {store.at(prefix + ".gain"), store.at(prefix + ".bias")};
}

/// Registers a rank-`rank` adapter pair on `prefix` (weight must exist).
inline std::size_t add_lora(ParameterManifest& manifest, const std::string& prefix,
                            std::size_t rank, ModuleTag tag, ManifestDelta& delta) {
  const auto& w = manifest.at(prefix + ".weight");
  const std::size_t in = w.shape.at(0), out = w.shape.at(1);
  manifest.add({prefix + ".lora_A", {in, rank}, tag, PeftKind::lora_A, false});
  manifest.add({prefix + ".lora_B", {rank, out}, tag, PeftKind::lora_B, false});
  delta.added.push_back(prefix + ".lora_A");
  delta.added.push_back(prefix + ".lora_B");
  const std::size_t n = in * rank + rank * out;
  delta.added_params += n;
  return n;
}

inline void retag_norm(ParameterManifest& manifest, const std::string& prefix, ModuleTag tag,
                       ManifestDelta& delta) {
  for (const char* suffix : {".gain", ".bias"}) {
    const std::string path = prefix + suffix;
    manifest.retag(path, tag);
    delta.retagged.push_back(path);
    delta.retagged_params += manifest.at(path).numel();
  }
}

}  // namespace mqe
