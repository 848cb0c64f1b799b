#include "mqe_align/qformer.hpp"

#include "mqe_align/error.hpp"

namespace mqe {

namespace {

std::string layer_prefix(std::size_t l) { return "qformer.layers." + std::to_string(l); }

std::vector<std::string> norm_prefixes(const QFormerConfig& cfg) {
  std::vector<std::string> out{"qformer.embed_ln"};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    out.push_back(p + ".self_ln");
    if (cfg.has_cross(l)) out.push_back(p + ".cross_ln");
    out.push_back(p + ".ffn_ln");
  }
  return out;
}

}  // namespace

template <typename Real>
void QFormer<Real>::describe(ParameterManifest& m, const QFormerConfig& cfg) {
  cfg.validate();
  const auto tag = ModuleTag::qformer;
  m.add({"qformer.queries", {cfg.queries, cfg.hidden}, tag, PeftKind::base, false});
  m.add_norm("qformer.embed_ln", cfg.hidden, tag);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    for (const char* name : {".self.q", ".self.k", ".self.v", ".self.o"}) {
      m.add_linear(p + name, cfg.hidden, cfg.hidden, tag);
    }
    m.add_norm(p + ".self_ln", cfg.hidden, tag);
    if (cfg.has_cross(l)) {
      m.add_linear(p + ".cross.q", cfg.hidden, cfg.hidden, tag);
      m.add_linear(p + ".cross.k", cfg.encoder_width, cfg.hidden, tag);
      m.add_linear(p + ".cross.v", cfg.encoder_width, cfg.hidden, tag);
      m.add_linear(p + ".cross.o", cfg.hidden, cfg.hidden, tag);
      m.add_norm(p + ".cross_ln", cfg.hidden, tag);
    }
    m.add_linear(p + ".ffn.fc1", cfg.hidden, cfg.ffn, tag);
    m.add_linear(p + ".ffn.fc2", cfg.ffn, cfg.hidden, tag);
    m.add_norm(p + ".ffn_ln", cfg.hidden, tag);
  }
}

template <typename Real>
QFormer<Real>::QFormer(const QFormerConfig& cfg, const ParameterStore<Real>& store) : cfg_(cfg) {
  cfg_.validate();
  const double a = cfg.lora_alpha;
  const std::size_t r = cfg.lora_rank;
  embed_ln_ = bind_norm(store, "qformer.embed_ln");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    Block b;
    b.sq = bind_linear(store, p + ".self.q", a, r);
    b.sk = bind_linear(store, p + ".self.k", a, r);
    b.sv = bind_linear(store, p + ".self.v", a, r);
    b.so = bind_linear(store, p + ".self.o", a, r);
    b.self_ln = bind_norm(store, p + ".self_ln");
    b.cross = cfg.has_cross(l);
    if (b.cross) {
      b.cq = bind_linear(store, p + ".cross.q", a, r);
      b.ck = bind_linear(store, p + ".cross.k", a, r);
      b.cv = bind_linear(store, p + ".cross.v", a, r);
      b.co = bind_linear(store, p + ".cross.o", a, r);
      b.cross_ln = bind_norm(store, p + ".cross_ln");
    }
    b.fc1 = bind_linear(store, p + ".ffn.fc1", a, r);
    b.fc2 = bind_linear(store, p + ".ffn.fc2", a, r);
    b.ffn_ln = bind_norm(store, p + ".ffn_ln");
    blocks_.push_back(std::move(b));
  }
}

template <typename Real>
Tensor<Real> QFormer<Real>::operator()(const Tensor<Real>& y, const Tensor<Real>& queries) const {
  if (y.rank() != 2 || y.cols() != cfg_.encoder_width) {
    throw DimensionError("qformer_forward: y is " + shape_str(y.shape()) +
                         ", expected width " + std::to_string(cfg_.encoder_width));
  }
  if (queries.rank() != 2 || queries.rows() != cfg_.queries || queries.cols() != cfg_.hidden) {
    throw DimensionError("qformer_forward: queries are " + shape_str(queries.shape()) + ", expected [" +
                         std::to_string(cfg_.queries) + ", " + std::to_string(cfg_.hidden) + "]");
  }
  ++invocations_;
  const std::size_t h = cfg_.heads;
  auto x = embed_ln_(queries);
  for (const auto& b : blocks_) {
    x = b.self_ln(ops::add(x, b.so(ops::attention(b.sq(x), b.sk(x), b.sv(x), h, false))));
    if (b.cross) {
      x = b.cross_ln(ops::add(x, b.co(ops::attention(b.cq(x), b.ck(y), b.cv(y), h, false))));
    }
    x = b.ffn_ln(ops::add(x, b.fc2(ops::gelu(b.fc1(x)))));
  }
  return x;
}

ManifestDelta apply_qformer_peft(ParameterManifest& manifest, const QFormerConfig& cfg,
                                 const std::set<QFormerPeft>& which) {
  ManifestDelta delta;
  const auto tag = ModuleTag::qformer_peft;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    if (which.count(QFormerPeft::lora_qkv)) {
      for (const char* name : {".self.q", ".self.k", ".self.v"}) {
        add_lora(manifest, p + name, cfg.lora_rank, tag, delta);
      }
      if (cfg.has_cross(l)) {
        for (const char* name : {".cross.q", ".cross.k", ".cross.v"}) {
          add_lora(manifest, p + name, cfg.lora_rank, tag, delta);
        }
      }
    }
    if (which.count(QFormerPeft::lora_dense)) {
      add_lora(manifest, p + ".ffn.fc1", cfg.lora_rank, tag, delta);
      add_lora(manifest, p + ".ffn.fc2", cfg.lora_rank, tag, delta);
    }
  }
  if (which.count(QFormerPeft::norms)) {
    for (const auto& prefix : norm_prefixes(cfg)) retag_norm(manifest, prefix, tag, delta);
  }
  return delta;
}

template class QFormer<float>;
template class QFormer<double>;

}  // namespace mqe
