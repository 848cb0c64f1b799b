#include "mqe_align/model_config.hpp"

#include "mqe_align/error.hpp"

namespace mqe {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::size_t positive(const Config& cfg, const std::string& key) {
  const auto v = cfg.integer(key);
  if (v < 1) throw ConfigError("key '" + key + "' must be >= 1, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

}  // namespace

void EncoderConfig::validate() const {
  require(hidden % heads == 0, "encoder: hidden " + std::to_string(hidden) +
                                   " not divisible by heads " + std::to_string(heads));
  require(num_patches >= 1 && group_size >= 1, "encoder: patches and group size must be >= 1");
}

void ProjectionConfig::validate() const {
  require(depth >= 1 && depth <= 3,
          "projection: unsupported depth " + std::to_string(depth) + " (expected 1, 2 or 3)");
}

std::set<QFormerPeft> parse_qformer_peft(const std::vector<std::string>& names) {
  std::set<QFormerPeft> out;
  for (const auto& n : names) {
    if (n == "lora_qkv") out.insert(QFormerPeft::lora_qkv);
    else if (n == "lora_dense") out.insert(QFormerPeft::lora_dense);
    else if (n == "norms") out.insert(QFormerPeft::norms);
    else if (n == "none") continue;
    else throw ConfigError("qformer.peft: unknown selector '" + n + "'");
  }
  return out;
}

void QFormerConfig::validate() const {
  require(hidden % heads == 0, "qformer: hidden " + std::to_string(hidden) +
                                   " not divisible by heads " + std::to_string(heads));
  require(cross_every >= 1, "qformer: cross_every must be >= 1");
  require(queries >= 1, "qformer: need at least one query");
}

RouterMode parse_router_mode(const std::string& name) {
  if (name == "constant") return RouterMode::constant;
  if (name == "soft") return RouterMode::soft;
  if (name == "sparse") return RouterMode::sparse;
  throw ConfigError("mqe.router: unknown mode '" + name + "' (constant, soft, sparse)");
}

std::string_view to_string(RouterMode mode) {
  switch (mode) {
    case RouterMode::constant: return "constant";
    case RouterMode::soft: return "soft";
    case RouterMode::sparse: return "sparse";
  }
  return "?";
}

void MqeConfig::validate() const {
  require(experts >= 1, "mqe: expert bank is empty");
  require(top >= 1, "mqe: top-g must be >= 1");
  require(top <= experts, "mqe: top " + std::to_string(top) + " exceeds " +
                              std::to_string(experts) + " experts");
}

void LmConfig::validate() const {
  require(hidden % heads == 0, "lm: hidden " + std::to_string(hidden) +
                                   " not divisible by heads " + std::to_string(heads));
  require(vocab >= 1 && max_seq >= 1, "lm: vocab and max_seq must be >= 1");
}

ModelConfig ModelConfig::from_config(const Config& cfg) {
  ModelConfig m;
  m.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  m.init_std = cfg.real("init.std");
  m.lora_std = cfg.real("init.lora_std");

  auto& e = m.encoder;
  e.num_patches = positive(cfg, "encoder.patches");
  e.group_size = positive(cfg, "encoder.group_size");
  e.hidden = positive(cfg, "encoder.hidden");
  e.heads = positive(cfg, "encoder.heads");
  e.layers = positive(cfg, "encoder.layers");
  e.ffn = positive(cfg, "encoder.ffn");
  e.pointnet_hidden = positive(cfg, "encoder.pointnet_hidden");
  e.pos_hidden = positive(cfg, "encoder.pos_hidden");
  e.seed = m.seed;

  auto& q = m.qformer;
  q.layers = positive(cfg, "qformer.layers");
  q.heads = positive(cfg, "qformer.heads");
  q.hidden = positive(cfg, "qformer.hidden");
  q.encoder_width = positive(cfg, "qformer.encoder_width");
  q.ffn = positive(cfg, "qformer.ffn");
  q.queries = positive(cfg, "qformer.queries");
  q.cross_every = positive(cfg, "qformer.cross_every");
  q.lora_rank = positive(cfg, "qformer.lora_rank");
  q.lora_alpha = cfg.real("qformer.lora_alpha");
  q.peft = parse_qformer_peft(cfg.list("qformer.peft"));

  auto& p = m.projection;
  p.in = e.hidden;
  p.hidden = positive(cfg, "projection.hidden");
  p.out = q.encoder_width;
  const auto depth = cfg.integer("projection.depth");
  if (depth < 1 || depth > 3) {
    throw ConfigError("projection: unsupported depth " + std::to_string(depth) +
                      " (expected 1, 2 or 3)");
  }
  p.depth = static_cast<std::size_t>(depth);

  auto& x = m.mqe;
  x.experts = positive(cfg, "mqe.experts");
  x.top = positive(cfg, "mqe.top");
  x.mode = parse_router_mode(cfg.str("mqe.router"));
  // The router reads the projection's first activation, which is the raw
  // encoder output when the projection has a single layer.
  x.router_in = p.depth == 1 ? p.in : p.hidden;
  x.router_hidden = positive(cfg, "mqe.router_hidden");
  x.expert_noise = cfg.real("mqe.expert_noise");

  auto& l = m.lm;
  l.layers = positive(cfg, "lm.layers");
  l.heads = positive(cfg, "lm.heads");
  l.hidden = positive(cfg, "lm.hidden");
  l.ffn = positive(cfg, "lm.ffn");
  l.vocab = positive(cfg, "lm.vocab");
  l.max_seq = positive(cfg, "lm.max_seq");
  l.lora_rank = positive(cfg, "lm.lora_rank");
  l.lora_alpha = cfg.real("lm.lora_alpha");

  m.projector.in = q.hidden;
  m.projector.hidden = positive(cfg, "projector.hidden");
  m.projector.out = l.hidden;

  m.validate();
  return m;
}

void ModelConfig::validate() const {
  encoder.validate();
  projection.validate();
  qformer.validate();
  mqe.validate();
  lm.validate();
  if (projection.out != qformer.encoder_width) {
    throw ConfigError("projection output width must equal qformer.encoder_width");
  }
  if (projector.in != qformer.hidden || projector.out != lm.hidden) {
    throw ConfigError("modality projector must map qformer.hidden to lm.hidden");
  }
}

}  // namespace mqe
