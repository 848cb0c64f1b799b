#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "mqe_align/config.hpp"
#include "mqe_align/diff/ops.hpp"

namespace mqe {

inline constexpr std::size_t kPointDims = 6;  // x, y, z, r, g, b

struct EncoderConfig {
  std::size_t num_patches = 512;
  std::size_t group_size = 32;
  std::size_t hidden = 384;
  std::size_t heads = 6;
  std::size_t layers = 12;
  std::size_t ffn = 1536;
  std::size_t pointnet_hidden = 256;
  std::size_t pos_hidden = 128;
  std::uint64_t seed = 7;

  void validate() const;
};

struct ProjectionConfig {
  std::size_t in = 384;
  std::size_t hidden = 768;
  std::size_t out = 1408;
  std::size_t depth = 2;
  ops::Activation activation = ops::Activation::gelu;

  void validate() const;
};

enum class QFormerPeft { lora_qkv, lora_dense, norms };

std::set<QFormerPeft> parse_qformer_peft(const std::vector<std::string>& names);

struct QFormerConfig {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t hidden = 768;
  std::size_t encoder_width = 1408;
  std::size_t ffn = 3072;
  std::size_t queries = 32;
  std::size_t cross_every = 2;
  std::size_t lora_rank = 8;
  double lora_alpha = 16;
  std::set<QFormerPeft> peft{QFormerPeft::lora_qkv, QFormerPeft::norms};

  bool has_cross(std::size_t layer) const { return layer % cross_every == 0; }
  void validate() const;
};

enum class RouterMode { constant, soft, sparse };

RouterMode parse_router_mode(const std::string& name);
std::string_view to_string(RouterMode mode);

struct MqeConfig {
  std::size_t experts = 8;
  std::size_t top = 2;
  RouterMode mode = RouterMode::sparse;
  std::size_t router_in = 768;
  std::size_t router_hidden = 256;
  double expert_noise = 0.01;

  void validate() const;
};

struct ProjectorConfig {
  std::size_t in = 768;
  std::size_t hidden = 4096;
  std::size_t out = 2560;
  ops::Activation activation = ops::Activation::gelu;
};

struct LmConfig {
  std::size_t layers = 32;
  std::size_t heads = 32;
  std::size_t hidden = 2560;
  std::size_t ffn = 10240;
  std::size_t vocab = 51200;
  std::size_t max_seq = 2048;
  std::size_t lora_rank = 64;
  double lora_alpha = 16;

  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder;
  ProjectionConfig projection;
  QFormerConfig qformer;
  MqeConfig mqe;
  ProjectorConfig projector;
  LmConfig lm;
  double init_std = 0.02;
  double lora_std = 0.02;
  std::uint64_t seed = 7;

  static ModelConfig from_config(const Config& cfg);
  void validate() const;
};

}  // namespace mqe
