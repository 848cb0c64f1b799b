#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mqe_align/layers.hpp"
#include "mqe_align/model_config.hpp"
#include "mqe_align/tokenizer.hpp"

namespace mqe {

inline constexpr int kPointSlot = -1;

struct Turn {
  std::string q;
  std::string a;
};

/// Mixed point/text sequence. Point positions hold kPointSlot; loss_mask is 1
/// exactly at generated-text positions.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t point_begin = 0;
  std::size_t point_count = 0;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return ids.size(); }
};

/// Prompt layout: [BOS] [point tokens] then per turn "Q: {q}\nA: " followed by
/// the answer and EOS, with "\n" before the next turn. Answers and their EOS
/// are the generated text.
TokenSequence build_sequence(std::size_t point_count, const std::vector<Turn>& turns);
/// The same layout cut right after the final "A: ", ready for decoding.
TokenSequence build_prompt(std::size_t point_count, std::string_view question);

/// Next-token training pairs: position t predicts ids[t+1]; the mask follows
/// the predicted position. The last position is always excluded.
struct ShiftedTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};
ShiftedTargets shift_targets(const TokenSequence& seq);

/// Pre-norm causal decoder with learned absolute positions and an untied head.
template <typename Real>
class LanguageModel {
 public:
  static void describe(ParameterManifest& manifest, const LmConfig& cfg);

  LanguageModel() = default;
  LanguageModel(const LmConfig& cfg, const ParameterStore<Real>& store);

  /// j × hidden hidden states. point_tokens supplies the point_span rows.
  Tensor<Real> hidden_states(const TokenSequence& seq, const Tensor<Real>& point_tokens) const;
  /// Plain-text variant (no point span).
  Tensor<Real> hidden_states(std::span<const int> ids) const;
  Tensor<Real> vocab_project(const Tensor<Real>& hidden) const;
  Tensor<Real> logits(const TokenSequence& seq, const Tensor<Real>& point_tokens) const {
    return vocab_project(hidden_states(seq, point_tokens));
  }

  /// Appends argmax tokens (ties to the lowest id) until EOS or max_new.
  /// The returned ids exclude the prompt and include EOS when emitted.
  std::vector<int> greedy_decode(const TokenSequence& prompt, const Tensor<Real>& point_tokens,
                                 std::size_t max_new) const;

  const LmConfig& config() const { return cfg_; }

 private:
  Tensor<Real> run_blocks(Tensor<Real> x) const;

  struct Block {
    NormLayer<Real> ln;
    LinearLayer<Real> q, k, v, o, fc1, fc2;
  };
  LmConfig cfg_;
  Tensor<Real> tok_embed_, pos_embed_;
  std::vector<Block> blocks_;
  NormLayer<Real> final_ln_;
  LinearLayer<Real> head_;
};

/// LoRA on every layer's Q/K/V plus per-layer and final norms, all tagged
/// lm_peft.
ManifestDelta apply_lm_peft(ParameterManifest& manifest, const LmConfig& cfg);

extern template class LanguageModel<float>;
extern template class LanguageModel<double>;

}  // namespace mqe
