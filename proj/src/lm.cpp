#include "mqe_align/lm.hpp"

#include <algorithm>
#include <numeric>

#include "mqe_align/error.hpp"

namespace mqe {

namespace {

std::string layer_prefix(std::size_t l) { return "lm.layers." + std::to_string(l); }

void append_text(TokenSequence& seq, std::string_view text, bool generated) {
  for (int id : ByteTokenizer::encode(text)) {
    seq.ids.push_back(id);
    seq.loss_mask.push_back(generated ? 1 : 0);
  }
}

TokenSequence sequence_head(std::size_t point_count) {
  TokenSequence seq;
  seq.ids.push_back(ByteTokenizer::kBos);
  seq.loss_mask.push_back(0);
  seq.point_begin = 1;
  seq.point_count = point_count;
  seq.ids.insert(seq.ids.end(), point_count, kPointSlot);
  seq.loss_mask.insert(seq.loss_mask.end(), point_count, 0);
  return seq;
}

std::string question_text(std::string_view q) { return "Q: " + std::string(q) + "\nA: "; }

}  // namespace

TokenSequence build_sequence(std::size_t point_count, const std::vector<Turn>& turns) {
  if (turns.empty()) throw ContractError("build_sequence: no turns");
  auto seq = sequence_head(point_count);
  for (std::size_t t = 0; t < turns.size(); ++t) {
    append_text(seq, question_text(turns[t].q), false);
    append_text(seq, turns[t].a, true);
    seq.ids.push_back(ByteTokenizer::kEos);
    seq.loss_mask.push_back(1);
    if (t + 1 < turns.size()) append_text(seq, "\n", false);
  }
  return seq;
}

TokenSequence build_prompt(std::size_t point_count, std::string_view question) {
  auto seq = sequence_head(point_count);
  append_text(seq, question_text(question), false);
  return seq;
}

ShiftedTargets shift_targets(const TokenSequence& seq) {
  ShiftedTargets out;
  const std::size_t j = seq.size();
  out.targets.assign(j, ByteTokenizer::kPad);
  out.mask.assign(j, 0);
  for (std::size_t t = 0; t + 1 < j; ++t) {
    out.targets[t] = seq.ids[t + 1] < 0 ? ByteTokenizer::kPad : seq.ids[t + 1];
    out.mask[t] = seq.loss_mask[t + 1];
  }
  return out;
}

template <typename Real>
void LanguageModel<Real>::describe(ParameterManifest& m, const LmConfig& cfg) {
  cfg.validate();
  const auto tag = ModuleTag::lm;
  m.add({"lm.tok_embed", {cfg.vocab, cfg.hidden}, tag, PeftKind::base, false});
  m.add({"lm.pos_embed", {cfg.max_seq, cfg.hidden}, tag, PeftKind::base, false});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    m.add_norm(p + ".ln", cfg.hidden, tag);
    for (const char* name : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
      m.add_linear(p + name, cfg.hidden, cfg.hidden, tag);
    }
    m.add_linear(p + ".mlp.fc1", cfg.hidden, cfg.ffn, tag);
    m.add_linear(p + ".mlp.fc2", cfg.ffn, cfg.hidden, tag);
  }
  m.add_norm("lm.final_ln", cfg.hidden, tag);
  m.add_linear("lm.head", cfg.hidden, cfg.vocab, tag);
}

template <typename Real>
LanguageModel<Real>::LanguageModel(const LmConfig& cfg, const ParameterStore<Real>& store)
    : cfg_(cfg) {
  cfg_.validate();
  tok_embed_ = store.at("lm.tok_embed");
  pos_embed_ = store.at("lm.pos_embed");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    const double a = cfg.lora_alpha;
    const std::size_t r = cfg.lora_rank;
    blocks_.push_back({bind_norm(store, p + ".ln"), bind_linear(store, p + ".attn.q", a, r),
                       bind_linear(store, p + ".attn.k", a, r),
                       bind_linear(store, p + ".attn.v", a, r),
                       bind_linear(store, p + ".attn.o", a, r),
                       bind_linear(store, p + ".mlp.fc1", a, r),
                       bind_linear(store, p + ".mlp.fc2", a, r)});
  }
  final_ln_ = bind_norm(store, "lm.final_ln");
  head_ = bind_linear(store, "lm.head");
}

template <typename Real>
Tensor<Real> LanguageModel<Real>::run_blocks(Tensor<Real> x) const {
  const std::size_t j = x.rows();
  if (j > cfg_.max_seq) {
    throw SequenceError("lm_forward: sequence length " + std::to_string(j) + " exceeds max_seq " +
                        std::to_string(cfg_.max_seq));
  }
  x = ops::add(x, ops::slice_rows(pos_embed_, 0, j));
  for (const auto& b : blocks_) {
    auto n = b.ln(x);
    x = ops::add(x, b.o(ops::attention(b.q(n), b.k(n), b.v(n), cfg_.heads, true)));
    n = b.ln(x);
    x = ops::add(x, b.fc2(ops::gelu(b.fc1(n))));
  }
  return final_ln_(x);
}

template <typename Real>
Tensor<Real> LanguageModel<Real>::hidden_states(const TokenSequence& seq,
                                                const Tensor<Real>& point_tokens) const {
  const std::size_t j = seq.size();
  if (j == 0) throw SequenceError("lm_forward: empty sequence");
  if (j > cfg_.max_seq) {
    throw SequenceError("lm_forward: sequence length " + std::to_string(j) + " exceeds max_seq " +
                        std::to_string(cfg_.max_seq));
  }
  const std::size_t pb = seq.point_begin, pc = seq.point_count;
  if (pc > 0) {
    if (!point_tokens.defined() || point_tokens.rank() != 2 || point_tokens.rows() != pc ||
        point_tokens.cols() != cfg_.hidden) {
      throw DimensionError("lm_forward: point span of " + std::to_string(pc) + " needs " +
                           std::to_string(pc) + " x " + std::to_string(cfg_.hidden) +
                           " point tokens, got " +
                           (point_tokens.defined() ? shape_str(point_tokens.shape()) : "none"));
    }
    if (pb + pc > j) throw SequenceError("lm_forward: point span runs past the sequence end");
  }
  std::vector<Tensor<Real>> parts;
  auto text = [&](std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    std::span<const int> ids(seq.ids.data() + begin, end - begin);
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
        throw SequenceError("lm_forward: token id " + std::to_string(id) + " outside vocabulary");
      }
    }
    parts.push_back(ops::embedding(tok_embed_, ids));
  };
  if (pc == 0) {
    text(0, j);
  } else {
    text(0, pb);
    parts.push_back(point_tokens);
    text(pb + pc, j);
  }
  return run_blocks(parts.size() == 1 ? parts.front() : ops::concat_rows(parts));
}

template <typename Real>
Tensor<Real> LanguageModel<Real>::hidden_states(std::span<const int> ids) const {
  TokenSequence seq;
  seq.ids.assign(ids.begin(), ids.end());
  seq.loss_mask.assign(ids.size(), 0);
  return hidden_states(seq, Tensor<Real>());
}

template <typename Real>
Tensor<Real> LanguageModel<Real>::vocab_project(const Tensor<Real>& hidden) const {
  if (hidden.rank() != 2 || hidden.cols() != cfg_.hidden) {
    throw DimensionError("vocab_project: input " + shape_str(hidden.shape()) + ", expected width " +
                         std::to_string(cfg_.hidden));
  }
  return head_(hidden);
}

template <typename Real>
std::vector<int> LanguageModel<Real>::greedy_decode(const TokenSequence& prompt,
                                                    const Tensor<Real>& point_tokens,
                                                    std::size_t max_new) const {
  NoGradGuard guard;
  TokenSequence seq = prompt;
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new && seq.size() < cfg_.max_seq; ++step) {
    auto h = hidden_states(seq, point_tokens);
    auto last = vocab_project(ops::slice_rows(h, h.rows() - 1, h.rows()));
    const auto d = last.data();
    const int next = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    out.push_back(next);
    if (next == ByteTokenizer::kEos) break;
    seq.ids.push_back(next);
    seq.loss_mask.push_back(0);
  }
  return out;
}

ManifestDelta apply_lm_peft(ParameterManifest& manifest, const LmConfig& cfg) {
  ManifestDelta delta;
  const auto tag = ModuleTag::lm_peft;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    for (const char* name : {".attn.q", ".attn.k", ".attn.v"}) {
      add_lora(manifest, p + name, cfg.lora_rank, tag, delta);
    }
    retag_norm(manifest, p + ".ln", tag, delta);
  }
  retag_norm(manifest, "lm.final_ln", tag, delta);
  return delta;
}

template class LanguageModel<float>;
template class LanguageModel<double>;

}  // namespace mqe
