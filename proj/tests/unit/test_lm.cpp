#include <cmath>

#include "doctest.h"
#include "mqe_align/error.hpp"
#include "mqe_align/lm.hpp"
#include "support.hpp"

using namespace mqe;
using testing::random_tensor;

namespace {

LmConfig small_lm(std::size_t vocab = 11) {
  LmConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 8;
  c.ffn = 12;
  c.vocab = vocab;
  c.max_seq = 16;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  return c;
}

struct Bound {
  ParameterManifest manifest;
  ParameterStore<double> store;
  LanguageModel<double> lm;

  Bound(const LmConfig& cfg, bool peft, std::uint64_t seed) {
    LanguageModel<double>::describe(manifest, cfg);
    if (peft) apply_lm_peft(manifest, cfg);
    store = ParameterStore<double>(manifest);
    store.initialize(seed, 0.5, 0.1);
    lm = LanguageModel<double>(cfg, store);
  }
};

TokenSequence plain(std::vector<int> ids) {
  TokenSequence s;
  s.loss_mask.assign(ids.size(), 0);
  s.ids = std::move(ids);
  return s;
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  const auto d = t.data();
  return {d.begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
          d.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Mat affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat out;
  for (const auto& r : x) {
    Vec o(w.cols());
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * w.at(i, j);
      o[j] = s;
    }
    out.push_back(o);
  }
  return out;
}

Mat norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat out;
  for (const auto& r : x) {
    double mean = 0, var = 0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(r.size());
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(r.size());
    Vec o(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) o[i] = (r[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    out.push_back(o);
  }
  return out;
}

Mat plus(Mat a, const Mat& b) {
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t i = 0; i < a[r].size(); ++i) a[r][i] += b[r][i];
  }
  return a;
}

}  // namespace

TEST_SUITE("lm") {

TEST_CASE("logits have one row per position and one column per vocabulary entry") {
  Bound b(small_lm(), false, 1);
  const auto logits = b.lm.logits(plain({1, 2, 3, 4, 5}), Tensor<double>());
  CHECK(logits.shape() == Shape{5, 11});
}

TEST_CASE("changing a later token leaves earlier positions bit-identical") {
  Bound b(small_lm(), false, 2);
  const auto a = b.lm.hidden_states(std::vector<int>{1, 2, 3, 4, 5});
  const auto c = b.lm.hidden_states(std::vector<int>{1, 2, 3, 9, 0});
  for (std::size_t r = 0; r < 3; ++r) CHECK(row(a, r) == row(c, r));
  CHECK(row(a, 3) != row(c, 3));
}

TEST_CASE("two-token single-head decoder matches a hand evaluation") {
  LmConfig cfg = small_lm(5);
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.hidden = 4;
  cfg.ffn = 6;
  Bound b(cfg, false, 3);
  Rng rng(4);
  for (const auto& e : b.manifest.entries()) {
    if (e.path.ends_with(".gain") || e.path.ends_with(".bias")) {
      for (auto& v : b.store.at(e.path).data()) v += 0.3 * rng.normal();
    }
  }
  const std::vector<int> ids{3, 1};
  auto W = [&](const std::string& p) { return b.store.at("lm.layers.0." + p + ".weight"); };
  auto B = [&](const std::string& p) { return b.store.at("lm.layers.0." + p + ".bias"); };
  const auto& gain = b.store.at("lm.layers.0.ln.gain");
  const auto& shift = b.store.at("lm.layers.0.ln.bias");

  Mat x;
  for (std::size_t t = 0; t < 2; ++t) {
    Vec r = row(b.store.at("lm.tok_embed"), static_cast<std::size_t>(ids[t]));
    const Vec p = row(b.store.at("lm.pos_embed"), t);
    for (std::size_t i = 0; i < 4; ++i) r[i] += p[i];
    x.push_back(r);
  }
  Mat n = norm(x, gain, shift);
  const Mat q = affine(n, W("attn.q"), B("attn.q")), k = affine(n, W("attn.k"), B("attn.k")),
            v = affine(n, W("attn.v"), B("attn.v"));
  Mat ctx(2, Vec(4, 0.0));
  ctx[0] = v[0];  // the first position only sees itself
  double s[2];
  for (std::size_t j = 0; j < 2; ++j) {
    s[j] = 0;
    for (std::size_t d = 0; d < 4; ++d) s[j] += q[1][d] * k[j][d];
    s[j] /= 2.0;
  }
  const double w1 = 1.0 / (1.0 + std::exp(s[0] - s[1]));
  for (std::size_t d = 0; d < 4; ++d) ctx[1][d] = (1 - w1) * v[0][d] + w1 * v[1][d];
  x = plus(x, affine(ctx, W("attn.o"), B("attn.o")));
  n = norm(x, gain, shift);
  Mat h = affine(n, W("mlp.fc1"), B("mlp.fc1"));
  for (auto& r : h) {
    for (double& e : r) e = 0.5 * e * (1 + std::erf(e / std::sqrt(2.0)));
  }
  x = plus(x, affine(h, W("mlp.fc2"), B("mlp.fc2")));
  x = norm(x, b.store.at("lm.final_ln.gain"), b.store.at("lm.final_ln.bias"));
  const Mat expected = affine(x, b.store.at("lm.head.weight"), b.store.at("lm.head.bias"));

  const auto logits = b.lm.logits(plain(ids), Tensor<double>());
  for (std::size_t t = 0; t < 2; ++t) {
    const auto got = row(logits, t);
    for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(got[c] - expected[t][c]) < 1e-12);
  }
}

TEST_CASE("a zero hidden state projects to zero logits") {
  Bound b(small_lm(), false, 5);
  const auto logits = b.lm.vocab_project(Tensor<double>(Shape{3, 8}, 0.0));
  for (double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("next-token distributions are normalised") {
  Bound b(small_lm(), false, 6);
  const auto p = ops::softmax(b.lm.logits(plain({1, 7, 3, 0}), Tensor<double>()));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0;
    for (double v : row(p, r)) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("a one-word vocabulary always decodes that word") {
  Bound b(small_lm(1), false, 7);
  CHECK(b.lm.greedy_decode(plain({0, 0}), Tensor<double>(), 4) == std::vector<int>{0, 0, 0, 0});
}

TEST_CASE("greedy decoding is deterministic and respects max_new") {
  LmConfig cfg = small_lm(ByteTokenizer::kVocab);
  cfg.max_seq = 64;
  Bound b(cfg, false, 8);
  Rng rng(9);
  const auto prompt = build_prompt(2, "What is this?");
  const auto points = random_tensor<double>({2, 8}, rng);
  CHECK(b.lm.greedy_decode(prompt, points, 1).size() == 1);
  const auto first = b.lm.greedy_decode(prompt, points, 12);
  CHECK(first == b.lm.greedy_decode(prompt, points, 12));
  CHECK(first.size() <= 12);
}

TEST_CASE("LoRA census on the backbone") {
  {
    LmConfig cfg;  // paper defaults
    ParameterManifest m;
    LanguageModel<float>::describe(m, cfg);
    const auto delta = apply_lm_peft(m, cfg);
    CHECK(delta.added_params == 32u * 3u * (2560u * 64u + 64u * 2560u));
    CHECK(delta.retagged_params == 33u * 2u * 2560u);
    CHECK(delta.added_params + delta.retagged_params == 31626240);
  }
  {
    LmConfig cfg = small_lm(ByteTokenizer::kVocab);
    cfg.hidden = 64;
    cfg.heads = 4;
    cfg.lora_rank = 4;
    ParameterManifest m;
    LanguageModel<float>::describe(m, cfg);
    CHECK(apply_lm_peft(m, cfg).added_params == 3072);
  }
}

TEST_CASE("zero LoRA B reproduces the base logits bit for bit") {
  Bound base(small_lm(), false, 10), peft(small_lm(), true, 10);
  const auto seq = plain({1, 2, 3, 4});
  const auto a = base.lm.logits(seq, Tensor<double>()), c = peft.lm.logits(seq, Tensor<double>());
  CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST_CASE("targets at masked positions do not affect loss or gradients") {
  Bound b(small_lm(), false, 11);
  auto& head = b.store.at("lm.head.weight");
  head.set_requires_grad(true);
  b.lm = LanguageModel<double>(small_lm(), b.store);
  const auto seq = plain({1, 2, 3, 4, 5, 6});
  const std::vector<std::uint8_t> mask{0, 1, 0, 1, 1, 0};

  auto run = [&](std::vector<int> targets) {
    head.zero_grad();
    const auto loss = ops::cross_entropy_masked(b.lm.logits(seq, Tensor<double>()), targets, mask);
    loss.backward();
    const auto g = head.grad();
    return std::make_pair(loss[0], std::vector<double>(g.begin(), g.end()));
  };
  const auto a = run({2, 3, 4, 5, 6, 0});
  const auto c = run({9, 3, 10, 5, 6, 7});
  CHECK(a.first == c.first);
  CHECK(a.second == c.second);
}

TEST_CASE("sequences longer than max_seq are rejected") {
  Bound b(small_lm(), false, 12);
  CHECK_THROWS_AS(b.lm.hidden_states(std::vector<int>(17, 1)), SequenceError);
  CHECK_THROWS_AS(b.lm.hidden_states(std::vector<int>{1, 11}), SequenceError);
  CHECK_THROWS_AS(b.lm.logits(build_prompt(2, "x"), Tensor<double>(Shape{3, 8}, 0.0)), DimensionError);
}

TEST_CASE("multi-round template marks exactly the answers and terminators") {
  const auto seq = build_sequence(3, {{"what", "a cup"}, {"color?", "red"}});
  REQUIRE(seq.ids.size() == seq.loss_mask.size());
  CHECK(seq.ids[0] == ByteTokenizer::kBos);
  CHECK(seq.point_begin == 1);
  CHECK(seq.point_count == 3);
  for (std::size_t i = 1; i < 4; ++i) CHECK(seq.ids[i] == kPointSlot);
  CHECK(seq.ids.back() == ByteTokenizer::kEos);

  std::vector<int> text(seq.ids.begin() + 4, seq.ids.end());
  CHECK(ByteTokenizer::decode(text) == "Q: what\nA: a cup\nQ: color?\nA: red");
  std::string generated;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.loss_mask[i]) continue;
    generated += seq.ids[i] == ByteTokenizer::kEos ? std::string("<eos>")
                                                   : ByteTokenizer::decode({seq.ids[i]});
  }
  CHECK(generated == "a cup<eos>red<eos>");

  const auto shifted = shift_targets(seq);
  CHECK(shifted.mask.back() == 0);
  CHECK(shifted.targets[seq.size() - 2] == ByteTokenizer::kEos);
  CHECK(shifted.mask[seq.size() - 2] == 1);
}

}  // TEST_SUITE
