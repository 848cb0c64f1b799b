#include "mqe_align/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "mqe_align/error.hpp"

namespace mqe {

std::pair<double, double> StageResult::trend() const {
  const std::size_t segments = std::max<std::size_t>(plan.epochs, 3);
  const std::size_t n = losses.size();
  if (n < segments) throw ContractError("trend: fewer steps than segments");
  // Segment length is rounded down to whole mix windows so both ends see the
  // same number of batches of every kind.
  std::size_t window = 0;
  for (const auto& k : plan.mix) window += k.ratio;
  std::size_t len = n / segments;
  if (window > 0 && len >= window) len -= len % window;
  auto mean = [&](std::size_t begin) {
    double s = 0;
    for (std::size_t i = begin; i < begin + len; ++i) s += losses[i];
    return s / static_cast<double>(len);
  };
  return {mean(0), mean(n - len)};
}

std::vector<double> StageResult::epoch_means() const {
  std::vector<double> out;
  const std::size_t per = plan.iterations;
  for (std::size_t e = 0; e * per < losses.size(); ++e) {
    double s = 0;
    const std::size_t end = std::min(losses.size(), (e + 1) * per);
    for (std::size_t i = e * per; i < end; ++i) s += losses[i];
    out.push_back(s / static_cast<double>(end - e * per));
  }
  return out;
}

PromptKind parse_prompt_kind(std::string_view name) {
  if (name == "I" || name == "i") return PromptKind::instruction;
  if (name == "C" || name == "c") return PromptKind::completion;
  throw ConfigError("prompt kind must be I or C, got '" + std::string(name) + "'");
}

std::string_view prompt_text(PromptKind kind) {
  return kind == PromptKind::instruction ? "What is this?" : "This is an object of";
}

Trainer::Trainer(const Config& cfg, Dataset data)
    : cfg_(cfg), data_(std::move(data)), model_(ModelConfig::from_config(cfg)) {
  if (cfg_.str("train.precision") != "float32") {
    throw ConfigError("train.precision: only float32 training is supported");
  }
}

bool Trainer::mqe_active() const {
  if (completed_stage_ == 0) return false;
  for (auto s : cfg_.int_list("mqe.stages")) {
    if (s == completed_stage_) return true;
  }
  return false;
}

const Tensor<float>& Trainer::features(const std::string& cloud) {
  auto it = features_.find(cloud);
  if (it != features_.end()) return it->second;
  const auto pc = load_point_cloud(data_.root / cloud);
  return features_.emplace(cloud, model_.encode(pc)).first->second;
}

double Trainer::train_step(const Batch& batch, AdamW<float>& optimizer, double lr, bool use_mqe,
                           std::int64_t step) {
  auto& store = model_.store();
  const auto params = store.trainable(model_.manifest());
  for (auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  const std::size_t o = model_.config().qformer.queries;
  std::vector<Tensor<float>> losses;
  float max_logit = -INFINITY;
  for (std::size_t idx : batch.samples) {
    const auto& sample = data_.samples.at(idx);
    const auto seq = build_sequence(o, sample.turns);
    const auto shifted = shift_targets(seq);
    auto logits = model_.logits(features(sample.cloud), seq, use_mqe);
    for (float v : logits.data()) max_logit = std::max(max_logit, v);
    losses.push_back(ops::cross_entropy_masked(logits, shifted.targets, shifted.mask));
  }
  auto total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
  total = ops::scale(total, 1.0f / static_cast<float>(losses.size()));
  const double value = total.item();
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss at step " + std::to_string(step) + ", batch of " +
                       std::string(to_string(batch.kind)) + " starting at sample " +
                       std::to_string(batch.samples.front()) + ", max logit " +
                       std::to_string(max_logit));
  }
  total.backward();

  const double clip = cfg_.real("optim.grad_clip");
  if (clip > 0) {
    double sq = 0;
    for (const auto& p : params) {
      for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip) {
      const float f = static_cast<float>(clip / norm);
      for (auto p : params) {
        for (auto& g : p.tensor.grad()) g *= f;
      }
    }
  }
  optimizer.step(params, lr);
  return value;
}

std::vector<double> Trainer::pretrain_lm(std::ostream* log) {
  if (completed_stage_ != 0) throw ConfigError("lm prior must run before the first stage");
  std::vector<double> losses;
  const auto steps = cfg_.integer("lm.prior_steps");
  if (steps <= 0) return losses;
  const double lr = cfg_.real("lm.prior_lr");
  LrSchedule schedule{lr * 0.01, lr, lr * 0.1, std::max<std::int64_t>(1, steps / 10), steps};
  schedule.validate();

  auto& manifest = model_.manifest();
  auto& store = model_.store();
  std::vector<NamedParam<float>> params;
  for (const auto& e : manifest.entries()) {
    const bool lm_tensor = e.module == ModuleTag::lm || e.module == ModuleTag::lm_peft;
    const bool adapter = e.kind == PeftKind::lora_A || e.kind == PeftKind::lora_B;
    auto t = store.at(e.path);
    t.set_requires_grad(lm_tensor && !adapter);
    if (lm_tensor && !adapter) params.push_back({e.path, t});
  }
  AdamW<float> optimizer(adamw_config(cfg_));
  optimizer.reset(params);

  const std::size_t o = model_.config().qformer.queries;
  const Tensor<float> blank(Shape{o, model_.config().lm.hidden}, 0.0f);
  Rng rng(derive_seed(static_cast<std::uint64_t>(cfg_.integer("seed")), "lm_prior"));
  constexpr std::size_t kBatch = 4;
  const auto start = std::chrono::steady_clock::now();
  for (std::int64_t s = 0; s < steps; ++s) {
    for (auto& p : params) p.tensor.zero_grad();
    Tensor<float> total;
    for (std::size_t b = 0; b < kBatch; ++b) {
      const auto& sample = data_.samples[rng.below(data_.samples.size())];
      const auto seq = build_sequence(o, sample.turns);
      const auto shifted = shift_targets(seq);
      auto loss = ops::cross_entropy_masked(model_.lm().logits(seq, blank), shifted.targets, shifted.mask);
      total = b == 0 ? loss : ops::add(total, loss);
    }
    total = ops::scale(total, 1.0f / kBatch);
    total.backward();
    const double rate = lr_at(schedule, s);
    optimizer.step(params, rate);
    losses.push_back(total.item());
    if (log) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      char line[256];
      std::snprintf(line, sizeof line,
                    "{\"step\":%lld,\"stage\":0,\"lr\":%.9g,\"loss\":%.9g,\"wall_ms\":%.1f}\n",
                    static_cast<long long>(s), rate, losses.back(), ms);
      *log << line;
    }
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
  return losses;
}

StageResult Trainer::run_stage(int stage, std::ostream* log) {
  const auto stages = enabled_stages(cfg_);
  auto pos = std::find(stages.begin(), stages.end(), stage);
  if (pos == stages.end()) {
    throw ConfigError("stage " + std::to_string(stage) + " is not enabled in train.stages");
  }
  const int previous = pos == stages.begin() ? 0 : *(pos - 1);
  if (completed_stage_ != previous) {
    throw ConfigError("stage order: stage " + std::to_string(stage) + " needs stage " +
                      std::to_string(previous) + " to be completed first (have " +
                      std::to_string(completed_stage_) + ")");
  }

  StageResult result;
  result.plan = stage_plan(cfg_, stage);
  const auto& plan = result.plan;
  auto& manifest = model_.manifest();
  auto& store = model_.store();
  apply_stage_manifest(manifest, plan);
  store.sync_requires_grad(manifest);

  AdamW<float> optimizer(adamw_config(cfg_));
  optimizer.reset(store.trainable(manifest));
  const auto seed = static_cast<std::uint64_t>(cfg_.integer("seed"));
  MixedBatches batches(data_, plan.mix, derive_seed(seed, "stage" + std::to_string(stage)));

  result.probe_before = probe_loss(plan.mix, plan.use_mqe);
  const auto before = store.snapshot();
  const auto start = std::chrono::steady_clock::now();
  const auto total = static_cast<std::int64_t>(plan.total_steps());
  for (std::int64_t s = 0; s < total; ++s) {
    const double lr = lr_at(plan.schedule, s);
    const double loss = train_step(batches.next(), optimizer, lr, plan.use_mqe, s);
    result.losses.push_back(loss);
    ++global_step_;
    if (log) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      char line[256];
      std::snprintf(line, sizeof line,
                    "{\"step\":%lld,\"stage\":%d,\"lr\":%.9g,\"loss\":%.9g,\"wall_ms\":%.1f}\n",
                    static_cast<long long>(s), stage, lr, loss, ms);
      *log << line;
    }
  }
  const auto after = store.snapshot();
  result.probe_after = probe_loss(plan.mix, plan.use_mqe);
  result.violations = freeze_audit(manifest, before, after);
  result.changed = changed_paths(before, after);
  result.steps = total;
  completed_stage_ = stage;
  return result;
}

double Trainer::probe_loss(const MixPlan& mix, bool use_mqe, std::size_t limit) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data_.samples.size(); ++i) {
    for (const auto& k : mix) {
      if (data_.samples[i].kind == k.kind) pool.push_back(i);
    }
  }
  if (pool.empty()) throw ConfigError("probe_loss: no samples of the requested kinds");
  const std::size_t n = std::min(limit, pool.size());
  const std::size_t o = model_.config().qformer.queries;
  NoGradGuard guard;
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& sample = data_.samples[pool[j * pool.size() / n]];
    total += model_.sequence_loss(features(sample.cloud), build_sequence(o, sample.turns), use_mqe).item();
  }
  return total / static_cast<double>(n);
}

void Trainer::save(const std::filesystem::path& dir) const {
  save_checkpoint(dir, model_.manifest(), model_.store(),
                  {completed_stage_, global_step_, cfg_.hash_hex()});
}

void Trainer::load(const std::filesystem::path& dir, bool allow_hash_mismatch, std::ostream* warn) {
  const auto info = load_checkpoint(dir, model_.manifest(), model_.store(), cfg_.hash_hex(),
                                    allow_hash_mismatch, warn);
  completed_stage_ = info.stage;
  global_step_ = info.step;
}

std::string Trainer::answer(const std::string& cloud, std::string_view question) {
  const auto max_new = static_cast<std::size_t>(cfg_.integer("eval.max_new"));
  return model_.answer(features(cloud), question, mqe_active(), max_new);
}

ClassificationReport Trainer::evaluate_classification(PromptKind kind) {
  ClassificationReport r;
  r.kind = kind;
  for (const auto& obj : data_.objects) {
    auto response = answer(obj.cloud, prompt_text(kind));
    ++r.total;
    if (mentions_label(response, obj.shape)) ++r.correct;
    r.responses.push_back(std::move(response));
  }
  return r;
}

double Trainer::caption_match_rate() {
  std::size_t hits = 0;
  for (const auto& obj : data_.objects) {
    if (answer(obj.cloud, "What is this?") == obj.caption) ++hits;
  }
  return data_.objects.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(data_.objects.size());
}

}  // namespace mqe
