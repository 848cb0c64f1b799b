#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mqe_align/checkpoint.hpp"
#include "mqe_align/model.hpp"
#include "mqe_align/stages.hpp"

namespace mqe {

struct StageResult {
  StagePlan plan;
  std::vector<double> losses;              // one per step
  std::vector<std::string> violations;     // frozen tensors that changed
  std::vector<std::string> changed;        // every tensor that changed
  std::int64_t steps = 0;
  /// Mean loss over a fixed probe of the stage's training samples, with the
  /// parameters at the start and at the end of the stage.
  double probe_before = 0;
  double probe_after = 0;

  /// Mean loss over the first and the last segment, each about 1/max(epochs, 3)
  /// of the run and a whole number of mix windows long.
  std::pair<double, double> trend() const;
  /// Mean loss per epoch.
  std::vector<double> epoch_means() const;
};

enum class PromptKind { instruction, completion };

PromptKind parse_prompt_kind(std::string_view name);  // "I" or "C"
std::string_view prompt_text(PromptKind kind);

struct ClassificationReport {
  PromptKind kind = PromptKind::instruction;
  std::size_t total = 0;
  std::size_t correct = 0;
  std::vector<std::string> responses;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Owns a float32 model plus its dataset and drives the staged training.
class Trainer {
 public:
  Trainer(const Config& cfg, Dataset data);

  const Config& config() const { return cfg_; }
  const Dataset& data() const { return data_; }
  AlignmentModel<float>& model() { return model_; }
  const AlignmentModel<float>& model() const { return model_; }

  int completed_stage() const { return completed_stage_; }
  /// Whether the most recently completed stage ran the expert mixture.
  bool mqe_active() const;

  /// Cached frozen encoder output for a cloud path relative to the dataset.
  const Tensor<float>& features(const std::string& cloud);

  /// Forward, masked loss (mean over samples), backward and one AdamW step on
  /// the current trainable set.
  double train_step(const Batch& batch, AdamW<float>& optimizer, double lr, bool use_mqe,
                    std::int64_t step = 0);

  /// Text-only pretraining of the LM base weights and norms on every response
  /// in the dataset, standing in for a pretrained language model. Runs once,
  /// before the first stage, for `lm.prior_steps` steps (0 disables it).
  std::vector<double> pretrain_lm(std::ostream* log = nullptr);

  /// Runs one stage end to end. Stages must follow `train.stages` in order.
  StageResult run_stage(int stage, std::ostream* log = nullptr);

  /// Mean sequence loss over up to `limit` samples of the given kinds, evenly
  /// strided through the dataset. No graph is recorded.
  double probe_loss(const MixPlan& mix, bool use_mqe, std::size_t limit = 256);

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir, bool allow_hash_mismatch = false,
            std::ostream* warn = nullptr);

  std::string answer(const std::string& cloud, std::string_view question);
  ClassificationReport evaluate_classification(PromptKind kind);
  /// Fraction of objects whose "What is this?" answer equals the caption.
  double caption_match_rate();

 private:
  Config cfg_;
  Dataset data_;
  AlignmentModel<float> model_;
  std::map<std::string, Tensor<float>> features_;
  int completed_stage_ = 0;
  std::int64_t global_step_ = 0;
};

}  // namespace mqe
