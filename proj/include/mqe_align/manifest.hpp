#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mqe_align/diff/optim.hpp"
#include "mqe_align/diff/tensor.hpp"

namespace mqe {

/// Which part of the model a tensor belongs to. The PEFT tags (qformer_peft,
/// lm_peft) hold the adapters and fine-tuned norms; the base tags hold the
/// frozen pretrained-style weights.
enum class ModuleTag {
  point_encoder,
  pc_projection,
  qformer,
  qformer_peft,
  mqe,
  modality_projector,
  lm,
  lm_peft,
};

enum class PeftKind { base, lora_A, lora_B, norm, query_expert, router };

std::string_view to_string(ModuleTag tag);
std::string_view to_string(PeftKind kind);
ModuleTag parse_module_tag(std::string_view name);

/// Tags a stage plan may mark trainable.
const std::vector<ModuleTag>& trainable_tag_vocabulary();
/// Parses a trainable-tag list; base tags and unknown names are ConfigErrors.
std::set<ModuleTag> parse_trainable_tags(const std::vector<std::string>& names);

/// Report ordering of all tags.
const std::vector<ModuleTag>& all_module_tags();

struct ManifestEntry {
  std::string path;
  Shape shape;
  ModuleTag module = ModuleTag::lm;
  PeftKind kind = PeftKind::base;
  bool trainable = false;

  std::size_t numel() const { return shape_numel(shape); }
};

struct ManifestDelta {
  std::vector<std::string> added;
  std::vector<std::string> retagged;
  std::size_t added_params = 0;
  std::size_t retagged_params = 0;
};

/// Inventory of every named tensor in the model, in registration order.
class ParameterManifest {
 public:
  void add(ManifestEntry entry);
  /// Registers `prefix.weight` [in, out] and optionally `prefix.bias` [out].
  void add_linear(const std::string& prefix, std::size_t in, std::size_t out, ModuleTag tag,
                  bool bias = true);
  /// Registers `prefix.gain` / `prefix.bias` of a normalisation layer.
  void add_norm(const std::string& prefix, std::size_t width, ModuleTag tag);
  void retag(const std::string& path, ModuleTag tag);

  const ManifestEntry* find(std::string_view path) const;
  const ManifestEntry& at(std::string_view path) const;
  bool contains(std::string_view path) const { return find(path) != nullptr; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }

  /// Trainable flag := entry's tag is in `tags`.
  void set_trainable(const std::set<ModuleTag>& tags);
  std::set<ModuleTag> trainable_tags() const;

  std::size_t total() const;
  std::size_t trainable_total() const;

 private:
  std::vector<ManifestEntry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct CountRow {
  ModuleTag module;
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

struct CountReport {
  std::vector<CountRow> rows;  // fixed tag order, tags with no entries omitted
  std::size_t trainable_total = 0;
  std::size_t frozen_total = 0;
  std::size_t total = 0;

  const CountRow* row(ModuleTag tag) const;
};

/// Exact per-tag totals using the manifest's current trainable flags.
CountReport count_params(const ParameterManifest& manifest);
/// Same, as if exactly `trainable` were marked trainable.
CountReport count_params(const ParameterManifest& manifest, const std::set<ModuleTag>& trainable);
/// Parameters across all entries carrying one of `tags`.
std::size_t count_tagged(const ParameterManifest& manifest, const std::set<ModuleTag>& tags);

/// "47.4M" style rendering at 0.1M resolution.
std::string round_millions(std::size_t count);
/// 1,378,432 style rendering.
std::string group_thousands(std::size_t count);

/// Materialised tensors for every manifest entry.
template <typename Real>
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(const ParameterManifest& manifest);

  /// Deterministic init: gains 1; biases and LoRA B 0; LoRA A ~ N(0, lora_std);
  /// everything else ~ N(0, std). Each tensor draws from its own stream.
  void initialize(std::uint64_t seed, double std, double lora_std);

  bool contains(std::string_view path) const { return tensors_.count(std::string(path)) != 0; }
  Tensor<Real>& at(std::string_view path);
  const Tensor<Real>& at(std::string_view path) const;
  /// Tensor or an undefined handle when absent.
  Tensor<Real> get(std::string_view path) const;

  /// requires_grad := manifest trainable flag, for every entry.
  void sync_requires_grad(const ParameterManifest& manifest);
  std::vector<NamedParam<Real>> trainable(const ParameterManifest& manifest) const;
  std::vector<NamedParam<Real>> all(const ParameterManifest& manifest) const;
  void zero_grad();

  std::map<std::string, std::vector<Real>> snapshot() const;

  std::size_t size() const { return tensors_.size(); }

 private:
  std::map<std::string, Tensor<Real>> tensors_;
};

/// Paths of frozen entries whose bytes differ between the snapshots. Throws
/// AuditError if an entry is missing or changed size.
template <typename Real>
std::vector<std::string> freeze_audit(const ParameterManifest& manifest,
                                      const std::map<std::string, std::vector<Real>>& before,
                                      const std::map<std::string, std::vector<Real>>& after);

/// Paths (any trainability) whose bytes differ between the snapshots.
template <typename Real>
std::vector<std::string> changed_paths(const std::map<std::string, std::vector<Real>>& before,
                                       const std::map<std::string, std::vector<Real>>& after);

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

}  // namespace mqe
