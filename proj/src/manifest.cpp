#include "mqe_align/manifest.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "mqe_align/error.hpp"
#include "mqe_align/rng.hpp"

namespace mqe {

namespace {

struct TagName {
  ModuleTag tag;
  std::string_view name;
};

constexpr TagName kTagNames[] = {
    {ModuleTag::point_encoder, "point_encoder"},
    {ModuleTag::pc_projection, "pc_projection"},
    {ModuleTag::qformer, "qformer"},
    {ModuleTag::qformer_peft, "qformer_peft"},
    {ModuleTag::mqe, "mqe"},
    {ModuleTag::modality_projector, "modality_projector"},
    {ModuleTag::lm, "lm"},
    {ModuleTag::lm_peft, "lm_peft"},
};

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

std::string_view to_string(ModuleTag tag) {
  for (const auto& t : kTagNames)
    if (t.tag == tag) return t.name;
  return "?";
}

std::string_view to_string(PeftKind kind) {
  switch (kind) {
    case PeftKind::base: return "base";
    case PeftKind::lora_A: return "lora_A";
    case PeftKind::lora_B: return "lora_B";
    case PeftKind::norm: return "norm";
    case PeftKind::query_expert: return "query_expert";
    case PeftKind::router: return "router";
  }
  return "?";
}

ModuleTag parse_module_tag(std::string_view name) {
  for (const auto& t : kTagNames)
    if (t.name == name) return t.tag;
  throw ConfigError("unknown module tag '" + std::string(name) + "'");
}

const std::vector<ModuleTag>& all_module_tags() {
  static const std::vector<ModuleTag> tags = [] {
    std::vector<ModuleTag> v;
    for (const auto& t : kTagNames) v.push_back(t.tag);
    return v;
  }();
  return tags;
}

const std::vector<ModuleTag>& trainable_tag_vocabulary() {
  static const std::vector<ModuleTag> tags{ModuleTag::pc_projection, ModuleTag::qformer_peft,
                                           ModuleTag::mqe, ModuleTag::modality_projector,
                                           ModuleTag::lm_peft};
  return tags;
}

std::set<ModuleTag> parse_trainable_tags(const std::vector<std::string>& names) {
  std::set<ModuleTag> out;
  const auto& vocab = trainable_tag_vocabulary();
  for (const auto& name : names) {
    ModuleTag tag = parse_module_tag(name);
    if (std::find(vocab.begin(), vocab.end(), tag) == vocab.end()) {
      throw ConfigError("module tag '" + name + "' is frozen in every stage and cannot be trained");
    }
    out.insert(tag);
  }
  return out;
}

void ParameterManifest::add(ManifestEntry entry) {
  if (index_.count(entry.path)) {
    throw ContractError("manifest: path '" + entry.path + "' registered twice");
  }
  index_.emplace(entry.path, entries_.size());
  entries_.push_back(std::move(entry));
}

void ParameterManifest::add_linear(const std::string& prefix, std::size_t in, std::size_t out,
                                   ModuleTag tag, bool bias) {
  add({prefix + ".weight", {in, out}, tag, PeftKind::base, false});
  if (bias) add({prefix + ".bias", {out}, tag, PeftKind::base, false});
}

void ParameterManifest::add_norm(const std::string& prefix, std::size_t width, ModuleTag tag) {
  add({prefix + ".gain", {width}, tag, PeftKind::norm, false});
  add({prefix + ".bias", {width}, tag, PeftKind::norm, false});
}

void ParameterManifest::retag(const std::string& path, ModuleTag tag) {
  auto it = index_.find(path);
  if (it == index_.end()) throw ContractError("manifest: no entry '" + path + "' to retag");
  entries_[it->second].module = tag;
}

const ManifestEntry* ParameterManifest::find(std::string_view path) const {
  auto it = index_.find(path);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

const ManifestEntry& ParameterManifest::at(std::string_view path) const {
  const auto* e = find(path);
  if (!e) throw ContractError("manifest: no entry '" + std::string(path) + "'");
  return *e;
}

void ParameterManifest::set_trainable(const std::set<ModuleTag>& tags) {
  for (auto& e : entries_) e.trainable = tags.count(e.module) != 0;
}

std::set<ModuleTag> ParameterManifest::trainable_tags() const {
  std::set<ModuleTag> out;
  for (const auto& e : entries_)
    if (e.trainable) out.insert(e.module);
  return out;
}

std::size_t ParameterManifest::total() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.numel();
  return n;
}

std::size_t ParameterManifest::trainable_total() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.numel();
  return n;
}

const CountRow* CountReport::row(ModuleTag tag) const {
  for (const auto& r : rows)
    if (r.module == tag) return &r;
  return nullptr;
}

namespace {

template <typename IsTrainable>
CountReport build_report(const ParameterManifest& manifest, IsTrainable&& is_trainable) {
  CountReport report;
  for (ModuleTag tag : all_module_tags()) {
    CountRow row{tag};
    bool seen = false;
    for (const auto& e : manifest.entries()) {
      if (e.module != tag) continue;
      seen = true;
      (is_trainable(e) ? row.trainable : row.frozen) += e.numel();
    }
    if (!seen) continue;
    report.trainable_total += row.trainable;
    report.frozen_total += row.frozen;
    report.rows.push_back(row);
  }
  report.total = report.trainable_total + report.frozen_total;
  return report;
}

}  // namespace

CountReport count_params(const ParameterManifest& manifest) {
  return build_report(manifest, [](const ManifestEntry& e) { return e.trainable; });
}

CountReport count_params(const ParameterManifest& manifest, const std::set<ModuleTag>& trainable) {
  return build_report(manifest,
                      [&](const ManifestEntry& e) { return trainable.count(e.module) != 0; });
}

std::size_t count_tagged(const ParameterManifest& manifest, const std::set<ModuleTag>& tags) {
  std::size_t n = 0;
  for (const auto& e : manifest.entries())
    if (tags.count(e.module)) n += e.numel();
  return n;
}

std::string round_millions(std::size_t count) {
  // Integer rounding to the nearest 100k, half up.
  const std::size_t tenths = (count + 50'000) / 100'000;
  return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10) + "M";
}

std::string group_thousands(std::size_t count) {
  std::string digits = std::to_string(count);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

template <typename Real>
ParameterStore<Real>::ParameterStore(const ParameterManifest& manifest) {
  for (const auto& e : manifest.entries()) tensors_.emplace(e.path, Tensor<Real>(e.shape));
}

template <typename Real>
void ParameterStore<Real>::initialize(std::uint64_t seed, double std, double lora_std) {
  for (auto& [path, t] : tensors_) {
    auto data = t.data();
    if (ends_with(path, ".gain")) {
      std::fill(data.begin(), data.end(), Real(1));
    } else if (ends_with(path, ".bias") || ends_with(path, ".lora_B")) {
      std::fill(data.begin(), data.end(), Real(0));
    } else {
      Rng rng(derive_seed(seed, path));
      const double s = ends_with(path, ".lora_A") ? lora_std : std;
      for (auto& v : data) v = static_cast<Real>(s * rng.normal());
    }
  }
}

template <typename Real>
Tensor<Real>& ParameterStore<Real>::at(std::string_view path) {
  auto it = tensors_.find(std::string(path));
  if (it == tensors_.end()) throw ContractError("parameter store: no tensor '" + std::string(path) + "'");
  return it->second;
}

template <typename Real>
const Tensor<Real>& ParameterStore<Real>::at(std::string_view path) const {
  auto it = tensors_.find(std::string(path));
  if (it == tensors_.end()) throw ContractError("parameter store: no tensor '" + std::string(path) + "'");
  return it->second;
}

template <typename Real>
Tensor<Real> ParameterStore<Real>::get(std::string_view path) const {
  auto it = tensors_.find(std::string(path));
  return it == tensors_.end() ? Tensor<Real>() : it->second;
}

template <typename Real>
void ParameterStore<Real>::sync_requires_grad(const ParameterManifest& manifest) {
  for (const auto& e : manifest.entries()) at(e.path).set_requires_grad(e.trainable);
}

template <typename Real>
std::vector<NamedParam<Real>> ParameterStore<Real>::trainable(const ParameterManifest& manifest) const {
  std::vector<NamedParam<Real>> out;
  for (const auto& e : manifest.entries())
    if (e.trainable) out.push_back({e.path, at(e.path)});
  return out;
}

template <typename Real>
std::vector<NamedParam<Real>> ParameterStore<Real>::all(const ParameterManifest& manifest) const {
  std::vector<NamedParam<Real>> out;
  for (const auto& e : manifest.entries()) out.push_back({e.path, at(e.path)});
  return out;
}

template <typename Real>
void ParameterStore<Real>::zero_grad() {
  for (auto& [path, t] : tensors_)
    if (t.requires_grad()) t.zero_grad();
}

template <typename Real>
std::map<std::string, std::vector<Real>> ParameterStore<Real>::snapshot() const {
  std::map<std::string, std::vector<Real>> out;
  for (const auto& [path, t] : tensors_) out.emplace(path, std::vector<Real>(t.data().begin(), t.data().end()));
  return out;
}

template <typename Real>
std::vector<std::string> freeze_audit(const ParameterManifest& manifest,
                                      const std::map<std::string, std::vector<Real>>& before,
                                      const std::map<std::string, std::vector<Real>>& after) {
  std::vector<std::string> violations;
  for (const auto& e : manifest.entries()) {
    auto b = before.find(e.path);
    auto a = after.find(e.path);
    if (b == before.end() || a == after.end()) {
      throw AuditError("freeze audit: '" + e.path + "' missing from a snapshot");
    }
    if (b->second.size() != e.numel() || a->second.size() != e.numel()) {
      throw AuditError("freeze audit: '" + e.path + "' changed size between snapshots");
    }
    if (e.trainable) continue;
    if (std::memcmp(b->second.data(), a->second.data(), e.numel() * sizeof(Real)) != 0) {
      violations.push_back(e.path);
    }
  }
  return violations;
}

template <typename Real>
std::vector<std::string> changed_paths(const std::map<std::string, std::vector<Real>>& before,
                                       const std::map<std::string, std::vector<Real>>& after) {
  std::vector<std::string> out;
  for (const auto& [path, values] : before) {
    auto it = after.find(path);
    if (it == after.end() || it->second.size() != values.size()) {
      throw AuditError("snapshot diff: '" + path + "' missing or resized");
    }
    if (std::memcmp(values.data(), it->second.data(), values.size() * sizeof(Real)) != 0) {
      out.push_back(path);
    }
  }
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template std::vector<std::string> freeze_audit<float>(const ParameterManifest&,
                                                      const std::map<std::string, std::vector<float>>&,
                                                      const std::map<std::string, std::vector<float>>&);
template std::vector<std::string> freeze_audit<double>(const ParameterManifest&,
                                                       const std::map<std::string, std::vector<double>>&,
                                                       const std::map<std::string, std::vector<double>>&);
template std::vector<std::string> changed_paths<float>(const std::map<std::string, std::vector<float>>&,
                                                       const std::map<std::string, std::vector<float>>&);
template std::vector<std::string> changed_paths<double>(const std::map<std::string, std::vector<double>>&,
                                                        const std::map<std::string, std::vector<double>>&);

}  // namespace mqe
