#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>

#include "mqe_align/manifest.hpp"

namespace mqe {

struct CheckpointInfo {
  int stage = 0;
  std::int64_t step = 0;
  std::string config_hash;
};

/// Writes `dir/manifest.json` plus one raw little-endian blob per tensor under
/// `dir/tensors/`. Output bytes depend only on the arguments.
template <typename Real>
void save_checkpoint(const std::filesystem::path& dir, const ParameterManifest& manifest,
                     const ParameterStore<Real>& store, const CheckpointInfo& info);

/// Reads every manifest entry back into `store` in place. A config-hash
/// mismatch is a LoadError unless `allow_hash_mismatch`, in which case a
/// warning goes to `warn`.
template <typename Real>
CheckpointInfo load_checkpoint(const std::filesystem::path& dir, const ParameterManifest& manifest,
                               ParameterStore<Real>& store, const std::string& expected_hash,
                               bool allow_hash_mismatch = false, std::ostream* warn = nullptr);

/// Header only, without touching any tensors.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

}  // namespace mqe
