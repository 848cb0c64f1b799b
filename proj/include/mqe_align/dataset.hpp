#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mqe_align/lm.hpp"
#include "mqe_align/point_encoder.hpp"
#include "mqe_align/rng.hpp"

namespace mqe {

enum class SampleKind { brief_caption, detailed_caption, single_round, multi_round };

std::string_view to_string(SampleKind kind);
SampleKind parse_sample_kind(std::string_view name);
const std::vector<SampleKind>& all_sample_kinds();

struct InstructionSample {
  std::string cloud;  // path relative to the dataset directory
  SampleKind kind = SampleKind::brief_caption;
  std::vector<Turn> turns;
};

/// Generating parameters of one synthetic object. Every answer in the
/// instruction file is a function of these fields.
struct ObjectRecord {
  std::string cloud;
  std::string shape;
  std::string color;  // "none" for colourless objects
  int count = 1;
  std::string caption;
};

// ---- point-cloud files ----------------------------------------------------

/// Little-endian "PCF1", u32 n, u32 d, then n·d float32 row-major.
void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_point_cloud(const std::filesystem::path& path);

// ---- synthetic generator --------------------------------------------------

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();  // includes "none"
std::array<float, 3> color_rgb(std::string_view color);
std::string count_word(int count);
std::string plural(std::string_view shape);

/// Brief caption such as "a red sphere", "two boxes".
std::string brief_caption(const ObjectRecord& obj);
std::string detailed_caption(const ObjectRecord& obj);

/// Uniform surface samples of `count` copies of a primitive. A single copy is
/// the unit-scale primitive at the origin.
PointCloud sample_object(const ObjectRecord& obj, std::size_t n_points, Rng& rng);

/// Whole-word, case-insensitive match of the label (or its plural).
bool mentions_label(std::string_view response, std::string_view label);

struct GenOptions {
  std::size_t objects = 64;
  std::size_t points = 256;
  std::uint64_t seed = 7;
};

/// Writes clouds/, objects.jsonl and instructions.jsonl under `dir`.
void gen_synthetic(const std::filesystem::path& dir, const GenOptions& opts);

struct Dataset {
  std::filesystem::path root;
  std::vector<ObjectRecord> objects;
  std::vector<InstructionSample> samples;

  std::vector<std::size_t> indices_of(SampleKind kind) const;
  const ObjectRecord* object_for(std::string_view cloud) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

// ---- batch mixing ---------------------------------------------------------

struct KindMix {
  SampleKind kind;
  std::size_t batch = 1;
  std::size_t ratio = 1;
};

using MixPlan = std::vector<KindMix>;

struct Batch {
  SampleKind kind;
  std::vector<std::size_t> samples;  // indices into Dataset::samples
};

/// Endless single-kind batches. Each window of sum(ratio) batches holds every
/// kind exactly `ratio` times, in a per-window shuffled order. Within a kind,
/// samples are drawn without replacement from reshuffled passes.
class MixedBatches {
 public:
  MixedBatches(const Dataset& data, MixPlan plan, std::uint64_t seed);

  Batch next();
  std::size_t window() const { return window_size_; }

 private:
  struct Pool {
    std::vector<std::size_t> items;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
  };
  MixPlan plan_;
  std::vector<Pool> pools_;
  std::size_t window_size_ = 0;
  std::vector<std::size_t> window_;  // plan indices
  std::size_t window_pos_ = 0;
  Rng rng_;
};

}  // namespace mqe
