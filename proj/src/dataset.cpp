#include "mqe_align/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "mqe_align/error.hpp"

namespace mqe {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "point-cloud IO assumes a little-endian host");

std::string_view to_string(SampleKind kind) {
  switch (kind) {
    case SampleKind::brief_caption: return "brief_caption";
    case SampleKind::detailed_caption: return "detailed_caption";
    case SampleKind::single_round: return "single_round";
    case SampleKind::multi_round: return "multi_round";
  }
  return "?";
}

SampleKind parse_sample_kind(std::string_view name) {
  for (auto k : all_sample_kinds()) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown sample kind '" + std::string(name) + "'");
}

const std::vector<SampleKind>& all_sample_kinds() {
  static const std::vector<SampleKind> kinds{SampleKind::brief_caption, SampleKind::detailed_caption,
                                             SampleKind::single_round, SampleKind::multi_round};
  return kinds;
}

// ---- point-cloud files ----------------------------------------------------

void save_point_cloud(const fs::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot open '" + path.string() + "' for writing");
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(cloud.n),
                                   static_cast<std::uint32_t>(kPointDims)};
  out.write("PCF1", 4);
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(cloud.points.data()),
            static_cast<std::streamsize>(cloud.points.size() * sizeof(float)));
  if (!out) throw Error("io", "write failed for '" + path.string() + "'");
}

PointCloud load_point_cloud(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto where = [&](std::size_t off, const std::string& what) {
    return FormatError(path.string() + ": " + what + " at offset " + std::to_string(off));
  };
  if (bytes.size() < 12) throw where(bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), "PCF1", 4) != 0) throw where(0, "bad magic");
  std::uint32_t n = 0, d = 0;
  std::memcpy(&n, bytes.data() + 4, 4);
  std::memcpy(&d, bytes.data() + 8, 4);
  if (d != kPointDims) throw where(8, "expected d = 6, got " + std::to_string(d));
  const std::size_t need = 12 + static_cast<std::size_t>(n) * d * sizeof(float);
  if (bytes.size() < need) throw where(bytes.size(), "truncated payload (need " + std::to_string(need) + " bytes)");
  if (bytes.size() > need) throw where(need, "trailing bytes");
  std::vector<float> pts(static_cast<std::size_t>(n) * d);
  std::memcpy(pts.data(), bytes.data() + 12, pts.size() * sizeof(float));
  return PointCloud(n, std::move(pts));
}

// ---- synthetic generator --------------------------------------------------

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"sphere", "box", "cylinder", "cone", "torus"};
  return names;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names{"red", "green", "blue", "yellow", "none"};
  return names;
}

std::array<float, 3> color_rgb(std::string_view color) {
  if (color == "red") return {0.9f, 0.1f, 0.1f};
  if (color == "green") return {0.1f, 0.8f, 0.2f};
  if (color == "blue") return {0.1f, 0.2f, 0.9f};
  if (color == "yellow") return {0.9f, 0.85f, 0.1f};
  if (color == "none") return {0.0f, 0.0f, 0.0f};
  throw ConfigError("unknown color '" + std::string(color) + "'");
}

std::string count_word(int count) {
  static const char* words[] = {"zero", "one", "two", "three", "four", "five"};
  if (count < 0 || count > 5) return std::to_string(count);
  return words[count];
}

std::string plural(std::string_view shape) {
  std::string s(shape);
  return s.ends_with("x") || s.ends_with("s") ? s + "es" : s + "s";
}

std::string brief_caption(const ObjectRecord& obj) {
  const std::string color = obj.color == "none" ? "" : obj.color + " ";
  if (obj.count == 1) return "a " + color + obj.shape;
  return count_word(obj.count) + " " + color + plural(obj.shape);
}

namespace {

std::string shape_description(std::string_view shape) {
  if (shape == "sphere") return "a round ball with a smooth surface";
  if (shape == "box") return "a cube with six flat square faces";
  if (shape == "cylinder") return "a tube with two flat round ends";
  if (shape == "cone") return "a round base that narrows to a tip";
  if (shape == "torus") return "a ring shaped like a donut";
  throw ConfigError("unknown shape '" + std::string(shape) + "'");
}

constexpr double kPi = std::numbers::pi;

struct Vec3 {
  double x, y, z;
};

Vec3 sample_sphere(Rng& rng) {
  for (;;) {
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    const double r = std::sqrt(a * a + b * b + c * c);
    if (r > 1e-12) return {a / r, b / r, c / r};
  }
}

Vec3 sample_box(Rng& rng) {
  constexpr double h = 0.6;
  const auto face = rng.below(6);
  const double u = rng.uniform(-h, h), v = rng.uniform(-h, h);
  const double s = face % 2 == 0 ? h : -h;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

Vec3 sample_cylinder(Rng& rng) {
  constexpr double r = 0.6, h = 0.8;
  const double side = 2 * kPi * r * 2 * h, cap = kPi * r * r;
  const double pick = rng.uniform() * (side + 2 * cap);
  const double t = rng.uniform(0, 2 * kPi);
  if (pick < side) return {r * std::cos(t), r * std::sin(t), rng.uniform(-h, h)};
  const double rr = r * std::sqrt(rng.uniform());
  return {rr * std::cos(t), rr * std::sin(t), pick < side + cap ? h : -h};
}

Vec3 sample_cone(Rng& rng) {
  constexpr double r = 0.7, h = 1.4;
  const double slant = std::sqrt(r * r + h * h);
  const double side = kPi * r * slant, base = kPi * r * r;
  const double t = rng.uniform(0, 2 * kPi);
  if (rng.uniform() * (side + base) < side) {
    // Radius from the apex grows linearly, so its density is ~ distance.
    const double f = std::sqrt(rng.uniform());
    return {f * r * std::cos(t), f * r * std::sin(t), h / 2 - f * h};
  }
  const double rr = r * std::sqrt(rng.uniform());
  return {rr * std::cos(t), rr * std::sin(t), -h / 2};
}

Vec3 sample_torus(Rng& rng) {
  constexpr double big = 0.7, small = 0.25;
  for (;;) {
    const double u = rng.uniform(0, 2 * kPi), v = rng.uniform(0, 2 * kPi);
    if (rng.uniform() * (big + small) <= big + small * std::cos(v)) {
      const double ring = big + small * std::cos(v);
      return {ring * std::cos(u), ring * std::sin(u), small * std::sin(v)};
    }
  }
}

Vec3 sample_primitive(std::string_view shape, Rng& rng) {
  if (shape == "sphere") return sample_sphere(rng);
  if (shape == "box") return sample_box(rng);
  if (shape == "cylinder") return sample_cylinder(rng);
  if (shape == "cone") return sample_cone(rng);
  if (shape == "torus") return sample_torus(rng);
  throw ConfigError("unknown shape '" + std::string(shape) + "'");
}

std::vector<Turn> question_pool(const ObjectRecord& obj) {
  const auto caption = brief_caption(obj);
  return {
      {"What is this?", caption},
      {"This is an object of", caption},
      {"What shape is this?", obj.shape},
      {"What color is it?", obj.color == "none" ? "it has no color" : obj.color},
      {"How many objects are there?", count_word(obj.count)},
  };
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string detailed_caption(const ObjectRecord& obj) {
  return brief_caption(obj) + ", " + (obj.count > 1 ? "each " : "") + shape_description(obj.shape);
}

PointCloud sample_object(const ObjectRecord& obj, std::size_t n_points, Rng& rng) {
  if (obj.count < 1) throw ConfigError("object count must be >= 1");
  const auto rgb = color_rgb(obj.color);
  const std::size_t copies = static_cast<std::size_t>(obj.count);
  const double scale = copies == 1 ? 1.0 : 0.45;
  std::vector<float> pts;
  pts.reserve(n_points * kPointDims);
  for (std::size_t i = 0; i < n_points; ++i) {
    const std::size_t copy = i * copies / n_points;
    const double offset = copies == 1 ? 0.0 : (static_cast<double>(copy) - (copies - 1) / 2.0) * 1.0;
    const Vec3 p = sample_primitive(obj.shape, rng);
    pts.push_back(static_cast<float>(p.x * scale + offset));
    pts.push_back(static_cast<float>(p.y * scale));
    pts.push_back(static_cast<float>(p.z * scale));
    pts.insert(pts.end(), rgb.begin(), rgb.end());
  }
  return PointCloud(n_points, std::move(pts));
}

bool mentions_label(std::string_view response, std::string_view label) {
  const auto target = lower(label), target_plural = plural(target);
  std::string word;
  auto check = [&] { return !word.empty() && (word == target || word == target_plural); };
  for (char c : response) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      if (check()) return true;
      word.clear();
    }
  }
  return check();
}

void gen_synthetic(const fs::path& dir, const GenOptions& opts) {
  if (opts.objects < 1) throw ConfigError("gen_synthetic: need at least one object");
  fs::create_directories(dir / "clouds");
  Rng rng(derive_seed(opts.seed, "dataset"));
  std::ofstream objects(dir / "objects.jsonl", std::ios::binary);
  std::ofstream instructions(dir / "instructions.jsonl", std::ios::binary);
  if (!objects || !instructions) throw Error("io", "cannot write dataset files under '" + dir.string() + "'");

  const auto write_sample = [&](const std::string& cloud, SampleKind kind, const std::vector<Turn>& turns) {
    json j;
    j["cloud"] = cloud;
    j["kind"] = std::string(to_string(kind));
    j["turns"] = json::array();
    for (const auto& t : turns) j["turns"].push_back({{"q", t.q}, {"a", t.a}});
    instructions << j.dump() << '\n';
  };

  static const std::vector<std::string> brief_prompts{"What is this?", "This is an object of",
                                                      "Describe this object briefly."};
  for (std::size_t i = 0; i < opts.objects; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clouds/%06zu.pcf", i);
    ObjectRecord obj;
    obj.cloud = name;
    obj.shape = shape_names()[rng.below(shape_names().size())];
    obj.color = color_names()[rng.below(color_names().size())];
    obj.count = 1 + static_cast<int>(rng.below(3));
    obj.caption = brief_caption(obj);

    Rng cloud_rng(derive_seed(opts.seed, obj.cloud));
    save_point_cloud(dir / obj.cloud, sample_object(obj, opts.points, cloud_rng));

    json o{{"cloud", obj.cloud}, {"shape", obj.shape}, {"color", obj.color},
           {"count", obj.count}, {"caption", obj.caption}};
    objects << o.dump() << '\n';

    for (const auto& prompt : brief_prompts) {
      write_sample(obj.cloud, SampleKind::brief_caption, {{prompt, obj.caption}});
    }
    write_sample(obj.cloud, SampleKind::detailed_caption,
                 {{"Describe this object in detail.", detailed_caption(obj)}});
    auto pool = question_pool(obj);
    for (const auto& turn : pool) write_sample(obj.cloud, SampleKind::single_round, {turn});
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(2 + rng.below(2));
    write_sample(obj.cloud, SampleKind::multi_round, pool);
  }
  if (!objects || !instructions) throw Error("io", "write failed under '" + dir.string() + "'");
}

std::vector<std::size_t> Dataset::indices_of(SampleKind kind) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].kind == kind) out.push_back(i);
  }
  return out;
}

const ObjectRecord* Dataset::object_for(std::string_view cloud) const {
  for (const auto& o : objects) {
    if (o.cloud == cloud) return &o;
  }
  return nullptr;
}

namespace {

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open '" + path.string() + "'");
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.root = dir;
  try {
    for (const auto& o : read_jsonl(dir / "objects.jsonl")) {
      d.objects.push_back({o.at("cloud").get<std::string>(), o.at("shape").get<std::string>(),
                           o.at("color").get<std::string>(), o.at("count").get<int>(),
                           o.at("caption").get<std::string>()});
    }
    for (const auto& s : read_jsonl(dir / "instructions.jsonl")) {
      InstructionSample sample;
      sample.cloud = s.at("cloud").get<std::string>();
      sample.kind = parse_sample_kind(s.at("kind").get<std::string>());
      for (const auto& t : s.at("turns")) {
        sample.turns.push_back({t.at("q").get<std::string>(), t.at("a").get<std::string>()});
      }
      const bool single = sample.kind == SampleKind::brief_caption ||
                          sample.kind == SampleKind::detailed_caption;
      if (single ? sample.turns.size() != 1
                 : sample.kind == SampleKind::multi_round ? sample.turns.size() < 2
                                                          : sample.turns.empty()) {
        throw FormatError("instructions.jsonl: " + std::string(to_string(sample.kind)) +
                          " sample for '" + sample.cloud + "' has " +
                          std::to_string(sample.turns.size()) + " turns");
      }
      d.samples.push_back(std::move(sample));
    }
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return d;
}

// ---- batch mixing ---------------------------------------------------------

MixedBatches::MixedBatches(const Dataset& data, MixPlan plan, std::uint64_t seed)
    : plan_(std::move(plan)), rng_(derive_seed(seed, "mixed_batches")) {
  if (plan_.empty()) throw ConfigError("mixed_batches: empty mix plan");
  for (const auto& k : plan_) {
    if (k.ratio < 1 || k.batch < 1) {
      throw ConfigError("mixed_batches: " + std::string(to_string(k.kind)) +
                        " needs positive batch size and ratio");
    }
    Pool pool;
    pool.items = data.indices_of(k.kind);
    if (pool.items.empty()) {
      throw ConfigError("mixed_batches: dataset has no " + std::string(to_string(k.kind)) + " samples");
    }
    pool.pos = pool.items.size();
    pools_.push_back(std::move(pool));
    window_size_ += k.ratio;
  }
  window_pos_ = window_size_;
}

Batch MixedBatches::next() {
  if (window_pos_ == window_size_) {
    window_.clear();
    for (std::size_t i = 0; i < plan_.size(); ++i) window_.insert(window_.end(), plan_[i].ratio, i);
    rng_.shuffle(window_.begin(), window_.end());
    window_pos_ = 0;
  }
  const std::size_t which = window_[window_pos_++];
  auto& pool = pools_[which];
  Batch b{plan_[which].kind, {}};
  for (std::size_t i = 0; i < plan_[which].batch; ++i) {
    if (pool.pos == pool.items.size()) {
      pool.order = pool.items;
      rng_.shuffle(pool.order.begin(), pool.order.end());
      pool.pos = 0;
    }
    b.samples.push_back(pool.order[pool.pos++]);
  }
  return b;
}

}  // namespace mqe
