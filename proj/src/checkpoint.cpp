#include "mqe_align/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "mqe_align/error.hpp"

namespace mqe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename Real>
constexpr const char* dtype_name() {
  return sizeof(Real) == 4 ? "float32" : "float64";
}

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw LoadError("checkpoint: no manifest.json in '" + dir.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("checkpoint: unreadable manifest.json: " + std::string(e.what()));
  }
}

}  // namespace

template <typename Real>
void save_checkpoint(const fs::path& dir, const ParameterManifest& manifest,
                     const ParameterStore<Real>& store, const CheckpointInfo& info) {
  fs::remove_all(dir / "tensors");
  fs::create_directories(dir / "tensors");
  json doc;
  doc["format"] = "mqe-align-checkpoint/1";
  doc["stage"] = info.stage;
  doc["step"] = info.step;
  doc["config_hash"] = info.config_hash;
  doc["dtype"] = dtype_name<Real>();
  doc["tensors"] = json::array();
  for (const auto& e : manifest.entries()) {
    const auto& t = store.at(e.path);
    const std::string file = "tensors/" + e.path + ".bin";
    const std::size_t bytes = t.numel() * sizeof(Real);
    std::ofstream out(dir / file, std::ios::binary);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(bytes));
    if (!out) throw Error("io", "checkpoint: write failed for '" + (dir / file).string() + "'");
    doc["tensors"].push_back({{"path", e.path},
                              {"shape", e.shape},
                              {"module", std::string(to_string(e.module))},
                              {"kind", std::string(to_string(e.kind))},
                              {"file", file},
                              {"bytes", bytes}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << doc.dump(1) << '\n';
  if (!out) throw Error("io", "checkpoint: write failed for manifest.json");
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const auto doc = read_manifest(dir);
  try {
    return {doc.at("stage").get<int>(), doc.at("step").get<std::int64_t>(),
            doc.at("config_hash").get<std::string>()};
  } catch (const json::exception& e) {
    throw LoadError("checkpoint: malformed manifest.json: " + std::string(e.what()));
  }
}

template <typename Real>
CheckpointInfo load_checkpoint(const fs::path& dir, const ParameterManifest& manifest,
                               ParameterStore<Real>& store, const std::string& expected_hash,
                               bool allow_hash_mismatch, std::ostream* warn) {
  const auto doc = read_manifest(dir);
  const auto info = read_checkpoint_info(dir);
  if (info.config_hash != expected_hash) {
    const std::string msg = "checkpoint config hash " + info.config_hash +
                            " differs from the current config " + expected_hash;
    if (!allow_hash_mismatch) throw LoadError(msg + " (pass the override flag to load anyway)");
    if (warn) *warn << "warning: " << msg << "; loading anyway\n";
  }
  if (doc.value("dtype", "") != dtype_name<Real>()) {
    throw LoadError("checkpoint: dtype " + doc.value("dtype", "?") + " but model uses " +
                    dtype_name<Real>());
  }
  std::map<std::string, json> by_path;
  for (const auto& t : doc.at("tensors")) by_path[t.at("path").get<std::string>()] = t;

  for (const auto& e : manifest.entries()) {
    auto it = by_path.find(e.path);
    if (it == by_path.end()) throw LoadError("checkpoint: missing tensor '" + e.path + "'");
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != e.shape) {
      throw LoadError("checkpoint: tensor '" + e.path + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(e.shape));
    }
    const fs::path file = dir / it->second.at("file").get<std::string>();
    std::ifstream in(file, std::ios::binary);
    if (!in) throw LoadError("checkpoint: cannot open blob for tensor '" + e.path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto& t = store.at(e.path);
    const std::size_t need = t.numel() * sizeof(Real);
    if (bytes.size() != need) {
      throw LoadError("checkpoint: blob '" + file.string() + "' for tensor '" + e.path + "' has " +
                      std::to_string(bytes.size()) + " bytes, expected " + std::to_string(need));
    }
    std::memcpy(t.data().data(), bytes.data(), need);
  }
  return info;
}

template void save_checkpoint<float>(const fs::path&, const ParameterManifest&,
                                     const ParameterStore<float>&, const CheckpointInfo&);
template void save_checkpoint<double>(const fs::path&, const ParameterManifest&,
                                      const ParameterStore<double>&, const CheckpointInfo&);
template CheckpointInfo load_checkpoint<float>(const fs::path&, const ParameterManifest&,
                                               ParameterStore<float>&, const std::string&, bool,
                                               std::ostream*);
template CheckpointInfo load_checkpoint<double>(const fs::path&, const ParameterManifest&,
                                                ParameterStore<double>&, const std::string&, bool,
                                                std::ostream*);

}  // namespace mqe
