#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mqe_align/budget.hpp"
#include "mqe_align/error.hpp"
#include "mqe_align/gradcheck.hpp"
#include "mqe_align/trainer.hpp"

namespace py = pybind11;
using namespace mqe;

namespace {

py::dict budget_dict(const ParamBudget& b) {
  py::dict modules, stages;
  for (const auto& r : b.modules) modules[py::str(r.name)] = r.exact;
  for (const auto& r : b.stages) stages[py::str(r.name)] = r.exact;
  py::dict out;
  out["modules"] = modules;
  out["stages"] = stages;
  out["trainable_union"] = b.trainable_union;
  out["total"] = b.total;
  return out;
}

py::dict stage_dict(const StageResult& r) {
  py::dict d;
  d["stage"] = r.plan.stage;
  d["steps"] = r.steps;
  d["losses"] = r.losses;
  d["probe_before"] = r.probe_before;
  d["probe_after"] = r.probe_after;
  d["violations"] = r.violations;
  d["changed"] = r.changed;
  return d;
}

// Decoded answers are raw bytes from the model and need not be valid UTF-8.
py::str lenient_str(const std::string& s) {
  return py::reinterpret_steal<py::str>(
      PyUnicode_DecodeUTF8(s.data(), static_cast<Py_ssize_t>(s.size()), "replace"));
}

py::dict object_dict(const ObjectRecord& o) {
  py::dict d;
  d["cloud"] = o.cloud;
  d["shape"] = o.shape;
  d["color"] = o.color;
  d["count"] = o.count;
  d["caption"] = o.caption;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point-cloud / language alignment with a mixture of query experts";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<SequenceError>(m, "SequenceError", base.ptr());
  py::register_exception<AuditError>(m, "AuditError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  py::class_<Config>(m, "Config")
      .def_static("profile", &Config::profile, py::arg("name"))
      .def_static("parse", &Config::parse, py::arg("text"), py::arg("origin") = "<string>")
      .def_static("load", &Config::load, py::arg("path"))
      .def("set", &Config::set, py::arg("key"), py::arg("value"))
      .def("get", &Config::str, py::arg("key"))
      .def("__getitem__", &Config::str)
      .def("__setitem__", &Config::set)
      .def("__contains__", &Config::has)
      .def("dump", &Config::dump)
      .def("hash", &Config::hash_hex)
      .def("keys", [](const Config& c) {
        std::vector<std::string> out;
        for (const auto& [k, v] : c.values()) out.push_back(k);
        return out;
      });

  m.def("param_budget", [](const Config& cfg) { return budget_dict(param_budget(cfg)); }, py::arg("config"));
  m.def("budget_table", [](const Config& cfg) { return render_budget_table(param_budget(cfg)); },
        py::arg("config"));

  m.def("lr_at",
        [](double warmup_lr, double init_lr, double min_lr, std::int64_t warmup_steps, std::int64_t total_steps,
           std::int64_t step) {
          LrSchedule s{warmup_lr, init_lr, min_lr, warmup_steps, total_steps};
          s.validate();
          return lr_at(s, step);
        },
        py::arg("warmup_lr"), py::arg("init_lr"), py::arg("min_lr"), py::arg("warmup_steps"),
        py::arg("total_steps"), py::arg("step"));

  m.def("gen_synthetic",
        [](const std::filesystem::path& dir, std::size_t objects, std::size_t points, std::uint64_t seed) {
          gen_synthetic(dir, {objects, points, seed});
        },
        py::arg("dir"), py::arg("objects") = 64, py::arg("points") = 256, py::arg("seed") = 7);
  m.def("load_objects",
        [](const std::filesystem::path& dir) {
          py::list out;
          for (const auto& o : load_dataset(dir).objects) out.append(object_dict(o));
          return out;
        },
        py::arg("dir"));

  m.def("gradcheck",
        [](const Config& cfg, std::uint64_t seed) {
          GradcheckOptions opts;
          opts.seed = seed;
          const auto r = run_gradcheck(cfg, opts);
          py::dict blocks;
          for (const auto& row : r.rows) blocks[py::str(row.block)] = row.rel_error;
          py::dict d;
          d["blocks"] = blocks;
          d["pass"] = r.pass();
          d["unselected_zero"] = r.unselected_zero;
          return d;
        },
        py::arg("config"), py::arg("seed") = 7);

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const Config& cfg, const std::filesystem::path& data) {
             return std::make_unique<Trainer>(cfg, load_dataset(data));
           }),
           py::arg("config"), py::arg("data"))
      .def_property_readonly("completed_stage", &Trainer::completed_stage)
      .def("pretrain_lm", [](Trainer& t) { return t.pretrain_lm(); })
      .def("run_stage", [](Trainer& t, int stage) { return stage_dict(t.run_stage(stage)); }, py::arg("stage"))
      .def("save", &Trainer::save, py::arg("dir"))
      .def("load", [](Trainer& t, const std::filesystem::path& dir,
                      bool allow_mismatch) { t.load(dir, allow_mismatch); },
           py::arg("dir"), py::arg("allow_config_mismatch") = false)
      .def("answer", [](Trainer& t, const std::string& cloud, const std::string& q) { return lenient_str(t.answer(cloud, q)); },
           py::arg("cloud"), py::arg("question"))
      .def("accuracy",
           [](Trainer& t, const std::string& prompt) {
             return t.evaluate_classification(parse_prompt_kind(prompt)).accuracy();
           },
           py::arg("prompt") = "I")
      .def("caption_match_rate", &Trainer::caption_match_rate);
}
