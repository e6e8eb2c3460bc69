#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "xkt/commands.hpp"
#include "xkt/config.hpp"
#include "xkt/data.hpp"
#include "xkt/errors.hpp"
#include "xkt/eval.hpp"
#include "xkt/model.hpp"

namespace py = pybind11;
using nlohmann::json;

// JSON crosses the boundary as text; the Python package decodes it.
namespace {

xkt::RunConfig config_of(const std::string& text) { return xkt::parse_config(json::parse(text)); }

std::vector<std::size_t> all_students(const xkt::data::Dataset& ds) {
  std::vector<std::size_t> idx(ds.students.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

py::dict report_dict(const xkt::eval::Report& r) {
  py::dict d = py::module_::import("json").attr("loads")(xkt::eval::to_json(r).dump());
  py::list preds;
  for (const auto& p : r.predictions) preds.append(py::make_tuple(p.student, p.step, p.concept_id, p.score, p.label));
  d["predictions"] = preds;
  return d;
}

struct Model {
  xkt::model::Checkpoint ckpt;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the xkt knowledge-tracing package";

  auto base = py::register_exception<xkt::ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<xkt::NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<xkt::ConfigError>(m, "ConfigError", base.ptr());

  m.attr("float32") = std::is_same_v<xkt::real, float>;

  m.def("normalize_config", [](const std::string& text) { return config_of(text).to_json().dump(); });
  m.def("config_hash", [](const std::string& text) { return config_of(text).hash(); });

  m.def(
      "compute_metrics",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        auto r = xkt::eval::compute_metrics(scores, labels);
        return xkt::eval::to_json(r).dump();
      },
      py::arg("scores"), py::arg("labels"));

  auto command = [&m](const char* name, json (*fn)(const xkt::RunConfig&)) {
    m.def(
        name,
        [fn](const std::string& text) {
          auto cfg = config_of(text);
          py::gil_scoped_release release;
          return fn(cfg).dump();
        },
        py::arg("config"));
  };
  command("prep", &xkt::command_prep);
  command("synth", &xkt::command_synth);
  command("train", &xkt::command_train);

  m.def(
      "evaluate",
      [](const std::string& text, bool dump) {
        auto cfg = config_of(text);
        py::gil_scoped_release release;
        return xkt::command_eval(cfg, dump).dump();
      },
      py::arg("config"), py::arg("dump") = false);
  m.def(
      "predict",
      [](const std::string& text, const std::string& input) {
        auto cfg = config_of(text);
        py::gil_scoped_release release;
        return xkt::command_predict(cfg, input).dump();
      },
      py::arg("config"), py::arg("input"));
  m.def(
      "gradcheck",
      [](const std::string& text) {
        auto cfg = config_of(text);
        xkt::GradcheckReport r;
        {
          py::gil_scoped_release release;
          r = xkt::model_gradcheck(cfg);
        }
        py::dict d;
        d["max_rel_error"] = r.result.max_rel_error;
        d["worst_parameter"] = r.worst_parameter;
        d["tensors"] = r.tensors;
        d["threshold"] = cfg.gradcheck.threshold;
        return d;
      },
      py::arg("config"));
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = xkt::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));

  py::class_<xkt::data::Dataset>(m, "Dataset")
      .def_static(
          "from_csv", [](const std::string& path) { return xkt::data::preprocess(xkt::data::ingest_csv(path)); },
          py::arg("path"))
      .def_static("load", [](const std::string& path) { return xkt::data::load_dataset(path); }, py::arg("path"))
      .def("save", [](const xkt::data::Dataset& ds, const std::string& path) { xkt::data::save_dataset(ds, path); })
      .def_readonly("questions", &xkt::data::Dataset::questions)
      .def_readonly("concepts", &xkt::data::Dataset::concepts)
      .def_property_readonly("stats_json", [](const xkt::data::Dataset& ds) { return xkt::data::stats_json(ds.stats).dump(); })
      .def_property_readonly("students",
                             [](const xkt::data::Dataset& ds) {
                               std::vector<std::string> ids;
                               for (const auto& s : ds.students) ids.push_back(s.student);
                               return ids;
                             })
      .def("sequence",
           [](const xkt::data::Dataset& ds, std::size_t i) {
             py::list rows;
             for (const auto& s : ds.students.at(i).steps) {
               rows.append(py::make_tuple(s.question, s.concept_id, s.response, s.timestamp));
             }
             return rows;
           })
      .def("__len__", [](const xkt::data::Dataset& ds) { return ds.students.size(); });

  py::class_<Model>(m, "Model")
      .def_static("load", [](const std::string& path) { return Model{xkt::model::load_checkpoint(path)}; },
                  py::arg("path"))
      .def_property_readonly("name", [](const Model& mo) { return xkt::model::kind_name(mo.ckpt.model->config().kind); })
      .def_property_readonly("config_hash", [](const Model& mo) { return mo.ckpt.config_hash; })
      .def_property_readonly("num_parameters", [](const Model& mo) { return mo.ckpt.model->parameters().numel(); })
      .def(
          "one_step",
          [](Model& mo, const xkt::data::Dataset& ds, std::size_t history, std::size_t batch_size) {
            auto r = xkt::eval::eval_one_step(*mo.ckpt.model, ds, all_students(ds), {history, batch_size});
            return report_dict(r);
          },
          py::arg("dataset"), py::arg("history") = 100, py::arg("batch_size") = 512)
      .def(
          "multi_step",
          [](Model& mo, const xkt::data::Dataset& ds, std::size_t horizon, std::size_t history,
             std::size_t batch_size) {
            auto r = xkt::eval::eval_multi_step(*mo.ckpt.model, ds, all_students(ds), horizon, {history, batch_size});
            return report_dict(r);
          },
          py::arg("dataset"), py::arg("horizon"), py::arg("history") = 100, py::arg("batch_size") = 512)
      .def(
          "multi_concept",
          [](Model& mo, const xkt::data::Dataset& ds, std::size_t history, std::size_t batch_size) {
            auto r = xkt::eval::eval_multi_concept(*mo.ckpt.model, ds, all_students(ds), {history, batch_size});
            return report_dict(r);
          },
          py::arg("dataset"), py::arg("history") = 100, py::arg("batch_size") = 512);
}
