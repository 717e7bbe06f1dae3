#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sct/commands.hpp"
#include "sct/data.hpp"
#include "sct/errors.hpp"
#include "sct/evaluation.hpp"
#include "sct/model.hpp"

namespace py = pybind11;
using namespace sct;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// volumes: [N, C, S, H, W]; NaN-filled volumes mark absent tokens.
StudySample study_from_array(const Array& volumes, const std::vector<int>& levels, const std::vector<int>& sequences) {
  if (volumes.ndim() != 5) throw DimensionError("volumes must have shape [N, C, S, H, W]");
  const auto n = static_cast<std::size_t>(volumes.shape(0)), c = static_cast<std::size_t>(volumes.shape(1));
  const auto s = static_cast<std::size_t>(volumes.shape(2)), h = static_cast<std::size_t>(volumes.shape(3)),
             w = static_cast<std::size_t>(volumes.shape(4));
  if (levels.size() != n) throw DimensionError("need one level per vertebra");
  if (sequences.size() != c) throw DimensionError("need one sequence id per channel");
  StudySample study;
  study.id = "python";
  study.levels = levels;
  study.sequences = sequences;
  const double* data = volumes.data();
  const std::size_t block = s * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      VertebraToken t;
      t.level = levels[i];
      t.sequence = sequences[j];
      t.volume = Volume(s, h, w);
      const double* src = data + (i * c + j) * block;
      std::copy(src, src + block, t.volume.voxels.begin());
      t.present = !std::isnan(src[0]);
      study.tokens.push_back(std::move(t));
    }
  }
  return study;
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Spine context transformer: model inference, metrics, label rules and CLI commands";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_OSError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_OSError);

  m.def("roc_auc", [](const std::vector<double>& scores, const std::vector<int>& labels) { return roc_auc(scores, labels); },
        py::arg("scores"), py::arg("labels"));
  m.def(
      "balanced_accuracy",
      [](const std::vector<int>& predictions, const std::vector<int>& labels, std::size_t n_classes) {
        return balanced_accuracy(predictions, labels, n_classes);
      },
      py::arg("predictions"), py::arg("labels"), py::arg("n_classes"));

  m.def("level_names", &default_level_names);

  // Annotation JSON text in, {condition: [label per level]} out, labels as
  // "positive" / "negative" / "unknown".
  m.def(
      "derive_labels",
      [](const std::string& annotation_json, const std::vector<std::string>& levels) {
        const auto& names = default_level_names();
        const AnnotationRecord record = annotation_from_json(nlohmann::json::parse(annotation_json), names);
        std::vector<int> ids;
        for (const auto& l : levels) ids.push_back(level_index(names, l));
        const LabelTriple t = derive_labels(record, ids);
        static const char* text[] = {"negative", "positive", "unknown"};
        py::dict out;
        for (std::size_t k = 0; k < kNumConditions; ++k) {
          py::list column;
          for (Label l : t.vertebra[k]) column.append(text[static_cast<int>(l)]);
          out[kConditionNames[k]] = column;
        }
        return out;
      },
      py::arg("annotation_json"), py::arg("levels"));

  py::class_<SctModel>(m, "Model")
      .def(py::init([](const std::string& config_json, std::uint64_t seed) {
             return SctModel(SctConfig::from_json(nlohmann::json::parse(config_json)), seed);
           }),
           py::arg("config_json"), py::arg("seed"))
      .def_static("load", &load_model, py::arg("path"))
      .def("save", [](const SctModel& self, const std::string& path) { save_model(self, path); }, py::arg("path"))
      .def_property_readonly("config_json", [](const SctModel& self) { return self.config().to_json().dump(); })
      .def_property_readonly("parameter_count", &SctModel::parameter_count)
      .def_property_readonly("task_names",
                             [](const SctModel& self) {
                               std::vector<std::string> names;
                               for (const TaskSpec& t : self.config().tasks) names.push_back(t.name);
                               return names;
                             })
      // Raw logits per task, [N, n_logits]. Volumes are normalized first.
      .def(
          "predict",
          [](const SctModel& self, const Array& volumes, const std::vector<int>& levels, const std::vector<int>& sequences) {
            const StudySample study = normalize_study(study_from_array(volumes, levels, sequences));
            ModelOutput out;
            {
              py::gil_scoped_release release;
              out = self.forward(study);
            }
            py::dict result;
            for (std::size_t t = 0; t < self.config().tasks.size(); ++t) {
              result[self.config().tasks[t].name.c_str()] = to_array(out.logits[t]);
            }
            return result;
          },
          py::arg("volumes"), py::arg("levels"), py::arg("sequences"))
      // Slice attention per (vertebra, sequence); None for absent tokens.
      .def(
          "slice_attention",
          [](const SctModel& self, const Array& volumes, const std::vector<int>& levels, const std::vector<int>& sequences) {
            const StudySample study = normalize_study(study_from_array(volumes, levels, sequences));
            return self.forward(study).slice_weights;
          },
          py::arg("volumes"), py::arg("levels"), py::arg("sequences"));

  auto bind_command = [&m](const char* name, auto fn) {
    m.def(
        name,
        [fn](const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
          py::gil_scoped_release release;
          return fn({config, seed, out});
        },
        py::arg("config"), py::arg("out"), py::arg("seed") = py::none());
  };
  bind_command("synth", cmd_synth);
  bind_command("train", cmd_train);
  bind_command("evaluate", cmd_eval);
  bind_command("attribute", cmd_attribute);
  bind_command("gradcheck", cmd_gradcheck);
}
