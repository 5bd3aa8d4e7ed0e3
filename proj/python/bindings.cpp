#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bicanet/suite.hpp"
#include "bicanet/train.hpp"

namespace py = pybind11;
using namespace bicanet;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> image_from_numpy(const py::array& array) {
  if (array.ndim() != 3) throw ShapeError("rank", "expected a 3-d image array");
  if (array.dtype().is(py::dtype::of<std::uint8_t>())) {
    const U8Array a = array;
    if (a.shape(2) != 3) throw ShapeError("channels", "uint8 images must be (height, width, 3)");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    Tensor<float> t(Shape{1, 3, h, w});
    const auto v = a.unchecked<3>();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(0, c, y, x) = static_cast<float>(v(y, x, c)) / 255.0f;
    return t;
  }
  const F32Array a = array;
  if (a.shape(0) != 3) throw ShapeError("channels", "float images must be (3, height, width)");
  const int h = static_cast<int>(a.shape(1)), w = static_cast<int>(a.shape(2));
  Tensor<float> t(Shape{1, 3, h, w});
  std::copy(a.data(), a.data() + a.size(), t.data().begin());
  return t;
}

py::array_t<std::uint8_t> labels_to_numpy(const LabelMap& m) {
  py::array_t<std::uint8_t> out({m.h, m.w});
  std::copy(m.data.begin(), m.data.begin() + static_cast<std::ptrdiff_t>(m.h) * m.w, out.mutable_data());
  return out;
}

LabelMap labels_from_numpy(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("rank", "label maps must be 2-d (height, width)");
  LabelMap m(1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::dict row_to_dict(const MetricsRow& r) {
  py::list iou;
  for (const auto& v : r.iou) iou.append(v ? py::cast(*v) : py::none());
  py::dict d;
  d["epoch"] = r.epoch;
  d["split"] = r.split;
  d["iou"] = iou;
  d["miou"] = r.miou;
  d["pixel_accuracy"] = r.pixel_accuracy;
  d["final_score"] = r.final_score;
  return d;
}

py::dict loss_to_dict(const LossReport& r) {
  py::dict d;
  d["total"] = r.total;
  d["master"] = r.master;
  d["aux"] = py::make_tuple(r.aux[0], r.aux[1], r.aux[2], r.aux[3]);
  d["lambda"] = r.lambda;
  return d;
}

AbsentClassPolicy policy_from(const std::string& name) {
  if (name == "exclude") return AbsentClassPolicy::kExclude;
  if (name == "zero") return AbsentClassPolicy::kZero;
  throw ConfigError("absent-class policy must be \"exclude\" or \"zero\"");
}

Mode eval_mode(bool batch_stats) { return batch_stats ? Mode::kEvalBatchStats : Mode::kEval; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "BiCANet segmentation core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ArithmeticError);

  m.def("poly_lr", &poly_lr, py::arg("lr_base"), py::arg("iteration"), py::arg("max_iter"), py::arg("power") = 0.9);
  m.def("default_config_json", [] { return to_json(TrainConfig{}); });

  m.def("palette", [] {
    py::array_t<std::uint8_t> out({256, 3});
    auto v = out.mutable_unchecked<2>();
    for (int i = 0; i < 256; ++i)
      for (int c = 0; c < 3; ++c) v(i, c) = data::palette()[i][c];
    return out;
  });

  m.def("generate_sample", [](const std::string& spec_json, std::size_t index) {
    const data::SegSample s = data::generate_sample(synthetic_spec_from_json(spec_json), index);
    const Shape shape = s.image.shape();
    py::array_t<float> image({shape.c, shape.h, shape.w});
    std::copy(s.image.data().begin(), s.image.data().end(), image.mutable_data());
    return py::make_tuple(image, labels_to_numpy(s.labels));
  });

  m.def("gradcheck", [](const std::string& op) {
    py::list out;
    for (const auto& r : run_gradient_suite(op)) {
      py::dict d;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["relative_error"] = r.relative_error;
      d["checked"] = r.checked;
      d["skipped"] = r.skipped;
      out.append(d);
    }
    return out;
  }, py::arg("op") = "");

  py::class_<ConfusionMatrix>(m, "ConfusionMatrix")
      .def(py::init<int>(), py::arg("num_classes"))
      .def("accumulate", [](ConfusionMatrix& cm, const U8Array& pred, const U8Array& truth) {
        cm.accumulate(labels_from_numpy(pred), labels_from_numpy(truth));
      }, py::arg("prediction"), py::arg("truth"))
      .def("merge", &ConfusionMatrix::merge)
      .def_property_readonly("num_classes", &ConfusionMatrix::num_classes)
      .def_property_readonly("counted", &ConfusionMatrix::counted)
      .def_property_readonly("ignored", &ConfusionMatrix::ignored)
      .def_property_readonly("counts", [](const ConfusionMatrix& cm) {
        const int L = cm.num_classes();
        py::array_t<std::uint64_t> out({L, L});
        std::copy(cm.counts().begin(), cm.counts().end(), out.mutable_data());
        return out;
      })
      .def("class_iou", &ConfusionMatrix::class_iou)
      .def("miou", [](const ConfusionMatrix& cm, const std::string& absent) { return cm.miou(policy_from(absent)); },
           py::arg("absent") = "exclude")
      .def("pixel_accuracy", &ConfusionMatrix::pixel_accuracy)
      .def("final_score",
           [](const ConfusionMatrix& cm, const std::string& absent) { return cm.final_score(policy_from(absent)); },
           py::arg("absent") = "exclude");

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const std::string& json) { return std::make_unique<Trainer>(train_config_from_json(json)); }),
           py::arg("config_json"))
      .def("step", [](Trainer& t) { return loss_to_dict(t.step()); })
      .def("run", [](Trainer& t, std::optional<std::int64_t> limit) {
        py::list rows;
        std::vector<MetricsRow> produced;
        {
          py::gil_scoped_release release;
          produced = t.run(limit);
        }
        for (const auto& r : produced) rows.append(row_to_dict(r));
        return rows;
      }, py::arg("limit") = py::none())
      .def("evaluate", [](const Trainer& t, const std::string& split, bool batch_stats) {
        return row_to_dict(t.evaluate_split(split, 0, eval_mode(batch_stats)));
      }, py::arg("split") = "val", py::arg("batch_stats") = false)
      .def("save_checkpoint", [](const Trainer& t, const std::string& path) { save_checkpoint(path, t.checkpoint()); })
      .def("resume", [](Trainer& t, const std::string& path) { t.resume(path); })
      .def_property_readonly("iteration", &Trainer::iteration)
      .def_property_readonly("max_iter", &Trainer::max_iter)
      .def_property_readonly("losses", [](const Trainer& t) {
        std::vector<double> out;
        for (const auto& r : t.history()) out.push_back(r.total);
        return out;
      })
      .def_property_readonly("config_json", [](const Trainer& t) { return to_json(t.config()); });

  py::class_<LoadedModel>(m, "Model")
      .def(py::init([](const std::string& path) { return std::make_unique<LoadedModel>(load_model(path)); }),
           py::arg("checkpoint"))
      .def("predict", [](const LoadedModel& lm, const py::array& image, bool batch_stats) {
        return labels_to_numpy(predict_labels(lm.model, image_from_numpy(image), eval_mode(batch_stats)));
      }, py::arg("image"), py::arg("batch_stats") = false)
      .def("evaluate", [](const LoadedModel& lm, const std::string& split, bool batch_stats) {
        const auto samples = load_dataset_split(lm.config, split);
        return row_to_dict(summarize(evaluate(lm.model, samples, eval_mode(batch_stats)), 0, split,
                                     lm.config.absent_classes));
      }, py::arg("split") = "val", py::arg("batch_stats") = false)
      .def_readonly("iteration", &LoadedModel::iteration)
      .def_property_readonly("config_json", [](const LoadedModel& lm) { return to_json(lm.config); });
}
