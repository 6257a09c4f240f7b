// Python bindings: synthetic data, leakage metrics, config and report helpers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "partleak/harness.hpp"
#include "partleak/leakmetrics.hpp"
#include "partleak/synthgen.hpp"

namespace py = pybind11;
using namespace partleak;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<int, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_numpy(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
  py::array_t<T> a(shape);
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

template <typename A>
std::span<const typename A::value_type> view(const A& a) {
  return {a.data(), static_cast<std::size_t>(a.size())};
}

void require_dims(const py::array& a, py::ssize_t nd, const char* name) {
  if (a.ndim() != nd) throw ValidationError(std::string(name) + " must have " + std::to_string(nd) + " dimensions");
}

py::dict split_dict(const synth::Split& s, const synth::DatasetSpec& spec) {
  const auto n = static_cast<py::ssize_t>(s.n), S = static_cast<py::ssize_t>(spec.image_size),
             G = static_cast<py::ssize_t>(spec.parts), A = static_cast<py::ssize_t>(spec.attributes());
  py::dict d;
  d["images"] = to_numpy(s.images, {n, 3, S, S});
  d["attributes"] = to_numpy(s.attributes, {n, A});
  d["masks"] = to_numpy(s.masks, {n, G, S, S});
  d["keypoints"] = to_numpy(s.keypoints, {n, G, 2});
  d["colors"] = to_numpy(s.colors, {n, G});
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Part-level leakage metrics and synthetic part/attribute data";
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("version", &harness::version);

  py::class_<synth::DatasetSpec>(m, "DatasetSpec")
      .def(py::init<>())
      .def_readwrite("parts", &synth::DatasetSpec::parts)
      .def_readwrite("colors", &synth::DatasetSpec::colors)
      .def_readwrite("rho", &synth::DatasetSpec::rho)
      .def_readwrite("n_train", &synth::DatasetSpec::n_train)
      .def_readwrite("n_val", &synth::DatasetSpec::n_val)
      .def_readwrite("n_test", &synth::DatasetSpec::n_test)
      .def_readwrite("image_size", &synth::DatasetSpec::image_size)
      .def_readwrite("patch_size", &synth::DatasetSpec::patch_size)
      .def_readwrite("margin", &synth::DatasetSpec::margin)
      .def_readwrite("noise_std", &synth::DatasetSpec::noise_std)
      .def_readwrite("background", &synth::DatasetSpec::background)
      .def_readwrite("seed", &synth::DatasetSpec::seed)
      .def("validate", &synth::DatasetSpec::validate)
      .def("to_json", [](const synth::DatasetSpec& s) { return synth::spec_to_json(s); })
      .def_static("from_json", &synth::spec_from_json);

  py::class_<synth::Dataset>(m, "Dataset")
      .def_readonly("spec", &synth::Dataset::spec)
      .def_property_readonly("palette",
                             [](const synth::Dataset& d) {
                               std::vector<double> flat;
                               for (const auto& c : d.palette) flat.insert(flat.end(), c.begin(), c.end());
                               return to_numpy(flat, {static_cast<py::ssize_t>(d.palette.size()), 3});
                             })
      .def_property_readonly("attribute_names", [](const synth::Dataset& d) { return d.attribute_spec().names; })
      .def_property_readonly("group_of", [](const synth::Dataset& d) { return d.attribute_spec().group_of; })
      .def("split", [](const synth::Dataset& d, const std::string& name) { return split_dict(d.split(name), d.spec); },
           py::arg("name"), "Arrays of one split: images, attributes, masks, keypoints, colors.");

  m.def("generate", &synth::generate, py::arg("spec"));
  m.def("write_dataset", &synth::write_dataset, py::arg("dataset"), py::arg("path"));
  m.def("read_dataset", &synth::read_dataset, py::arg("path"));

  m.def(
      "average_precision",
      [](const F64& scores, const F64& labels) -> std::optional<double> {
        if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
        return leak::average_precision(view(scores), view(labels));
      },
      py::arg("scores"), py::arg("labels"), "AP of one attribute; None without positives.");

  m.def(
      "mean_ap",
      [](const F64& scores, const F64& labels) {
        require_dims(scores, 2, "scores");
        if (scores.shape(0) != labels.shape(0) || scores.size() != labels.size()) {
          throw ValidationError("scores and labels must share shape [n, A]");
        }
        const auto n = static_cast<std::size_t>(scores.shape(0)), A = static_cast<std::size_t>(scores.shape(1));
        std::vector<std::size_t> cols(A);
        for (std::size_t a = 0; a < A; ++a) cols[a] = a;
        auto r = leak::mean_ap(view(scores), view(labels), n, A, cols);
        return py::make_tuple(r.value, r.skipped);
      },
      py::arg("scores"), py::arg("labels"), "(mAP over attributes with positives, skipped attribute indices).");

  m.def(
      "part_specificity",
      [](const F64& map, const F64& contingency, double tau) {
        require_dims(map, 2, "map");
        require_dims(contingency, 2, "contingency");
        leak::ProbeMatrix pm;
        pm.parts = static_cast<std::size_t>(map.shape(0));
        pm.groups = static_cast<std::size_t>(map.shape(1));
        pm.map.assign(map.data(), map.data() + map.size());
        leak::PartAssignment asg;
        asg.groups = static_cast<std::size_t>(contingency.shape(0));
        asg.parts = static_cast<std::size_t>(contingency.shape(1));
        if (asg.groups != pm.groups || asg.parts != pm.parts) {
          throw ValidationError("map is [K, G] and contingency must be [G, K]");
        }
        asg.c.assign(contingency.data(), contingency.data() + contingency.size());
        leak::assign_parts(asg, tau);
        auto r = leak::part_specificity(pm, asg);
        return py::make_tuple(r.ps, r.per_group);
      },
      py::arg("map"), py::arg("contingency"), py::arg("tau") = 0.25,
      "(PS, per-group PS) from a probe mAP matrix [K, G] and part/keypoint contingency [G, K].");

  m.def(
      "mppo",
      [](const F64& logits, const F64& labels, const U8& discovered, const U8& gt, const std::vector<std::size_t>& group_of,
         const std::string& mode) {
        require_dims(logits, 3, "logits");
        require_dims(discovered, 3, "discovered");
        require_dims(gt, 3, "gt");
        const auto n = static_cast<std::size_t>(logits.shape(0)), K = static_cast<std::size_t>(logits.shape(1)),
                   cells = static_cast<std::size_t>(discovered.shape(2));
        leak::AttributeSpec spec;
        spec.group_of = group_of;
        spec.groups = static_cast<std::size_t>(gt.shape(1));
        for (std::size_t a = 0; a < group_of.size(); ++a) spec.names.push_back("a" + std::to_string(a));
        leak::KStarMode km;
        if (mode == "per_sample") km = leak::KStarMode::PerSample;
        else if (mode == "per_attribute_mean") km = leak::KStarMode::PerAttributeMean;
        else throw ValidationError("mode must be per_sample or per_attribute_mean");
        auto r = leak::mppo(view(logits), view(labels), view(discovered), view(gt), n, K, cells, spec, km);
        return py::make_tuple(r.mppo, r.per_attribute);
      },
      py::arg("logits"), py::arg("labels"), py::arg("discovered"), py::arg("gt"), py::arg("group_of"),
      py::arg("mode") = "per_sample",
      "(MPPO, per-attribute overlap) from part logits [n, K, A], labels [n, A], discovered masks [n, K, cells] "
      "and ground-truth masks [n, G, cells].");

  m.def(
      "nmi_ari",
      [](const I32& predicted, const I32& truth) {
        auto r = leak::nmi_ari(view(predicted), view(truth));
        return py::make_tuple(r.nmi, r.ari);
      },
      py::arg("predicted"), py::arg("truth"), "(NMI with arithmetic normalisation, ARI).");

  m.def(
      "canonical_config",
      [](const std::string& text) { return harness::config_to_json(harness::config_from_json(text)); },
      py::arg("json_text"), "Every experiment config field with defaults filled in, as sorted JSON.");
  m.def(
      "config_hash", [](const std::string& text) { return harness::config_hash(harness::config_from_json(text)); },
      py::arg("json_text"));
  m.def("make_report", &harness::make_report, py::arg("run_dirs"),
        "report.csv text aggregated over run directories.");
}
