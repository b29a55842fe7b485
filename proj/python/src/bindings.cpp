#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "voxelrcnn/checkpoint.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/eval.hpp"
#include "voxelrcnn/infer.hpp"
#include "voxelrcnn/phantom.hpp"
#include "voxelrcnn/pipeline.hpp"

namespace py = pybind11;
using namespace voxelrcnn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

FloatArray to_numpy(const Volume& v) {
  const Index3& d = v.dims();
  FloatArray a({d[0], d[1], d[2]});
  std::copy(v.voxels().begin(), v.voxels().end(), a.mutable_data());
  return a;
}

Volume from_numpy(const FloatArray& a, const Vec3& spacing, const Vec3& origin, ElementType type) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-d (z, y, x) array");
  const Index3 d{a.shape(0), a.shape(1), a.shape(2)};
  return Volume(d, spacing, origin, type, std::vector<float>(a.data(), a.data() + a.size()));
}

std::vector<std::uint8_t> to_bytes(const ByteArray& a) { return {a.data(), a.data() + a.size()}; }

Index3 shape3(const ByteArray& a) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-d (z, y, x) array");
  return {a.shape(0), a.shape(1), a.shape(2)};
}

ElementType parse_type(const std::string& s) {
  if (s == "int16") return ElementType::kInt16;
  if (s == "float32") return ElementType::kFloat32;
  if (s == "uint8") return ElementType::kUInt8;
  throw ArgumentError("element type must be int16, float32 or uint8");
}

py::dict froc_dict(const FrocResult& f) {
  py::dict d;
  d["cpm"] = f.cpm;
  d["sensitivity"] = std::vector<double>(f.sensitivity.begin(), f.sensitivity.end());
  d["fp_rates"] = std::vector<double>(kFrocRates.begin(), kFrocRates.end());
  d["fps_per_scan"] = f.fps_per_scan;
  d["sensitivity_curve"] = f.sensitivity_curve;
  d["thresholds"] = f.thresholds;
  d["n_scans"] = f.n_scans;
  d["n_gt"] = f.n_gt;
  d["n_tp"] = f.n_tp;
  d["n_fp"] = f.n_fp;
  return d;
}

// Model plus inference settings loaded from a run directory.
class Detector {
 public:
  Detector(const std::filesystem::path& checkpoint, const std::filesystem::path& config) {
    KeyValues kv;
    if (!config.empty()) kv = KeyValues::read(config);
    model_ = std::make_unique<VoxelRcnn>(ModelConfig::from_keyvalues(kv));
    infer_ = InferConfig::from_keyvalues(kv);
    load_checkpoint(checkpoint, model_->parameters());
  }

  std::vector<Candidate> detect(const FloatArray& scan, const Vec3& spacing, const Vec3& origin,
                                const std::string& scan_id, bool second_pass) const {
    const Volume v = from_numpy(scan, spacing, origin, ElementType::kInt16);
    py::gil_scoped_release release;
    std::vector<Candidate> c = infer_volume(v, scan_id, *model_, infer_);
    if (second_pass) c = fp_reduce(v, c, *model_, infer_);
    return c;
  }

  InferConfig& config() { return infer_; }

 private:
  std::unique_ptr<VoxelRcnn> model_;
  InferConfig infer_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the voxelrcnn C++ library. Arrays are (z, y, x).";

  py::register_exception<Error>(m, "Error");
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);

  py::class_<Box3>(m, "Box3")
      .def(py::init<>())
      .def(py::init([](const Vec3& c, const Vec3& s) { return Box3{c, s}; }), py::arg("center"), py::arg("size"))
      .def_static("from_bounds", &Box3::from_bounds, py::arg("lo"), py::arg("hi"))
      .def_readwrite("center", &Box3::center)
      .def_readwrite("size", &Box3::size)
      .def("lo", &Box3::lo)
      .def("hi", &Box3::hi)
      .def("volume", &Box3::volume)
      .def("__repr__", [](const Box3& b) {
        return "Box3(center=(" + std::to_string(b.center[0]) + ", " + std::to_string(b.center[1]) + ", " +
               std::to_string(b.center[2]) + "), size=(" + std::to_string(b.size[0]) + ", " +
               std::to_string(b.size[1]) + ", " + std::to_string(b.size[2]) + "))";
      });

  m.def("iou3d", &iou3d, py::arg("a"), py::arg("b"));
  m.def(
      "nms3d",
      [](const std::vector<Box3>& boxes, const std::vector<double>& scores, double thr) {
        if (boxes.size() != scores.size()) throw ArgumentError("boxes and scores differ in length");
        std::vector<ScoredBox> sb(boxes.size());
        for (std::size_t i = 0; i < boxes.size(); ++i) sb[i] = {boxes[i], scores[i]};
        return nms3d(sb, thr);
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold"));
  m.def("dilate_box", &dilate_box, py::arg("box"), py::arg("margin_mm"), py::arg("spacing"));

  py::class_<Annotation>(m, "Annotation")
      .def(py::init<>())
      .def(py::init([](std::string id, const Vec3& c, double d) { return Annotation{std::move(id), c, d}; }),
           py::arg("scan_id"), py::arg("center_world"), py::arg("diameter_mm"))
      .def_readwrite("scan_id", &Annotation::scan_id)
      .def_readwrite("center_world", &Annotation::center_world)
      .def_readwrite("diameter_mm", &Annotation::diameter_mm);

  py::class_<Candidate>(m, "Candidate")
      .def(py::init<>())
      .def_readwrite("scan_id", &Candidate::scan_id)
      .def_readwrite("center_world", &Candidate::center_world)
      .def_readwrite("size_world", &Candidate::size_world)
      .def_readwrite("score", &Candidate::score)
      .def_readwrite("mask_origin", &Candidate::mask_origin)
      .def_readwrite("mask_spacing", &Candidate::mask_spacing)
      .def_readonly("mask_volume_mm3", &Candidate::mask_volume_mm3)
      .def_property_readonly("diameter_mm", &Candidate::diameter_mm)
      .def_property_readonly("mask", [](const Candidate& c) {
        ByteArray a({c.mask_dims[0], c.mask_dims[1], c.mask_dims[2]});
        std::copy(c.mask.begin(), c.mask.end(), a.mutable_data());
        return a;
      });

  m.def("read_candidates_csv", &read_candidates_csv, py::arg("path"));
  m.def("write_candidates_csv", &write_candidates_csv, py::arg("candidates"), py::arg("path"));
  m.def("read_annotations", &read_annotations, py::arg("path"));

  m.def(
      "read_mhd",
      [](const std::filesystem::path& p) {
        const Volume v = read_mhd(p);
        return py::make_tuple(to_numpy(v), v.spacing(), v.origin());
      },
      py::arg("path"), "Returns (array, spacing, origin).");
  m.def(
      "write_mhd",
      [](const std::filesystem::path& p, const FloatArray& a, const Vec3& spacing, const Vec3& origin,
         const std::string& type) { write_mhd(from_numpy(a, spacing, origin, parse_type(type)), p); },
      py::arg("path"), py::arg("array"), py::arg("spacing"), py::arg("origin") = Vec3{0, 0, 0},
      py::arg("element_type") = "float32");

  py::class_<PhantomSpec>(m, "PhantomSpec")
      .def(py::init<>())
      .def_readwrite("seed", &PhantomSpec::seed)
      .def_readwrite("n_volumes", &PhantomSpec::n_volumes)
      .def_readwrite("volume_dims", &PhantomSpec::volume_dims)
      .def_readwrite("spacing_mm", &PhantomSpec::spacing_mm)
      .def_readwrite("nodules_min", &PhantomSpec::nodules_min)
      .def_readwrite("nodules_max", &PhantomSpec::nodules_max)
      .def_readwrite("radius_min_mm", &PhantomSpec::radius_min_mm)
      .def_readwrite("radius_max_mm", &PhantomSpec::radius_max_mm)
      .def_readwrite("subsolid_fraction", &PhantomSpec::subsolid_fraction)
      .def_readwrite("distractors_min", &PhantomSpec::distractors_min)
      .def_readwrite("distractors_max", &PhantomSpec::distractors_max)
      .def_readwrite("noise_sigma_hu", &PhantomSpec::noise_sigma_hu)
      .def("validate", &PhantomSpec::validate);

  m.def(
      "generate_case",
      [](const PhantomSpec& spec, int index) {
        const PhantomCase c = generate_case(spec, index);
        py::dict d;
        d["scan_id"] = c.scan_id;
        d["scan"] = to_numpy(c.scan);
        d["mask"] = to_numpy(c.mask).attr("astype")("uint8");
        d["spacing"] = c.scan.spacing();
        d["origin"] = c.scan.origin();
        d["annotations"] = c.annotations;
        return d;
      },
      py::arg("spec"), py::arg("index"));
  m.def("write_phantom_dataset", [](const PhantomSpec& spec, const std::filesystem::path& dir) {
    write_dataset(generate(spec), dir);
  }, py::arg("spec"), py::arg("directory"));

  m.def(
      "froc",
      [](const std::vector<Candidate>& c, const std::vector<Annotation>& g, std::vector<std::string> ids) {
        return froc_dict(froc(match_all(c, g, std::move(ids))));
      },
      py::arg("candidates"), py::arg("annotations"), py::arg("scan_ids") = std::vector<std::string>{});
  m.def("dsc", [](const ByteArray& a, const ByteArray& b) { return dsc(to_bytes(a), to_bytes(b)); }, py::arg("a"),
        py::arg("b"));
  m.def(
      "hausdorff_mm",
      [](const ByteArray& a, const ByteArray& b, const Vec3& spacing, bool p95) {
        if (shape3(a) != shape3(b)) throw ShapeError("masks differ in shape");
        return hausdorff_mm(to_bytes(a), to_bytes(b), shape3(a), spacing, p95);
      },
      py::arg("a"), py::arg("b"), py::arg("spacing"), py::arg("percentile95") = false);
  m.def("volume_correlation", &volume_correlation, py::arg("pred"), py::arg("gt"));

  m.def("sliding_windows", &sliding_windows, py::arg("dims"), py::arg("window") = 128, py::arg("overlap") = 0.25);

  py::class_<Detector>(m, "Detector")
      .def(py::init<const std::filesystem::path&, const std::filesystem::path&>(), py::arg("checkpoint"),
           py::arg("config") = std::filesystem::path{})
      .def("detect", &Detector::detect, py::arg("scan"), py::arg("spacing"), py::arg("origin") = Vec3{0, 0, 0},
           py::arg("scan_id") = "scan", py::arg("fp_reduce") = false)
      .def_property(
          "window", [](Detector& d) { return d.config().window; },
          [](Detector& d, std::int64_t w) {
            d.config().window = w;
            d.config().validate();
          })
      .def_property(
          "threads", [](Detector& d) { return d.config().threads; }, [](Detector& d, int t) { d.config().threads = t; });

  m.def(
      "save_random_model",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& config) {
        KeyValues kv;
        if (!config.empty()) kv = KeyValues::read(config);
        const VoxelRcnn model(ModelConfig::from_keyvalues(kv));
        save_checkpoint(checkpoint, model.parameters());
      },
      py::arg("checkpoint"), py::arg("config") = std::filesystem::path{},
      "Writes the untrained weights for a config; useful for smoke tests.");
}
