#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <opencv2/core.hpp>

#include "pmode/data_model.hpp"
#include "pmode/losses.hpp"
#include "pmode/synth_scene.hpp"
#include "pmode/train_eval.hpp"
#include "pmode/video_cli.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace pmode;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

cv::Mat image_from(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("expected an H x W x 3 uint8 array");
  cv::Mat view(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC3,
               const_cast<std::uint8_t*>(a.data()));
  return view.clone();
}

cv::Mat mask_from(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected an H x W uint8 mask");
  cv::Mat view(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8U, const_cast<std::uint8_t*>(a.data()));
  cv::Mat out;
  cv::compare(view, 0, out, cv::CMP_GT);
  return out / 255;
}

U8Array to_array(const cv::Mat& m) {
  const cv::Mat c = m.isContinuous() ? m : m.clone();
  std::vector<py::ssize_t> shape = {c.rows, c.cols};
  if (c.channels() > 1) shape.push_back(c.channels());
  U8Array out(shape);
  std::memcpy(out.mutable_data(), c.data, c.total() * c.elemSize());
  return out;
}

py::dict metrics_dict(const train::MetricReport& m) {
  py::dict d;
  d["bbox_map"] = m.bbox_map;
  d["segm_map"] = m.segm_map;
  d["hnw_mape"] = m.hnw_mape;
  d["hnw_l1"] = m.hnw_l1;
  d["images"] = m.images;
  d["instances"] = m.instances;
  d["flagged"] = m.flagged;
  return d;
}

py::dict loss_dict(const losses::LossReport& r) {
  py::dict d;
  d["l_seg"] = r.l_seg;
  d["l_corner"] = r.l_corner;
  d["l_hnw"] = r.l_hnw;
  d["l_bbox"] = r.l_bbox;
  d["l_cls"] = r.l_cls;
  d["l_total"] = r.l_total;
  return d;
}

py::dict estimate_dict(const video::FrameEstimate& e) {
  py::dict d;
  d["frame_index"] = e.frame_index;
  d["box"] = py::make_tuple(e.box.x1, e.box.y1, e.box.x2, e.box.y2);
  d["width_m"] = e.width_m;
  d["height_m"] = e.height_m;
  d["score"] = e.score;
  d["mask"] = to_array(e.mask);
  return d;
}

}  // namespace

PYBIND11_MODULE(_pmode, m) {
  m.doc() = "Board detection, segmentation and metric size estimation";

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error");
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);
  py::register_exception<PreconditionError>(m, "PreconditionError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "generate",
      [](int count, std::uint64_t seed, const fs::path& out, int profiles, double occlusion_rate,
         bool single_profile_tracks) {
        if (profiles < 1 || profiles > 3) throw PreconditionError("profiles must be 1..3");
        auto cams = synth::default_camera_profiles();
        cams.resize(static_cast<std::size_t>(profiles));
        synth::GeneratorOptions opt;
        opt.occlusion_rate = occlusion_rate;
        opt.single_profile_tracks = single_profile_tracks;
        py::gil_scoped_release nogil;
        const auto manifest = synth::generate_dataset(count, seed, cams, out, opt);
        return out / "manifest.json";
      },
      py::arg("count"), py::arg("seed"), py::arg("out"), py::arg("profiles") = 3, py::arg("occlusion_rate") = 0.2,
      py::arg("single_profile_tracks") = false, "Renders a synthetic dataset and returns the manifest path.");

  m.def(
      "train_json",
      [](const std::string& config_json, const std::string& base) {
        const auto cfg = train::train_config_from_json(nlohmann::json::parse(config_json), fs::path(base));
        train::TrainResult res;
        {
          py::gil_scoped_release nogil;
          res = train::train(cfg);
        }
        py::dict d;
        py::list history;
        for (const auto& e : res.history) {
          py::dict h;
          h["epoch"] = e.epoch;
          h["loss"] = loss_dict(e.train_loss);
          h["val"] = e.val ? py::object(metrics_dict(*e.val)) : py::none();
          history.append(h);
        }
        d["history"] = history;
        d["best_epoch"] = res.best_epoch;
        d["best_mape"] = res.best_mape;
        d["best_checkpoint"] = res.best_checkpoint;
        d["last_checkpoint"] = res.last_checkpoint;
        d["diverged"] = res.diverged;
        d["message"] = res.message;
        return d;
      },
      py::arg("config_json"), py::arg("base") = std::string{});

  m.def(
      "evaluate",
      [](const fs::path& checkpoint, const fs::path& manifest) {
        train::MetricReport r;
        {
          py::gil_scoped_release nogil;
          const auto net = net::load_checkpoint(checkpoint);
          r = train::evaluate(net, load_frames(load_dataset(manifest), manifest.parent_path()));
        }
        return metrics_dict(r);
      },
      py::arg("checkpoint"), py::arg("manifest"));

  m.def(
      "infer",
      [](const fs::path& checkpoint, const fs::path& frames, const std::optional<fs::path>& out,
         const std::optional<fs::path>& csv, const std::optional<fs::path>& consistency) {
        video::InferOptions o;
        o.checkpoint = checkpoint;
        o.frames_dir = frames;
        o.overlay_dir = out.value_or(fs::path{});
        o.csv = csv.value_or(fs::path{});
        o.consistency = consistency.value_or(fs::path{});
        video::InferSummary s;
        {
          py::gil_scoped_release nogil;
          s = video::run_infer(o);
        }
        py::dict d;
        py::list per_frame;
        for (const auto& f : s.sequence.frames) per_frame.append(f.estimate ? py::object(estimate_dict(*f.estimate)) : py::none());
        d["frames"] = per_frame;
        d["warnings"] = s.sequence.warnings;
        d["tracks"] = s.tracks.size();
        d["report"] = s.report ? py::object(py::module_::import("json").attr("loads")(
                                     video::consistency_report_to_json(*s.report).dump()))
                               : py::none();
        return d;
      },
      py::arg("checkpoint"), py::arg("frames"), py::arg("out") = py::none(), py::arg("csv") = py::none(),
      py::arg("consistency") = py::none());

  py::class_<net::PmodeNet>(m, "Model")
      .def_static(
          "load", [](const fs::path& p) { return net::load_checkpoint(p); }, py::arg("path"))
      .def_property_readonly("input_size", [](const net::PmodeNet& n) { return n.config().input_size; })
      .def(
          "infer_image",
          [](const net::PmodeNet& n, const U8Array& image) {
            const cv::Mat img = image_from(image);
            const auto r = video::infer_image(n, img);
            return r.estimate ? py::object(estimate_dict(*r.estimate)) : py::none();
          },
          py::arg("image"), "Primary board in an H x W x 3 BGR frame, or None.");

  m.def(
      "corner_clusters",
      [](const U8Array& mask) {
        const auto c = losses::detect_corner_clusters(mask_from(mask));
        std::vector<std::pair<double, double>> pts;
        for (const auto& p : c.centroids) pts.emplace_back(p.x, p.y);
        return py::make_tuple(pts, c.radius_px);
      },
      py::arg("mask"), "Clustered Harris corners of a binary mask: ([(x, y)], radius).");
  m.def(
      "corner_loss",
      [](const U8Array& pred, const U8Array& gt) {
        const cv::Mat g = mask_from(gt);
        const auto clusters = losses::detect_corner_clusters(g);
        cv::Mat p;
        mask_from(pred).convertTo(p, CV_64F);
        return losses::corner_alignment_loss(p, g, clusters).value;
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "hnw_loss",
      [](double pred_h, double pred_w, double gt_w, double gt_h) {
        return losses::hnw_loss({pred_h, pred_w}, DimensionLabel{gt_w, gt_h});
      },
      py::arg("pred_h"), py::arg("pred_w"), py::arg("gt_w"), py::arg("gt_h"));
  m.def("coefficient_of_variation", &video::coefficient_of_variation, py::arg("values"));
  m.def("dimension_text", &video::dimension_text, py::arg("width_m"), py::arg("height_m"));
}
