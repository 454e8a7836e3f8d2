// Python bindings for the main operations: encodings, sampling/compositing,
// metrics, the assignment solver, synthetic scenes and checkpoint rendering.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "panfield/dataset.hpp"
#include "panfield/encoding.hpp"
#include "panfield/metrics.hpp"
#include "panfield/rendering.hpp"
#include "panfield/synth.hpp"
#include "panfield/trainer.hpp"

namespace py = pybind11;
using namespace panfield;

namespace {

Vec3 to_vec3(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

py::dict image_to_dict(const rendering::PanopticImage& img) {
  py::dict d;
  auto arr = [&](const std::vector<float>& v, std::vector<size_t> shape) {
    return py::array_t<float>(shape, v.data());
  };
  size_t h = img.height, w = img.width;
  d["color"] = arr(img.color, {h, w, 3});
  d["sem_prob"] = arr(img.sem_prob, {h, w, size_t(img.n_classes)});
  d["inst_prob"] = arr(img.inst_prob, {h, w, size_t(img.n_instance_channels)});
  d["depth"] = arr(img.depth, {h, w});
  d["disparity"] = arr(img.disparity, {h, w});
  d["sem_label"] = py::array_t<uint16_t>({h, w}, img.sem_label.data());
  d["inst_label"] = py::array_t<uint16_t>({h, w}, img.inst_label.data());
  return d;
}

}  // namespace

PYBIND11_MODULE(panfield, m) {
  m.doc() = "panoptic radiance field engine";

  m.def(
      "contract",
      [](std::array<double, 3> x) {
        Vec3 c = encoding::contract(to_vec3(x));
        return std::array<double, 3>{c.x, c.y, c.z};
      },
      py::arg("x"), "scene contraction: identity inside the unit ball, norm < 2 everywhere");

  m.def(
      "positional_encoding",
      [](std::array<double, 3> x, int n_freq) {
        return encoding::positional_encoding_vec(to_vec3(x), n_freq);
      },
      py::arg("x"), py::arg("n_freq"));

  m.def(
      "sh_encoding",
      [](std::array<double, 3> d, int degree) {
        return encoding::sh_encoding_vec(to_vec3(d), degree);
      },
      py::arg("d"), py::arg("degree"));

  m.def(
      "sample_along_ray",
      [](double t_near, double t_far, int n, bool stratified, uint64_t seed) {
        Rng rng(seed);
        return rendering::sample_along_ray(t_near, t_far, n, stratified, rng);
      },
      py::arg("t_near"), py::arg("t_far"), py::arg("n"), py::arg("stratified") = false,
      py::arg("seed") = 0);

  m.def(
      "compute_weights",
      [](std::vector<double> sigmas, std::vector<double> ts, double t_far) {
        std::vector<double> w;
        double resid = 0;
        rendering::compute_weights(sigmas, ts, t_far, w, resid);
        return py::make_tuple(w, resid);
      },
      py::arg("sigmas"), py::arg("ts"), py::arg("t_far"),
      "returns (weights, residual_transmittance)");

  m.def(
      "hungarian",
      [](std::vector<std::vector<double>> cost) {
        metrics::Assignment a = metrics::hungarian(cost);
        return py::make_tuple(a.row_to_col, a.total_cost);
      },
      py::arg("cost"), "minimum-cost assignment; returns (row_to_col, total_cost)");

  m.def(
      "psnr",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> a,
         py::array_t<float, py::array::c_style | py::array::forcecast> b) {
        std::vector<float> va(a.data(), a.data() + a.size());
        std::vector<float> vb(b.data(), b.data() + b.size());
        return metrics::psnr(va, vb);
      },
      py::arg("img"), py::arg("ref"));

  m.def(
      "charbonnier_loss",
      [](std::vector<double> a, std::vector<double> b, double eps) {
        return supervision::charbonnier_loss(a.data(), b.data(), a.size(), eps);
      },
      py::arg("a"), py::arg("b"), py::arg("eps") = 1e-4);

  m.def("standard_scenes", [] { return synth::standard_scene_names(); });

  m.def(
      "make_dataset",
      [](const std::string& scene, int views, int width, int height, double flip, int block,
         bool permute_instances, uint64_t seed, const std::string& out_dir) {
        synth::NoiseSpec noise;
        noise.p_flip = flip;
        noise.block = block;
        noise.permute_instances = permute_instances;
        noise.seed = seed;
        auto ds = synth::make_dataset(synth::make_scene(scene), views, width, height, noise,
                                      out_dir);
        py::dict d;
        d["frames"] = ds.frames.size();
        d["n_classes"] = ds.taxonomy.n_classes;
        d["n_instance_channels"] = ds.taxonomy.n_instance_channels;
        return d;
      },
      py::arg("scene"), py::arg("views"), py::arg("width"), py::arg("height"),
      py::arg("flip") = 0.0, py::arg("block") = 8, py::arg("permute_instances") = false,
      py::arg("seed") = 0, py::arg("out_dir") = std::string());

  m.def(
      "analytic_render",
      [](const std::string& scene_name) {
        synth::SynthScene scene = synth::make_scene(scene_name);
        auto cam = synth::standard_test_camera(scene_name);
        return image_to_dict(synth::analytic_render(scene, cam));
      },
      py::arg("scene"), "closed-form render of a standard scene's pinned test view");

  m.def(
      "render_checkpoint",
      [](const std::string& ckpt_dir, int frame, const std::string& data_dir, int n_samples) {
        trainer::Checkpoint ck = trainer::load_checkpoint(ckpt_dir);
        dataset::SceneDataset ds = dataset::load_dataset(data_dir);
        rendering::RenderConfig rc = ck.config.render;
        rc.stratified = false;
        if (n_samples > 0) rc.n_samples = n_samples;
        auto img = rendering::render_view(ck.store, ds.frames.at(frame).camera, rc,
                                          ck.taxonomy.thing);
        return image_to_dict(img);
      },
      py::arg("ckpt_dir"), py::arg("frame"), py::arg("data_dir"), py::arg("n_samples") = 0);

  m.def(
      "evaluate_checkpoint",
      [](const std::string& ckpt_dir, const std::string& data_dir, std::vector<int> views,
         int n_samples) {
        trainer::Checkpoint ck = trainer::load_checkpoint(ckpt_dir);
        dataset::SceneDataset ds = dataset::load_dataset(data_dir);
        int n = n_samples > 0 ? n_samples : ck.config.eval_samples;
        trainer::EvalReport rep = trainer::evaluate(ck.store, ds, views, n, ck.config.render);
        py::dict d;
        d["psnr"] = rep.psnr;
        d["miou"] = rep.iou.miou;
        d["pq"] = rep.pq.pq;
        d["sq"] = rep.pq.sq;
        d["rq"] = rep.pq.rq;
        return d;
      },
      py::arg("ckpt_dir"), py::arg("data_dir"), py::arg("views"), py::arg("n_samples") = 0);

  m.def("gradcheck", [](int probes, uint64_t seed) {
    trainer::GradcheckReport rep = trainer::gradcheck(trainer::gradcheck_preset(), probes, seed);
    py::dict d;
    d["worst"] = rep.worst;
    d["rows"] = rep.rows.size();
    d["skipped_kinks"] = rep.skipped_kinks;
    return d;
  }, py::arg("probes") = 3, py::arg("seed") = 17);
}
