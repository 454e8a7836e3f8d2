// panfield command line: synthetic dataset generation, training, rendering,
// evaluation and gradient checking.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "panfield/dataset.hpp"
#include "panfield/rendering.hpp"
#include "panfield/synth.hpp"
#include "panfield/trainer.hpp"

namespace fs = std::filesystem;
using namespace panfield;

namespace {

struct KvOverride {
  std::string key, value;
};

void add_config_mirror(CLI::App* cmd, std::vector<std::string>* kv_pairs) {
  // every config key has a CLI mirror: --set key=value (repeatable) plus a
  // dedicated --<key> flag per known key
  cmd->add_option("--set", *kv_pairs, "config override key=value (repeatable)");
  for (const std::string& key : trainer::config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key,
        [kv_pairs, key](const std::string& v) { kv_pairs->push_back(key + "=" + v); },
        "override config key " + key);
  }
}

trainer::TrainConfig config_from_cli(const std::string& config_path,
                                     const std::vector<std::string>& kv_pairs) {
  trainer::TrainConfig cfg = trainer::default_config();
  if (!config_path.empty()) cfg = trainer::load_config_file(config_path, cfg);
  for (const std::string& kv : kv_pairs) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) fail_usage(strf("--set expects key=value, got '%s'", kv.c_str()));
    trainer::apply_config_kv(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  return cfg;
}

std::vector<int> parse_view_list(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!trim(cur).empty()) out.push_back(std::stoi(trim(cur)));
      cur.clear();
    } else cur += c;
  }
  return out;
}

void write_view_files(const rendering::PanopticImage& img, const std::string& dir,
                      const std::string& stem) {
  fs::create_directories(dir);
  const int w = img.width, h = img.height;
  dataset::write_ppm((fs::path(dir) / (stem + ".ppm")).string(), img.color, w, h);
  dataset::write_u16_map((fs::path(dir) / (stem + ".sem.u16")).string(), img.sem_label, w, h);
  dataset::write_u16_map((fs::path(dir) / (stem + ".inst.u16")).string(), img.inst_label, w, h);
  dataset::write_f32_raw((fs::path(dir) / (stem + ".depth.f32")).string(), img.depth);
  dataset::write_ppm((fs::path(dir) / (stem + ".sem_vis.ppm")).string(),
                     dataset::colorize_labels(img.sem_label, w, h), w, h);
  dataset::write_ppm((fs::path(dir) / (stem + ".inst_vis.ppm")).string(),
                     dataset::colorize_labels(img.inst_label, w, h), w, h);
}

int run(int argc, char** argv) {
  CLI::App app{"panfield: panoptic radiance field engine"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string scene_name = "three-boxes", res = "64x64", out_dir = "synth_out";
  int views = 8;
  synth::NoiseSpec noise;
  synth_cmd->add_option("--scene", scene_name, "three-boxes | orchard | fog-road");
  synth_cmd->add_option("--views", views, "number of orbit views");
  synth_cmd->add_option("--res", res, "WxH");
  synth_cmd->add_option("--flip", noise.p_flip, "block semantic flip probability");
  synth_cmd->add_option("--block", noise.block, "flip block side in pixels");
  synth_cmd->add_flag("--permute-instances", noise.permute_instances,
                      "random per-frame instance id permutation");
  synth_cmd->add_option("--seed", noise.seed, "noise seed");
  synth_cmd->add_option("--out", out_dir, "output dataset directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "optimize a panoptic field");
  std::string train_config;
  std::vector<std::string> train_kv;
  train_cmd->add_option("--config", train_config, "config file (key = value with [sections])");
  add_config_mirror(train_cmd, &train_kv);

  // render
  auto* render_cmd = app.add_subcommand("render", "render views from a checkpoint");
  std::string ckpt_dir, render_out = "renders", render_data;
  int frame_index = -1, orbit_steps = 0, render_samples = 0, render_w = 128, render_h = 128;
  double orbit_elev = 0.45, orbit_radius = 2.1;
  render_cmd->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  render_cmd->add_option("--out", render_out, "output directory");
  render_cmd->add_option("--data", render_data, "dataset (for --frame camera lookup)");
  render_cmd->add_option("--frame", frame_index, "render this dataset frame's camera");
  render_cmd->add_option("--orbit", orbit_steps, "render an orbit with this many steps");
  render_cmd->add_option("--elev", orbit_elev, "orbit elevation (radians)");
  render_cmd->add_option("--radius", orbit_radius, "orbit radius");
  render_cmd->add_option("--width", render_w, "orbit image width");
  render_cmd->add_option("--height", render_h, "orbit image height");
  render_cmd->add_option("--samples", render_samples, "samples per ray (default: config)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against GT");
  std::string eval_ckpt, eval_data, eval_views, eval_out = "eval_out";
  int eval_holdout = 0, eval_samples_cli = 0;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory with gt/")->required();
  eval_cmd->add_option("--views", eval_views, "comma-separated view indices");
  eval_cmd->add_option("--holdout-every", eval_holdout, "evaluate frames i % k == 0");
  eval_cmd->add_option("--samples", eval_samples_cli, "samples per ray (default: config)");
  eval_cmd->add_option("--out", eval_out, "report directory");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  int gc_probes = 6;
  uint64_t gc_seed = 17;
  double gc_tol = 1e-3;
  gc_cmd->add_option("--probes", gc_probes, "probed parameters per group");
  gc_cmd->add_option("--seed", gc_seed, "probe seed");
  gc_cmd->add_option("--tol", gc_tol, "failure threshold on max relative error");

  CLI11_PARSE(app, argc, argv);

  if (synth_cmd->parsed()) {
    auto x = res.find('x');
    if (x == std::string::npos) fail_usage("--res expects WxH");
    int w = std::stoi(res.substr(0, x)), h = std::stoi(res.substr(x + 1));
    synth::SynthScene scene = synth::make_scene(scene_name);
    dataset::SceneDataset ds = synth::make_dataset(scene, views, w, h, noise, out_dir);
    printf("wrote %zu frames (%dx%d, U=%d V=%d) to %s\n", ds.frames.size(), w, h,
           ds.taxonomy.n_classes, ds.taxonomy.n_instance_channels, out_dir.c_str());
    return 0;
  }

  if (train_cmd->parsed()) {
    trainer::TrainConfig cfg = config_from_cli(train_config, train_kv);
    if (cfg.data_dir.empty()) fail_usage("train: data.dir is required");
    dataset::SceneDataset ds = dataset::load_dataset(cfg.data_dir);
    trainer::Trainer tr(cfg, std::move(ds));
    trainer::TrainResult res = tr.run();
    printf("final checkpoint: %s\n", res.checkpoint_dir.c_str());
    return 0;
  }

  if (render_cmd->parsed()) {
    trainer::Checkpoint ckpt = trainer::load_checkpoint(ckpt_dir);
    rendering::RenderConfig rc = ckpt.config.render;
    rc.stratified = false;
    rc.n_samples = render_samples > 0 ? render_samples : ckpt.config.eval_samples;
    if (frame_index >= 0) {
      if (render_data.empty()) fail_usage("render --frame needs --data for the camera");
      dataset::SceneDataset ds = dataset::load_dataset(render_data);
      const auto& cam = ds.frames.at(frame_index).camera;
      auto img = rendering::render_view(ckpt.store, cam, rc, ckpt.taxonomy.thing);
      write_view_files(img, render_out, strf("%04d", frame_index));
      printf("rendered frame %d to %s\n", frame_index, render_out.c_str());
    } else if (orbit_steps > 0) {
      for (int i = 0; i < orbit_steps; ++i) {
        double az = 2.0 * M_PI * i / orbit_steps;  // monotone azimuth sweep
        auto cam = synth::orbit_camera(az, orbit_elev, orbit_radius, render_w, render_h);
        auto img = rendering::render_view(ckpt.store, cam, rc, ckpt.taxonomy.thing);
        write_view_files(img, render_out, strf("orbit_%04d", i));
      }
      printf("rendered %d orbit views to %s\n", orbit_steps, render_out.c_str());
    } else {
      fail_usage("render: give --frame N or --orbit STEPS");
    }
    return 0;
  }

  if (eval_cmd->parsed()) {
    trainer::Checkpoint ckpt = trainer::load_checkpoint(eval_ckpt);
    dataset::SceneDataset ds = dataset::load_dataset(eval_data);
    std::vector<int> views;
    if (!eval_views.empty()) views = parse_view_list(eval_views);
    else if (eval_holdout > 0) {
      for (size_t i = 0; i < ds.frames.size(); i += eval_holdout) views.push_back(int(i));
    } else fail_usage("eval: give --views or --holdout-every");
    int n_samples = eval_samples_cli > 0 ? eval_samples_cli : ckpt.config.eval_samples;
    trainer::EvalReport rep = trainer::evaluate(ckpt.store, ds, views, n_samples, ckpt.config.render);
    trainer::write_eval_report(rep, eval_out);
    printf("psnr %.3f miou %.4f pq %.4f sq %.4f rq %.4f (report in %s)\n", rep.psnr, rep.iou.miou,
           rep.pq.pq, rep.pq.sq, rep.pq.rq, eval_out.c_str());
    return 0;
  }

  if (gc_cmd->parsed()) {
    trainer::GradcheckReport rep = trainer::gradcheck(trainer::gradcheck_preset(), gc_probes, gc_seed);
    printf("gradcheck: %zu group/term pairs, worst relative error %.3g\n", rep.rows.size(),
           rep.worst);
    auto offenders = rep.offenders(gc_tol);
    for (const auto& o : offenders) printf("FAIL %s\n", o.c_str());
    if (!offenders.empty()) return 3;
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", e.what()}};
    fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
}
