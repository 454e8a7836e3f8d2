#include "panfield/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "panfield/synth.hpp"

namespace fs = std::filesystem;

namespace panfield::trainer {

// ---------------------------------------------------------------------------
// config

TrainConfig default_config() { return TrainConfig{}; }

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!trim(cur).empty()) out.push_back(std::stoi(trim(cur)));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  fail_usage(strf("config: bad boolean '%s'", v.c_str()));
}

}  // namespace

void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  auto d = [&] { return std::stod(v); };
  auto i = [&] { return std::stoi(v); };
  auto u = [&] { return static_cast<uint64_t>(std::stoull(v)); };

  if (key == "data.dir") cfg.data_dir = v;
  else if (key == "data.holdout_every") cfg.holdout_every = i();
  else if (key == "data.holdout_frames") cfg.holdout_frames = parse_ints(v);
  else if (key == "field.geo_resolutions") cfg.field.enc.geometric.resolutions = parse_ints(v);
  else if (key == "field.geo_features") cfg.field.enc.geometric.feature_dim = i();
  else if (key == "field.und_resolution") cfg.field.enc.understanding.resolutions = {i()};
  else if (key == "field.und_features") cfg.field.enc.understanding.feature_dim = i();
  else if (key == "field.bound") {
    cfg.field.enc.geometric.bound = d();
    cfg.field.enc.understanding.bound = d();
  } else if (key == "field.n_freq") cfg.field.enc.n_freq = i();
  else if (key == "field.sh_degree") cfg.field.enc.sh_degree = i();
  else if (key == "field.geo_hidden") cfg.field.geo.hidden = i();
  else if (key == "field.geo_depth") cfg.field.geo.depth = i();
  else if (key == "field.geo_feat_dim") cfg.field.geo_feat_dim = i();
  else if (key == "field.app_hidden") cfg.field.app.hidden = i();
  else if (key == "field.app_depth") cfg.field.app.depth = i();
  else if (key == "field.sem_hidden") cfg.field.sem.hidden = i();
  else if (key == "field.sem_depth") cfg.field.sem.depth = i();
  else if (key == "field.inst_hidden") cfg.field.inst.hidden = i();
  else if (key == "field.inst_depth") cfg.field.inst.depth = i();
  else if (key == "field.activation") cfg.field.act = field::activation_from_name(v);
  else if (key == "field.cascade") cfg.field.cascade = parse_bool(v);
  else if (key == "field.coarse_levels") cfg.field.coarse_levels = i();
  else if (key == "field.coarse_hidden") {
    cfg.field.coarse_geo.hidden = i();
    cfg.field.coarse_app.hidden = i();
  } else if (key == "render.n_samples") cfg.render.n_samples = i();
  else if (key == "render.chunk") cfg.render.chunk = i();
  else if (key == "render.min_weight_eval") cfg.render.min_weight_eval = d();
  else if (key == "render.eval_samples") cfg.eval_samples = i();
  else if (key == "render.threads") cfg.render.n_threads = i();
  else if (key == "train.iters") cfg.iters = i();
  else if (key == "train.patch") cfg.patch_side = i();
  else if (key == "train.patches_per_step") cfg.patches_per_step = i();
  else if (key == "train.seed") cfg.seed = u();
  else if (key == "train.ckpt_every") cfg.ckpt_every = i();
  else if (key == "train.assign_every") cfg.assign_every = i();
  else if (key == "train.assign_samples") cfg.assign_samples = i();
  else if (key == "train.max_groups") cfg.max_groups = i();
  else if (key == "train.log_every") cfg.log_every = i();
  else if (key == "train.out") cfg.out_dir = v;
  else if (key == "train.lr_grid") cfg.lr_grid = d();
  else if (key == "train.lr_mlp") cfg.lr_mlp = d();
  else if (key == "train.beta1") cfg.beta1 = d();
  else if (key == "train.beta2") cfg.beta2 = d();
  else if (key == "train.adam_eps") cfg.adam_eps = d();
  else if (key == "loss.alpha_distill") cfg.weights.distill = d();
  else if (key == "loss.alpha_sem") cfg.weights.sem = d();
  else if (key == "loss.alpha_ins") cfg.weights.inst = d();
  else if (key == "loss.alpha_seg") cfg.weights.seg = d();
  else if (key == "loss.alpha_feat") cfg.weights.feat = d();
  else if (key == "loss.alpha_reg") cfg.weights.reg = d();
  else if (key == "loss.charbonnier_eps") cfg.weights.charbonnier_eps = d();
  else if (key == "extractor.tag") cfg.extractor.tag = v;
  else if (key == "extractor.seed") cfg.extractor.seed = u();
  else if (key == "extractor.channels") cfg.extractor.channels = i();
  else fail_usage(strf("config: unknown key '%s'", key.c_str()));
}

std::vector<std::pair<std::string, std::string>> config_to_kv(const TrainConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto add = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
  add("data.dir", c.data_dir);
  add("data.holdout_every", std::to_string(c.holdout_every));
  add("data.holdout_frames", join_ints(c.holdout_frames));
  add("field.geo_resolutions", join_ints(c.field.enc.geometric.resolutions));
  add("field.geo_features", std::to_string(c.field.enc.geometric.feature_dim));
  add("field.und_resolution", std::to_string(c.field.enc.understanding.resolutions.at(0)));
  add("field.und_features", std::to_string(c.field.enc.understanding.feature_dim));
  add("field.bound", strf("%.17g", c.field.enc.geometric.bound));
  add("field.n_freq", std::to_string(c.field.enc.n_freq));
  add("field.sh_degree", std::to_string(c.field.enc.sh_degree));
  add("field.geo_hidden", std::to_string(c.field.geo.hidden));
  add("field.geo_depth", std::to_string(c.field.geo.depth));
  add("field.geo_feat_dim", std::to_string(c.field.geo_feat_dim));
  add("field.app_hidden", std::to_string(c.field.app.hidden));
  add("field.app_depth", std::to_string(c.field.app.depth));
  add("field.sem_hidden", std::to_string(c.field.sem.hidden));
  add("field.sem_depth", std::to_string(c.field.sem.depth));
  add("field.inst_hidden", std::to_string(c.field.inst.hidden));
  add("field.inst_depth", std::to_string(c.field.inst.depth));
  add("field.activation", field::activation_name(c.field.act));
  add("field.cascade", c.field.cascade ? "1" : "0");
  add("field.coarse_levels", std::to_string(c.field.coarse_levels));
  add("field.coarse_hidden", std::to_string(c.field.coarse_geo.hidden));
  add("render.n_samples", std::to_string(c.render.n_samples));
  add("render.chunk", std::to_string(c.render.chunk));
  add("render.min_weight_eval", strf("%.17g", c.render.min_weight_eval));
  add("render.eval_samples", std::to_string(c.eval_samples));
  add("render.threads", std::to_string(c.render.n_threads));
  add("train.iters", std::to_string(c.iters));
  add("train.patch", std::to_string(c.patch_side));
  add("train.patches_per_step", std::to_string(c.patches_per_step));
  add("train.seed", std::to_string(c.seed));
  add("train.ckpt_every", std::to_string(c.ckpt_every));
  add("train.assign_every", std::to_string(c.assign_every));
  add("train.assign_samples", std::to_string(c.assign_samples));
  add("train.max_groups", std::to_string(c.max_groups));
  add("train.log_every", std::to_string(c.log_every));
  add("train.out", c.out_dir);
  add("train.lr_grid", strf("%.17g", c.lr_grid));
  add("train.lr_mlp", strf("%.17g", c.lr_mlp));
  add("train.beta1", strf("%.17g", c.beta1));
  add("train.beta2", strf("%.17g", c.beta2));
  add("train.adam_eps", strf("%.17g", c.adam_eps));
  add("loss.alpha_distill", strf("%.17g", c.weights.distill));
  add("loss.alpha_sem", strf("%.17g", c.weights.sem));
  add("loss.alpha_ins", strf("%.17g", c.weights.inst));
  add("loss.alpha_seg", strf("%.17g", c.weights.seg));
  add("loss.alpha_feat", strf("%.17g", c.weights.feat));
  add("loss.alpha_reg", strf("%.17g", c.weights.reg));
  add("loss.charbonnier_eps", strf("%.17g", c.weights.charbonnier_eps));
  add("extractor.tag", c.extractor.tag);
  add("extractor.seed", std::to_string(c.extractor.seed));
  add("extractor.channels", std::to_string(c.extractor.channels));
  return kv;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (auto& [k, v] : config_to_kv(TrainConfig{})) keys.push_back(k);
  return keys;
}

TrainConfig load_config_file(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) fail(strf("cannot open config file '%s'", path.c_str()));
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[' && s.back() == ']') {
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    auto eq = s.find('=');
    if (eq == std::string::npos)
      fail_usage(strf("%s:%d: expected key = value", path.c_str(), lineno));
    std::string key = trim(s.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    apply_config_kv(base, key, trim(s.substr(eq + 1)));
  }
  return base;
}

void save_config_file(const TrainConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) fail(strf("cannot write config file '%s'", path.c_str()));
  std::string section;
  for (auto& [k, v] : config_to_kv(cfg)) {
    auto dot = k.find('.');
    std::string sec = k.substr(0, dot), name = k.substr(dot + 1);
    if (sec != section) {
      f << "[" << sec << "]\n";
      section = sec;
    }
    f << name << " = " << v << "\n";
  }
}

// ---------------------------------------------------------------------------
// loss assembly

double total_loss(LossBreakdown& t, const supervision::LossWeights& w) {
  struct Term {
    const char* name;
    double value;
  };
  for (Term term : {Term{"color", t.color}, Term{"distill", t.distill}, Term{"sem", t.sem},
                    Term{"inst", t.inst}, Term{"seg", t.seg}, Term{"feat", t.feat},
                    Term{"tv", t.tv}, Term{"disp", t.disp}}) {
    if (!std::isfinite(term.value))
      fail(strf("total_loss: term '%s' is non-finite", term.name));
  }
  t.total = t.color + w.distill * t.distill + w.sem * t.sem + w.inst * t.inst + w.seg * t.seg +
            w.feat * t.feat + w.reg * (t.tv + t.disp);
  return t.total;
}

TermFlags TermFlags::only(const std::string& name) {
  TermFlags f;
  f.color = f.distill = f.sem = f.inst = f.seg = f.feat = f.tv = f.disp = false;
  if (name == "color") f.color = true;
  else if (name == "distill") f.distill = true;
  else if (name == "sem") f.sem = true;
  else if (name == "inst") f.inst = true;
  else if (name == "seg") f.seg = true;
  else if (name == "feat") f.feat = true;
  else if (name == "tv") f.tv = true;
  else if (name == "disp") f.disp = true;
  else fail_usage(strf("unknown loss term '%s'", name.c_str()));
  return f;
}

std::vector<std::string> TermFlags::names() {
  return {"color", "distill", "sem", "inst", "seg", "feat", "tv", "disp"};
}

// ---------------------------------------------------------------------------
// batch pipeline

BatchGeometry build_geometry(const supervision::PatchBatch& batch, int n_samples, bool stratified,
                             const Rng& base_rng) {
  BatchGeometry g;
  g.n_rays = static_cast<int>(batch.n_rays());
  g.n_samples = n_samples;
  g.xs.resize(size_t(g.n_rays) * n_samples);
  g.dirs.resize(size_t(g.n_rays) * n_samples);
  g.ts.resize(size_t(g.n_rays) * n_samples);
  g.t_far.resize(g.n_rays);
  for (int r = 0; r < g.n_rays; ++r) {
    const dataset::Ray& ray = batch.rays[r];
    g.t_far[r] = batch.t_far_of_ray[r];
    Rng ray_rng = base_rng.fork(uint64_t(r));
    std::vector<double> ts = rendering::sample_along_ray(batch.t_near_of_ray[r],
                                                         batch.t_far_of_ray[r], n_samples,
                                                         stratified, ray_rng);
    for (int i = 0; i < n_samples; ++i) {
      size_t s = size_t(r) * n_samples + i;
      g.ts[s] = ts[i];
      g.xs[s] = ray.origin + ray.dir * ts[i];
      g.dirs[s] = ray.dir;
    }
  }
  return g;
}

template <class T>
void forward_batch(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                   const BatchGeometry& geom, double min_weight_eval, int chunk_rays, int threads,
                   BatchForward<T>& out) {
  const int nr = geom.n_rays, N = geom.n_samples;
  const size_t n = size_t(nr) * N;
  if (chunk_rays < 1) chunk_rays = nr;
  const size_t n_chunks = (size_t(nr) + chunk_rays - 1) / chunk_rays;

  out.n_rays = nr;
  out.n_samples = N;
  out.chunk_rays = chunk_rays;
  out.has_coarse = cfg.cascade;
  out.fine_chunks.assign(n_chunks, {});
  out.sigma.assign(n, T(0));
  out.weights.assign(n, T(0));
  out.t_resid.assign(nr, 0.0);
  if (out.has_coarse) {
    out.coarse_chunks.assign(n_chunks, {});
    out.coarse_sigma.assign(n, T(0));
    out.coarse_weights.assign(n, T(0));
    out.coarse_t_resid.assign(nr, 0.0);
  } else {
    out.coarse_chunks.clear();
  }

  rendering::CompositeResult<T>& comp = out.comp;
  comp = {};
  comp.n_rays = nr;
  comp.n_samples = N;
  comp.n_classes = cfg.n_classes;
  comp.n_instance_channels = cfg.n_instance_channels;
  comp.C.assign(size_t(nr) * 3, T(0));
  comp.u_agg.assign(size_t(nr) * cfg.n_classes, T(0));
  comp.v_agg.assign(size_t(nr) * cfg.n_instance_channels, T(0));
  comp.u_prob = comp.u_agg;
  comp.v_prob = comp.v_agg;
  comp.depth.assign(nr, T(0));
  comp.disp.assign(nr, T(0));
  if (out.has_coarse) {
    out.coarse_comp = {};
    out.coarse_comp.n_rays = nr;
    out.coarse_comp.n_samples = N;
    out.coarse_comp.C.assign(size_t(nr) * 3, T(0));
    out.coarse_comp.depth.assign(nr, T(0));
    out.coarse_comp.disp.assign(nr, T(0));
  }

  parallel_chunks(size_t(nr), size_t(chunk_rays), threads, [&](size_t c, size_t begin, size_t end) {
    const int cr = static_cast<int>(end - begin);
    const size_t s0 = begin * N, sn = size_t(cr) * N;
    auto run_cascade = [&](field::Cascade cascade, field::EvalTrace<T>& trace, T* sigma_out,
                           T* weights_out, double* resid_out,
                           rendering::CompositeResult<T>* comp_out) {
      field::field_forward_geo(cfg, params, cascade, geom.xs.data() + s0, geom.dirs.data() + s0,
                               sn, trace);
      rendering::batch_weights(trace.sigma.data(), geom.ts.data() + s0, geom.t_far.data() + begin,
                               cr, N, weights_out + s0, resid_out + begin);
      std::vector<uint8_t> mask(sn);
      for (size_t i = 0; i < sn; ++i)
        mask[i] = double(weights_out[s0 + i]) > min_weight_eval ? 1 : 0;
      field::field_forward_shading(cfg, params, mask.data(), mask.data(), trace);
      std::memcpy(sigma_out + s0, trace.sigma.data(), sizeof(T) * sn);
      if (comp_out) {
        rendering::CompositeResult<T> local;
        rendering::composite_from_trace(cfg, trace, geom.ts.data() + s0, weights_out + s0, cr, N,
                                        local);
        const int U = cfg.n_classes, V = cfg.n_instance_channels;
        std::memcpy(comp_out->C.data() + begin * 3, local.C.data(), sizeof(T) * cr * 3);
        std::memcpy(comp_out->depth.data() + begin, local.depth.data(), sizeof(T) * cr);
        std::memcpy(comp_out->disp.data() + begin, local.disp.data(), sizeof(T) * cr);
        if (!local.u_agg.empty()) {
          std::memcpy(comp_out->u_agg.data() + begin * U, local.u_agg.data(), sizeof(T) * cr * U);
          std::memcpy(comp_out->u_prob.data() + begin * U, local.u_prob.data(), sizeof(T) * cr * U);
          std::memcpy(comp_out->v_agg.data() + begin * V, local.v_agg.data(), sizeof(T) * cr * V);
          std::memcpy(comp_out->v_prob.data() + begin * V, local.v_prob.data(), sizeof(T) * cr * V);
        }
      }
    };
    run_cascade(field::Cascade::kFine, out.fine_chunks[c], out.sigma.data(), out.weights.data(),
                out.t_resid.data(), &comp);
    if (out.has_coarse) {
      run_cascade(field::Cascade::kCoarse, out.coarse_chunks[c], out.coarse_sigma.data(),
                  out.coarse_weights.data(), out.coarse_t_resid.data(), &out.coarse_comp);
    }
  });
}

template <class T>
LossBreakdown compute_losses(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                             const supervision::PatchBatch& batch, const BatchGeometry& geom,
                             const BatchForward<T>& fwd,
                             const std::vector<supervision::ClusterGroup>& groups,
                             const std::vector<uint16_t>& inst_targets,
                             const supervision::FeatureExtractor<T>& extractor,
                             const supervision::LossWeights& w, const TermFlags& flags,
                             GradSeeds<T>* sink, field::FieldParams<T>* tv_grads,
                             const DistillTeacher<T>* frozen_teacher) {
  namespace sup = panfield::supervision;
  const int nr = geom.n_rays, N = geom.n_samples;
  const int U = cfg.n_classes, V = cfg.n_instance_channels;
  const double eps = w.charbonnier_eps;
  LossBreakdown lb;

  // observed colors as T
  std::vector<T> target(size_t(nr) * 3);
  for (size_t i = 0; i < target.size(); ++i) target[i] = static_cast<T>(batch.target_rgb[i]);

  if (sink) {
    sink->fine.ensure(nr, N, U, V, true);
    if (fwd.has_coarse) sink->coarse.ensure(nr, N, U, V, false);
  }

  if (flags.color) {
    lb.color = sup::charbonnier_loss(fwd.comp.C.data(), target.data(), size_t(nr) * 3, eps);
    if (sink)
      sup::charbonnier_backward(fwd.comp.C.data(), target.data(), size_t(nr) * 3, eps, 1.0,
                                sink->fine.dC.data());
  }

  if (flags.distill && fwd.has_coarse) {
    // student = coarse branch; the fine branch is the detached teacher
    const T* teacher_C = frozen_teacher ? frozen_teacher->C.data() : fwd.comp.C.data();
    const T* teacher_sigma = frozen_teacher ? frozen_teacher->sigma.data() : fwd.sigma.data();
    double color_part =
        sup::charbonnier_loss(fwd.coarse_comp.C.data(), teacher_C, size_t(nr) * 3, eps);
    double sigma_part = 0;
    const size_t n = size_t(nr) * N;
    for (size_t s = 0; s < n; ++s)
      sigma_part += std::fabs(double(fwd.coarse_sigma[s]) - double(teacher_sigma[s]));
    sigma_part /= double(n);
    lb.distill = color_part + sigma_part;
    if (sink) {
      sup::charbonnier_backward(fwd.coarse_comp.C.data(), teacher_C, size_t(nr) * 3, eps,
                                w.distill, sink->coarse.dC.data());
      for (size_t s = 0; s < n; ++s) {
        double d = double(fwd.coarse_sigma[s]) - double(teacher_sigma[s]);
        double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        sink->coarse.dsigma_direct[s] += static_cast<T>(w.distill * sgn / double(n));
      }
    }
  }

  if (flags.sem) {
    lb.sem = sup::semantic_loss(fwd.comp.u_prob.data(), U, batch.sem.data(), batch.lambda.data(),
                                size_t(nr));
    if (sink)
      sup::weighted_ce_backward(fwd.comp.u_prob.data(), U, batch.sem.data(), batch.lambda.data(),
                                size_t(nr), w.sem, sink->fine.du_agg.data());
  }

  if (flags.inst) {
    lb.inst = sup::instance_loss(fwd.comp.v_prob.data(), V, inst_targets.data(),
                                 batch.lambda.data(), size_t(nr));
    if (sink)
      sup::weighted_ce_backward(fwd.comp.v_prob.data(), V, inst_targets.data(),
                                batch.lambda.data(), size_t(nr), w.inst,
                                sink->fine.dv_agg.data());
  }

  if (flags.seg) {
    lb.seg = sup::seg_consistency_loss(groups, fwd.comp.u_prob.data(), U, batch.lambda.data());
    if (sink)
      sup::seg_consistency_backward(groups, fwd.comp.u_prob.data(), U, batch.lambda.data(), w.seg,
                                    sink->fine.du_agg.data());
  }

  if (flags.feat) {
    const int P = batch.patch_side;
    const int n_patches = static_cast<int>(batch.patches.size());
    if (sink) {
      lb.feat = sup::perceptual_loss_backward(extractor, fwd.comp.C.data(), target.data(),
                                              n_patches, P, w.feat, sink->fine.dC.data());
    } else {
      lb.feat = sup::perceptual_loss(extractor, fwd.comp.C.data(), target.data(), n_patches, P);
    }
  }

  if (flags.tv) {
    lb.tv = sup::tv_loss(params.geo_grid) + sup::tv_loss(params.und_grid);
    if (tv_grads) {
      sup::tv_backward(params.geo_grid, w.reg, tv_grads->geo_grid);
      sup::tv_backward(params.und_grid, w.reg, tv_grads->und_grid);
    }
  }

  if (flags.disp) {
    lb.disp = sup::disparity_loss(fwd.weights.data(), geom.ts.data(), nr, N);
    if (sink) {
      T g = static_cast<T>(w.reg / double(nr));
      for (int r = 0; r < nr; ++r) sink->fine.ddisp[r] += g;
    }
  }

  return lb;
}

template <class T>
void backward_batch(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                    const BatchGeometry& geom, const BatchForward<T>& fwd,
                    const GradSeeds<T>& seeds, int chunk_rays, int threads,
                    field::FieldParams<T>& grads) {
  const int nr = geom.n_rays, N = geom.n_samples;
  if (chunk_rays < 1) chunk_rays = nr;
  if (chunk_rays != fwd.chunk_rays)
    fail_usage("backward_batch: chunk size must match the forward pass");
  const size_t n_chunks = fwd.fine_chunks.size();

  std::vector<field::FieldParams<T>> chunk_grads(n_chunks);
  parallel_chunks(size_t(nr), size_t(chunk_rays), threads, [&](size_t c, size_t begin, size_t end) {
    const int cr = static_cast<int>(end - begin);
    chunk_grads[c] = field::make_zero_params<T>(cfg);
    auto slice_rays = [&](const std::vector<T>& src, int dim) {
      return src.empty() ? std::vector<T>()
                         : std::vector<T>(src.begin() + begin * dim, src.begin() + end * dim);
    };
    auto run_cascade = [&](const field::EvalTrace<T>& trace, const rendering::RayGrads<T>& rg_full,
                           const std::vector<T>& weights) {
      rendering::RayGrads<T> rg;
      rg.dC = slice_rays(rg_full.dC, 3);
      rg.du_agg = slice_rays(rg_full.du_agg, cfg.n_classes);
      rg.dv_agg = slice_rays(rg_full.dv_agg, cfg.n_instance_channels);
      rg.ddisp = slice_rays(rg_full.ddisp, 1);
      rg.dsigma_direct = slice_rays(rg_full.dsigma_direct, N);
      field::SampleGrads<T> sg;
      rendering::composite_backward(cfg, trace, geom.ts.data() + begin * N,
                                    geom.t_far.data() + begin, weights.data() + begin * N, cr, N,
                                    rg, sg);
      field::field_backward(cfg, params, trace, sg, chunk_grads[c]);
    };
    run_cascade(fwd.fine_chunks[c], seeds.fine, fwd.weights);
    if (fwd.has_coarse) run_cascade(fwd.coarse_chunks[c], seeds.coarse, fwd.coarse_weights);
  });
  // merge in chunk order: results do not depend on the thread count
  for (size_t c = 0; c < n_chunks; ++c) field::add_params(grads, chunk_grads[c]);
}

// explicit instantiations for the batch pipeline
#define PANFIELD_INSTANTIATE_PIPELINE(T)                                                         \
  template void forward_batch<T>(const field::FieldConfig&, const field::FieldParams<T>&,        \
                                 const BatchGeometry&, double, int, int, BatchForward<T>&);      \
  template LossBreakdown compute_losses<T>(                                                      \
      const field::FieldConfig&, const field::FieldParams<T>&, const supervision::PatchBatch&,   \
      const BatchGeometry&, const BatchForward<T>&,                                              \
      const std::vector<supervision::ClusterGroup>&, const std::vector<uint16_t>&,               \
      const supervision::FeatureExtractor<T>&, const supervision::LossWeights&, const TermFlags&,\
      GradSeeds<T>*, field::FieldParams<T>*, const DistillTeacher<T>*);                          \
  template void backward_batch<T>(const field::FieldConfig&, const field::FieldParams<T>&,       \
                                  const BatchGeometry&, const BatchForward<T>&,                  \
                                  const GradSeeds<T>&, int, int, field::FieldParams<T>&);

PANFIELD_INSTANTIATE_PIPELINE(float)
PANFIELD_INSTANTIATE_PIPELINE(double)

// ---------------------------------------------------------------------------
// optimizer

void adam_step(field::ParamStore<float>& store, AdamState& state, const TrainConfig& cfg) {
  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(state.t));
  const double bc2 = 1.0 - std::pow(b2, double(state.t));
  for (auto& g : store.groups()) {
    auto& m = state.m[g.name];
    auto& v = state.v[g.name];
    if (m.size() != g.size) m.assign(g.size, 0.f);
    if (v.size() != g.size) v.assign(g.size, 0.f);
    const double lr = g.name.rfind("grid.", 0) == 0 ? cfg.lr_grid : cfg.lr_mlp;
    for (size_t i = 0; i < g.size; ++i) {
      double gi = double(g.grad[i]);
      double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
      g.data[i] = static_cast<float>(double(g.data[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

void write_f32_block(std::ofstream& f, const float* data, size_t count) {
  std::vector<uint8_t> buf(count * 4);
  for (size_t i = 0; i < count; ++i) {
    uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    buf[4 * i] = bits & 0xff;
    buf[4 * i + 1] = (bits >> 8) & 0xff;
    buf[4 * i + 2] = (bits >> 16) & 0xff;
    buf[4 * i + 3] = (bits >> 24) & 0xff;
  }
  f.write(reinterpret_cast<const char*>(buf.data()), buf.size());
}

void read_f32_block(std::ifstream& f, float* data, size_t count, const std::string& what) {
  std::vector<uint8_t> buf(count * 4);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (static_cast<size_t>(f.gcount()) != buf.size())
    fail(strf("checkpoint: truncated data for %s", what.c_str()));
  for (size_t i = 0; i < count; ++i) {
    uint32_t bits = buf[4 * i] | (uint32_t(buf[4 * i + 1]) << 8) | (uint32_t(buf[4 * i + 2]) << 16) |
                    (uint32_t(buf[4 * i + 3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(strf("cannot create checkpoint directory '%s'", dir.c_str()));

  auto& self = const_cast<Checkpoint&>(ckpt);
  auto groups = self.store.groups();

  std::ofstream mf((fs::path(dir) / "manifest.txt").string());
  if (!mf) fail("cannot write checkpoint manifest");
  mf << "panfield-checkpoint 1\n";
  mf << "iteration " << ckpt.iteration << "\n";
  mf << "rng " << ckpt.rng_state.first << " " << ckpt.rng_state.second << "\n";
  mf << "adam-t " << ckpt.adam.t << "\n";
  mf << "taxonomy " << ckpt.taxonomy.n_classes << " " << ckpt.taxonomy.n_instance_channels << "\n";
  mf << "thing-mask";
  for (uint8_t t : ckpt.taxonomy.thing) mf << " " << int(t);
  mf << "\n";
  mf << "config-begin\n";
  for (auto& [k, v] : config_to_kv(ckpt.config)) mf << k << " = " << v << "\n";
  mf << "config-end\n";

  std::ofstream pf((fs::path(dir) / "params.bin").string(), std::ios::binary);
  if (!pf) fail("cannot write checkpoint params.bin");
  size_t offset = 0;
  auto dump = [&](const std::string& name, const float* data, size_t count) {
    mf << "array " << name << " " << offset << " " << count << "\n";
    write_f32_block(pf, data, count);
    offset += count * 4;
  };
  for (auto& g : groups) dump("param:" + g.name, g.data, g.size);
  for (auto& g : groups) {
    auto it = ckpt.adam.m.find(g.name);
    std::vector<float> zero;
    const std::vector<float>& m = it != ckpt.adam.m.end() ? it->second : (zero.assign(g.size, 0.f), zero);
    dump("adam-m:" + g.name, m.data(), g.size);
    auto itv = ckpt.adam.v.find(g.name);
    const std::vector<float>& v = itv != ckpt.adam.v.end() ? itv->second : (zero.assign(g.size, 0.f), zero);
    dump("adam-v:" + g.name, v.data(), g.size);
  }
  if (!pf) fail("write error on params.bin");

  std::ofstream af((fs::path(dir) / "assign.txt").string());
  if (!af) fail("cannot write checkpoint assign.txt");
  af << ckpt.assignments.size() << "\n";
  for (size_t i = 0; i < ckpt.assignments.size(); ++i) {
    const auto& a = ckpt.assignments[i];
    af << "frame " << i << " " << (a.frame < 0 ? 0 : a.local_to_channel.size());
    if (a.frame >= 0)
      for (int ch : a.local_to_channel) af << " " << ch;
    af << "\n";
  }
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream mf((fs::path(dir) / "manifest.txt").string());
  if (!mf) fail(strf("checkpoint manifest not found in '%s'", dir.c_str()));
  Checkpoint ckpt;
  std::string line;
  if (!std::getline(mf, line) || split_ws(line)[0] != "panfield-checkpoint")
    fail("bad checkpoint manifest header");
  struct ArrayRef {
    std::string name;
    size_t offset = 0, count = 0;
  };
  std::vector<ArrayRef> arrays;
  bool in_config = false;
  while (std::getline(mf, line)) {
    std::string s = trim(line);
    if (s.empty()) continue;
    if (s == "config-begin") { in_config = true; continue; }
    if (s == "config-end") { in_config = false; continue; }
    if (in_config) {
      auto eq = s.find('=');
      apply_config_kv(ckpt.config, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
      continue;
    }
    auto tok = split_ws(s);
    if (tok[0] == "iteration") ckpt.iteration = std::stoi(tok[1]);
    else if (tok[0] == "rng") ckpt.rng_state = {std::stoull(tok[1]), std::stoull(tok[2])};
    else if (tok[0] == "adam-t") ckpt.adam.t = std::stoll(tok[1]);
    else if (tok[0] == "taxonomy") {
      ckpt.taxonomy.n_classes = std::stoi(tok[1]);
      ckpt.taxonomy.n_instance_channels = std::stoi(tok[2]);
    } else if (tok[0] == "thing-mask") {
      ckpt.taxonomy.thing.clear();
      for (size_t i = 1; i < tok.size(); ++i)
        ckpt.taxonomy.thing.push_back(static_cast<uint8_t>(std::stoi(tok[i])));
    } else if (tok[0] == "array") {
      arrays.push_back({tok[1], std::stoull(tok[2]), std::stoull(tok[3])});
    } else {
      fail(strf("checkpoint manifest: unknown entry '%s'", tok[0].c_str()));
    }
  }

  field::FieldConfig fcfg = field_config_for(ckpt.config, ckpt.taxonomy);
  ckpt.store = field::ParamStore<float>::init(fcfg, 0);

  std::ifstream pf((fs::path(dir) / "params.bin").string(), std::ios::binary);
  if (!pf) fail("checkpoint params.bin not found");
  std::map<std::string, std::vector<float>> loaded;
  for (const auto& a : arrays) {
    pf.seekg(std::streamoff(a.offset));
    std::vector<float> data(a.count);
    read_f32_block(pf, data.data(), a.count, a.name);
    loaded[a.name] = std::move(data);
  }
  for (auto& g : ckpt.store.groups()) {
    auto it = loaded.find("param:" + g.name);
    if (it == loaded.end()) fail(strf("checkpoint missing group %s", g.name.c_str()));
    if (it->second.size() != g.size)
      fail(strf("checkpoint group %s has %zu values, expected %zu", g.name.c_str(),
                it->second.size(), g.size));
    std::copy(it->second.begin(), it->second.end(), g.data);
    auto im = loaded.find("adam-m:" + g.name);
    if (im != loaded.end()) ckpt.adam.m[g.name] = im->second;
    auto iv = loaded.find("adam-v:" + g.name);
    if (iv != loaded.end()) ckpt.adam.v[g.name] = iv->second;
  }

  std::ifstream af((fs::path(dir) / "assign.txt").string());
  if (af) {
    size_t n_frames = 0;
    af >> n_frames;
    ckpt.assignments.assign(n_frames, {});
    std::string word;
    for (size_t i = 0; i < n_frames; ++i) {
      size_t idx = 0, n_ids = 0;
      af >> word >> idx >> n_ids;
      if (n_ids > 0) {
        ckpt.assignments[idx].frame = static_cast<int>(idx);
        ckpt.assignments[idx].local_to_channel.resize(n_ids);
        for (size_t j = 0; j < n_ids; ++j) af >> ckpt.assignments[idx].local_to_channel[j];
      }
    }
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// trainer

field::FieldConfig field_config_for(const TrainConfig& cfg, const dataset::ClassTaxonomy& tax) {
  field::FieldConfig f = cfg.field;
  f.n_classes = tax.n_classes;
  f.n_instance_channels = tax.n_instance_channels;
  f.validate();
  return f;
}

Trainer::Trainer(const TrainConfig& cfg, dataset::SceneDataset dataset)
    : cfg_(cfg), ds_(std::move(dataset)), rng_(cfg.seed, 0x7261696eull) {
  ds_.validate();
  for (size_t i = 0; i < ds_.frames.size(); ++i) {
    bool held = cfg_.holdout_every > 0 && (i % cfg_.holdout_every == 0);
    for (int h : cfg_.holdout_frames) held |= (h == static_cast<int>(i));
    (held ? holdout_frames_ : train_frames_).push_back(static_cast<int>(i));
  }
  if (train_frames_.empty()) fail_usage("trainer: every frame is held out");

  store_ = field::ParamStore<float>::init(field_config_for(cfg_, ds_.taxonomy), cfg_.seed);
  assignments_.assign(ds_.frames.size(), {});

  thing_pixels_.resize(ds_.frames.size());
  for (size_t f = 0; f < ds_.frames.size(); ++f) {
    const auto& fr = ds_.frames[f];
    thing_pixels_[f].resize(fr.n_local_instances());
    for (uint32_t p = 0; p < fr.n_pixels(); ++p)
      if (fr.inst[p] != dataset::kNoInstance) thing_pixels_[f][fr.inst[p] - 1].push_back(p);
  }

  if (cfg_.weights.feat != 0)
    extractor_ = supervision::FeatureExtractor<float>::create(cfg_.extractor);
  else
    extractor_ = supervision::FeatureExtractor<float>::identity();
  if (cfg_.weights.feat != 0 && cfg_.patch_side < extractor_.min_patch())
    fail_usage(strf("trainer: patch side %d below extractor minimum %d", cfg_.patch_side,
                    extractor_.min_patch()));
}

void Trainer::refresh_assignments() {
  field::FieldConfig fcfg = field_config_for(cfg_, ds_.taxonomy);
  fcfg.cascade = false;  // assignment reads only the fine branch
  const int V = fcfg.n_instance_channels;
  const int N = cfg_.render.n_samples;
  for (int f : train_frames_) {
    const auto& per_id = thing_pixels_[f];
    const int n_ids = static_cast<int>(per_id.size());
    if (n_ids == 0) {
      assignments_[f] = {};
      continue;
    }
    int quota = std::max(1, cfg_.assign_samples / n_ids);
    std::vector<uint32_t> pixels;
    std::vector<int> local_ids;
    for (int j = 0; j < n_ids; ++j) {
      size_t count = per_id[j].size();
      size_t stride = std::max<size_t>(1, count / quota);
      for (size_t k = 0; k < count && static_cast<int>(k / stride) < quota; k += stride) {
        pixels.push_back(per_id[j][k]);
        local_ids.push_back(j);
      }
    }
    const auto& fr = ds_.frames[f];
    supervision::PatchBatch probe;
    probe.patch_side = 1;
    for (uint32_t p : pixels) {
      int px = p % fr.camera.width, py = p / fr.camera.width;
      probe.rays.push_back(dataset::ray_for_pixel(fr.camera, px + 0.5, py + 0.5));
      probe.t_near_of_ray.push_back(fr.camera.t_near);
      probe.t_far_of_ray.push_back(fr.camera.t_far);
    }
    BatchGeometry geom = build_geometry(probe, N, false, rng_);
    BatchForward<float> fwd;
    forward_batch(fcfg, store_.params, geom, cfg_.render.min_weight_eval, cfg_.render.chunk,
                  cfg_.render.n_threads > 0 ? cfg_.render.n_threads : default_thread_count(), fwd);
    assignments_[f] = supervision::assign_instances(f, local_ids, fwd.comp.v_prob, V);
  }
}

LossBreakdown Trainer::step(int iteration) {
  if (cfg_.assign_every > 0 && iteration % cfg_.assign_every == 0) refresh_assignments();

  field::FieldConfig fcfg = field_config_for(cfg_, ds_.taxonomy);
  Rng patch_rng = rng_.fork(0xA11, uint64_t(iteration));
  supervision::PatchBatch batch = supervision::sample_patches(
      ds_, train_frames_, cfg_.patch_side, cfg_.patches_per_step, patch_rng);
  auto groups = supervision::cluster_same_label(batch, cfg_.max_groups);
  BatchGeometry geom =
      build_geometry(batch, cfg_.render.n_samples, true, rng_.fork(0x57, uint64_t(iteration)));

  BatchForward<float> fwd;
  const int threads = cfg_.render.n_threads > 0 ? cfg_.render.n_threads : default_thread_count();
  forward_batch(fcfg, store_.params, geom, cfg_.render.min_weight_eval, cfg_.render.chunk, threads,
                fwd);

  std::vector<uint16_t> inst_t = supervision::instance_targets(batch, ds_, assignments_);

  TermFlags flags;
  flags.distill = fcfg.cascade;
  flags.feat = cfg_.weights.feat != 0;

  GradSeeds<float> seeds;
  store_.zero_grads();
  LossBreakdown lb = compute_losses(fcfg, store_.params, batch, geom, fwd, groups, inst_t,
                                    extractor_, cfg_.weights, flags, &seeds, &store_.grads);
  total_loss(lb, cfg_.weights);
  backward_batch(fcfg, store_.params, geom, fwd, seeds, cfg_.render.chunk, threads, store_.grads);
  adam_step(store_, adam_, cfg_);
  return lb;
}

Checkpoint Trainer::make_checkpoint(int iteration) const {
  Checkpoint c;
  c.config = cfg_;
  c.taxonomy = ds_.taxonomy;
  c.iteration = iteration;
  c.rng_state = rng_.state();
  c.store = store_;
  c.adam = adam_;
  c.assignments = assignments_;
  return c;
}

TrainResult Trainer::run() {
  TrainResult res;
  std::error_code ec;
  fs::create_directories(cfg_.out_dir, ec);
  save_config_file(cfg_, (fs::path(cfg_.out_dir) / "config.txt").string());
  std::ofstream log((fs::path(cfg_.out_dir) / "train_log.txt").string());

  int it = 0;
  try {
    for (it = 0; it < cfg_.iters; ++it) {
      LossBreakdown lb = step(it);
      res.log.push_back(lb);
      res.last = lb;
      if (cfg_.log_every > 0 && (it % cfg_.log_every == 0 || it + 1 == cfg_.iters)) {
        std::string line = strf(
            "step %d total %.6f color %.6f distill %.6f sem %.6f inst %.6f seg %.6f feat %.6f "
            "tv %.6f disp %.6f",
            it, lb.total, lb.color, lb.distill, lb.sem, lb.inst, lb.seg, lb.feat, lb.tv, lb.disp);
        printf("%s\n", line.c_str());
        fflush(stdout);
        log << line << "\n";
        log.flush();
      }
      if (cfg_.ckpt_every > 0 && (it + 1) % cfg_.ckpt_every == 0 && it + 1 < cfg_.iters)
        save_checkpoint(make_checkpoint(it + 1), (fs::path(cfg_.out_dir) / strf("ckpt_%06d", it + 1)).string());
    }
  } catch (const std::exception& e) {
    save_checkpoint(make_checkpoint(it), (fs::path(cfg_.out_dir) / "ckpt_emergency").string());
    fail(strf("%s [training aborted at step %d; emergency checkpoint written]", e.what(), it));
  }
  res.checkpoint_dir = (fs::path(cfg_.out_dir) / "ckpt_final").string();
  save_checkpoint(make_checkpoint(cfg_.iters), res.checkpoint_dir);
  return res;
}

// ---------------------------------------------------------------------------
// gradcheck

TrainConfig gradcheck_preset() {
  TrainConfig p;
  p.field.enc.geometric = {{4, 8}, 2, 2.0};
  p.field.enc.understanding = {{4}, 1, 2.0};
  p.field.enc.n_freq = 2;
  p.field.enc.sh_degree = 2;
  p.field.geo = {8, 2};
  p.field.geo_feat_dim = 6;
  p.field.app = {8, 2};
  p.field.sem = {8, 2};
  p.field.inst = {8, 2};
  // ReLU kinks make finite differences unreliable; the preset checks the same
  // chain rule machinery through smooth activations
  p.field.act = field::Activation::kSoftplus;
  p.field.cascade = true;
  p.field.coarse_levels = 1;
  p.field.coarse_geo = {6, 2};
  p.field.coarse_app = {6, 2};
  p.render.n_samples = 6;
  p.render.min_weight_eval = -1.0;  // shade every sample: keeps the loss smooth
  p.render.chunk = 1 << 20;
  p.patch_side = 32;
  p.patches_per_step = 1;
  p.max_groups = 16;
  return p;
}

std::vector<std::string> GradcheckReport::offenders(double tol) const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (r.max_rel_err > tol)
      out.push_back(strf("%s / %s: rel err %.3g", r.group.c_str(), r.term.c_str(), r.max_rel_err));
  return out;
}

GradcheckReport gradcheck(const TrainConfig& preset, int n_probe, uint64_t seed, double fd_h) {
  synth::SynthScene scene = synth::make_scene("three-boxes");
  dataset::SceneDataset ds = synth::make_dataset(scene, 2, 40, 40, synth::NoiseSpec{}, "");
  field::FieldConfig fcfg = field_config_for(preset, ds.taxonomy);

  auto store = field::ParamStore<double>::init(fcfg, seed);
  auto extractor = supervision::FeatureExtractor<double>::create(preset.extractor);

  Rng rng(seed, 0x67636bull);
  Rng patch_rng = rng.fork(1);
  supervision::PatchBatch batch =
      supervision::sample_patches(ds, {0, 1}, preset.patch_side, preset.patches_per_step, patch_rng);
  auto groups = supervision::cluster_same_label(batch, preset.max_groups);
  BatchGeometry geom = build_geometry(batch, preset.render.n_samples, true, rng.fork(2));

  // frozen identity-shifted assignments: local id j -> channel j+1
  std::vector<supervision::InstanceAssignment> assignments(ds.frames.size());
  for (size_t f = 0; f < ds.frames.size(); ++f) {
    assignments[f].frame = static_cast<int>(f);
    int n_ids = ds.frames[f].n_local_instances();
    for (int j = 0; j < n_ids; ++j) assignments[f].local_to_channel.push_back(j + 1);
  }
  std::vector<uint16_t> inst_t = supervision::instance_targets(batch, ds, assignments);

  supervision::LossWeights ones;
  ones.distill = ones.sem = ones.inst = ones.seg = ones.feat = ones.reg = 1.0;
  ones.charbonnier_eps = preset.weights.charbonnier_eps;
  TermFlags all;

  // the distillation teacher is detached: freeze it at the base parameters so
  // the finite differences measure the same (stop-gradient) objective the
  // analytic backward computes
  DistillTeacher<double> teacher;
  {
    BatchForward<double> fwd;
    forward_batch(fcfg, store.params, geom, preset.render.min_weight_eval, preset.render.chunk, 1,
                  fwd);
    teacher.C = fwd.comp.C;
    teacher.sigma = fwd.sigma;
  }

  auto eval_values = [&]() {
    BatchForward<double> fwd;
    forward_batch(fcfg, store.params, geom, preset.render.min_weight_eval, preset.render.chunk, 1,
                  fwd);
    return compute_losses<double>(fcfg, store.params, batch, geom, fwd, groups, inst_t, extractor,
                                  ones, all, nullptr, nullptr, &teacher);
  };

  // analytic gradients, one backward per term plus the weighted total
  std::vector<std::string> terms = TermFlags::names();
  terms.push_back("total");
  std::map<std::string, std::map<std::string, std::vector<double>>> analytic;
  {
    BatchForward<double> fwd;
    forward_batch(fcfg, store.params, geom, preset.render.min_weight_eval, preset.render.chunk, 1,
                  fwd);
    for (const std::string& term : terms) {
      store.zero_grads();
      GradSeeds<double> seeds;
      TermFlags flags = term == "total" ? all : TermFlags::only(term);
      const supervision::LossWeights& w_used = term == "total" ? preset.weights : ones;
      compute_losses(fcfg, store.params, batch, geom, fwd, groups, inst_t, extractor, w_used,
                     flags, &seeds, &store.grads, &teacher);
      backward_batch(fcfg, store.params, geom, fwd, seeds, preset.render.chunk, 1, store.grads);
      for (auto& g : store.groups())
        analytic[term][g.name] = std::vector<double>(g.grad, g.grad + g.size);
    }
  }

  auto term_value = [&](const LossBreakdown& lb, const std::string& term) -> double {
    if (term == "color") return lb.color;
    if (term == "distill") return lb.distill;
    if (term == "sem") return lb.sem;
    if (term == "inst") return lb.inst;
    if (term == "seg") return lb.seg;
    if (term == "feat") return lb.feat;
    if (term == "tv") return lb.tv;
    if (term == "disp") return lb.disp;
    LossBreakdown copy = lb;
    return total_loss(copy, preset.weights);
  };

  GradcheckReport report;
  std::map<std::pair<std::string, std::string>, double> worst;
  Rng probe_rng = rng.fork(3);
  for (auto& g : store.groups()) {
    for (int p = 0; p < n_probe; ++p) {
      size_t idx = probe_rng.uniform_int(static_cast<uint32_t>(g.size));
      double saved = g.data[idx];
      g.data[idx] = saved + fd_h;
      LossBreakdown p1 = eval_values();
      g.data[idx] = saved - fd_h;
      LossBreakdown m1 = eval_values();
      g.data[idx] = saved + 0.5 * fd_h;
      LossBreakdown p2 = eval_values();
      g.data[idx] = saved - 0.5 * fd_h;
      LossBreakdown m2 = eval_values();
      g.data[idx] = saved;
      for (const std::string& term : terms) {
        double fd1 = (term_value(p1, term) - term_value(m1, term)) / (2.0 * fd_h);
        double fd2 = (term_value(p2, term) - term_value(m2, term)) / fd_h;
        // central differences are only valid where the loss is smooth across
        // [theta-h, theta+h]; a step-halved estimate that disagrees flags a
        // kink crossing (the |x| extractor nonlinearity), which is skipped
        if (std::fabs(fd1 - fd2) > 0.1 * std::max({std::fabs(fd1), std::fabs(fd2), 1e-6})) {
          ++report.skipped_kinks;
          continue;
        }
        double fd = (4.0 * fd2 - fd1) / 3.0;  // Richardson: O(h^4) truncation
        double ga = analytic[term][g.name][idx];
        // the 1e-3 denominator floor keeps the check absolute (at ~1e-7) for
        // gradients small enough to sit in the finite-difference noise
        double rel = std::fabs(ga - fd) / std::max({std::fabs(ga), std::fabs(fd), 1e-3});
        auto key = std::make_pair(g.name, term);
        worst[key] = std::max(worst[key], rel);
      }
    }
  }
  for (auto& [key, rel] : worst) {
    report.rows.push_back({key.first, key.second, rel});
    report.worst = std::max(report.worst, rel);
  }
  return report;
}

// ---------------------------------------------------------------------------
// evaluation

EvalReport evaluate(const field::ParamStore<float>& store, const dataset::SceneDataset& ds,
                    const std::vector<int>& views, int n_samples,
                    const rendering::RenderConfig& rc) {
  if (views.empty()) fail_usage("evaluate: no views given");
  EvalReport rep;
  rep.views = views;
  rendering::RenderConfig cfg = rc;
  cfg.n_samples = n_samples;
  cfg.stratified = false;

  double sq_err = 0;
  size_t n_vals = 0;
  std::vector<std::vector<uint16_t>> pred_sem, pred_inst;
  std::vector<const uint16_t*> pred_sem_p, pred_inst_p, gt_sem_p, gt_inst_p;
  size_t n_px = 0;
  for (int v : views) {
    const dataset::Frame& fr = ds.frames.at(v);
    if (!fr.has_gt()) fail(strf("evaluate: frame %d has no ground-truth labels", v));
    rendering::PanopticImage img = rendering::render_view(store, fr.camera, cfg, ds.taxonomy.thing);
    n_px = fr.n_pixels();
    for (size_t i = 0; i < fr.color.size(); ++i) {
      double d = double(img.color[i]) - double(fr.color[i]);
      sq_err += d * d;
      ++n_vals;
    }
    pred_sem.push_back(img.sem_label);
    pred_inst.push_back(img.inst_label);
  }
  for (size_t i = 0; i < views.size(); ++i) {
    pred_sem_p.push_back(pred_sem[i].data());
    pred_inst_p.push_back(pred_inst[i].data());
    gt_sem_p.push_back(ds.frames[views[i]].gt_sem.data());
    gt_inst_p.push_back(ds.frames[views[i]].gt_inst.data());
  }
  double mse = sq_err / double(n_vals);
  rep.psnr = mse <= 0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
  rep.iou = metrics::miou(pred_sem_p, gt_sem_p, n_px, ds.taxonomy.n_classes, dataset::kVoidClass);
  auto pred_set = metrics::SegmentSet::from_label_maps(pred_sem_p, pred_inst_p, n_px,
                                                       ds.taxonomy.thing, dataset::kVoidClass,
                                                       gt_sem_p);
  auto gt_set = metrics::SegmentSet::from_label_maps(gt_sem_p, gt_inst_p, n_px, ds.taxonomy.thing,
                                                     dataset::kVoidClass);
  rep.pq = metrics::panoptic_quality(pred_set, gt_set);
  return rep;
}

void write_eval_report(const EvalReport& rep, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  {
    std::ofstream f((fs::path(dir) / "report.txt").string());
    f << "views:";
    for (int v : rep.views) f << " " << v;
    f << "\n";
    f << strf("psnr %.4f\n", rep.psnr);
    f << strf("miou %.6f\n", rep.iou.miou);
    f << strf("pq %.6f\nsq %.6f%s\nrq %.6f\n", rep.pq.pq, rep.pq.sq,
              rep.pq.sq_vacuous ? " (vacuous)" : "", rep.pq.rq);
    f << strf("tp %d fp %d fn %d\n", rep.pq.tp, rep.pq.fp, rep.pq.fn);
    for (size_t c = 0; c < rep.iou.class_iou.size(); ++c)
      if (rep.iou.class_iou[c] >= 0)
        f << strf("iou class %zu %.6f%s\n", c, rep.iou.class_iou[c],
                  rep.iou.in_mean[c] ? "" : " (excluded)");
    for (const auto& row : rep.pq.per_class)
      f << strf("pq class %d pq %.6f sq %.6f rq %.6f tp %d fp %d fn %d\n", row.sem_class, row.pq,
                row.sq, row.rq, row.tp, row.fp, row.fn);
  }
  {
    nlohmann::json j;
    j["views"] = rep.views;
    j["psnr"] = rep.psnr;
    j["miou"] = rep.iou.miou;
    j["pq"] = rep.pq.pq;
    j["sq"] = rep.pq.sq;
    j["sq_vacuous"] = rep.pq.sq_vacuous;
    j["rq"] = rep.pq.rq;
    j["tp"] = rep.pq.tp;
    j["fp"] = rep.pq.fp;
    j["fn"] = rep.pq.fn;
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& row : rep.pq.per_class)
      per_class.push_back({{"class", row.sem_class}, {"pq", row.pq}, {"sq", row.sq},
                           {"rq", row.rq}, {"tp", row.tp}, {"fp", row.fp}, {"fn", row.fn}});
    j["pq_per_class"] = per_class;
    nlohmann::json ious = nlohmann::json::object();
    for (size_t c = 0; c < rep.iou.class_iou.size(); ++c)
      if (rep.iou.class_iou[c] >= 0) ious[std::to_string(c)] = rep.iou.class_iou[c];
    j["iou_per_class"] = ious;
    std::ofstream f((fs::path(dir) / "report.json").string());
    f << j.dump(2) << "\n";
  }
}

}  // namespace panfield::trainer

