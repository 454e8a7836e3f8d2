// The optimization loop: Eq.-style total loss assembly over patch batches,
// first-order moment updates, per-frame instance assignment refresh,
// checkpointing, gradient checking and evaluation.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "panfield/dataset.hpp"
#include "panfield/field.hpp"
#include "panfield/metrics.hpp"
#include "panfield/rendering.hpp"
#include "panfield/supervision.hpp"

namespace panfield::trainer {

struct TrainConfig {
  // data
  std::string data_dir;
  int holdout_every = 0;            // frame i is held out when i % holdout_every == 0
  std::vector<int> holdout_frames;  // explicit extra holdouts
  // field (n_classes / n_instance_channels come from the dataset taxonomy)
  field::FieldConfig field;
  // rendering during training / evaluation
  rendering::RenderConfig render;
  int eval_samples = 128;
  // schedule
  int iters = 2000;
  int patch_side = 32;
  int patches_per_step = 1;
  uint64_t seed = 1;
  int ckpt_every = 0;  // 0 = only final
  int assign_every = 250;
  int assign_samples = 256;
  int max_groups = 64;
  int log_every = 25;
  std::string out_dir = "out";
  // optimizer
  double lr_grid = 5e-3, lr_mlp = 1e-3;
  double beta1 = 0.9, beta2 = 0.99, adam_eps = 1e-8;
  // losses
  supervision::LossWeights weights;
  supervision::ExtractorConfig extractor;
};

// flat key=value config with [section] headers; every key has a CLI mirror
TrainConfig default_config();
void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::pair<std::string, std::string>> config_to_kv(const TrainConfig& cfg);
std::vector<std::string> config_keys();
TrainConfig load_config_file(const std::string& path, TrainConfig base);
void save_config_file(const TrainConfig& cfg, const std::string& path);

// ---------------------------------------------------------------------------
// loss assembly

struct LossBreakdown {
  double color = 0, distill = 0, sem = 0, inst = 0, seg = 0, feat = 0, tv = 0, disp = 0;
  double total = 0;
};

// L = color + a_distill*distill + a_sem*sem + a_ins*inst + a_seg*seg +
//     a_feat*feat + a_reg*(tv + disp). Throws naming any non-finite term.
double total_loss(LossBreakdown& terms, const supervision::LossWeights& w);

struct TermFlags {
  bool color = true, distill = true, sem = true, inst = true, seg = true, feat = true, tv = true,
       disp = true;
  static TermFlags only(const std::string& name);
  static std::vector<std::string> names();
};

// ---------------------------------------------------------------------------
// batch pipeline (shared by the trainer and gradcheck)

struct BatchGeometry {
  int n_rays = 0, n_samples = 0;
  std::vector<Vec3> xs, dirs;   // [n_rays * N]
  std::vector<double> ts;       // [n_rays * N]
  std::vector<double> t_far;    // [n_rays]
};

BatchGeometry build_geometry(const supervision::PatchBatch& batch, int n_samples, bool stratified,
                             const Rng& base_rng);

// The recorded forward pass ("loss graph"): per-chunk activation traces plus
// batch-wide per-ray aggregates. Chunk boundaries are fixed by chunk_rays, so
// gradient accumulation order does not depend on the thread count.
template <class T>
struct BatchForward {
  int n_rays = 0, n_samples = 0, chunk_rays = 0;
  std::vector<field::EvalTrace<T>> fine_chunks;
  std::vector<T> sigma;        // [n_rays*N], assembled across chunks
  std::vector<T> weights;      // [n_rays*N]
  std::vector<double> t_resid; // [n_rays]
  rendering::CompositeResult<T> comp;
  bool has_coarse = false;
  std::vector<field::EvalTrace<T>> coarse_chunks;
  std::vector<T> coarse_sigma, coarse_weights;
  std::vector<double> coarse_t_resid;
  rendering::CompositeResult<T> coarse_comp;
};

template <class T>
void forward_batch(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                   const BatchGeometry& geom, double min_weight_eval, int chunk_rays, int threads,
                   BatchForward<T>& out);

// Loss evaluation over a forward batch; when sink != nullptr the per-term
// gradient seeds (scaled by the loss weights) are accumulated for backward.
template <class T>
struct GradSeeds {
  rendering::RayGrads<T> fine, coarse;
};

// Distillation targets. The fine branch is the teacher and is detached: no
// gradient flows into it. Finite-difference checks must therefore evaluate
// the distill term against a teacher frozen at the base parameters, which is
// what an explicit DistillTeacher provides.
template <class T>
struct DistillTeacher {
  std::vector<T> C;      // [n_rays*3]
  std::vector<T> sigma;  // [n_rays*N]
};

template <class T>
LossBreakdown compute_losses(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                             const supervision::PatchBatch& batch, const BatchGeometry& geom,
                             const BatchForward<T>& fwd,
                             const std::vector<supervision::ClusterGroup>& groups,
                             const std::vector<uint16_t>& inst_targets,
                             const supervision::FeatureExtractor<T>& extractor,
                             const supervision::LossWeights& w, const TermFlags& flags,
                             GradSeeds<T>* sink, field::FieldParams<T>* tv_grads,
                             const DistillTeacher<T>* frozen_teacher = nullptr);

// Full backward from seeds into parameter gradients (chunk-deterministic).
template <class T>
void backward_batch(const field::FieldConfig& cfg, const field::FieldParams<T>& params,
                    const BatchGeometry& geom, const BatchForward<T>& fwd,
                    const GradSeeds<T>& seeds, int chunk_rays, int threads,
                    field::FieldParams<T>& grads);

// ---------------------------------------------------------------------------
// optimizer

struct AdamState {
  std::map<std::string, std::vector<float>> m, v;
  int64_t t = 0;
};

void adam_step(field::ParamStore<float>& store, AdamState& state, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
  TrainConfig config;
  dataset::ClassTaxonomy taxonomy;  // lets render work without the dataset
  int iteration = 0;
  std::pair<uint64_t, uint64_t> rng_state{0, 0};
  field::ParamStore<float> store;
  AdamState adam;
  std::vector<supervision::InstanceAssignment> assignments;  // per frame
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

// ---------------------------------------------------------------------------
// driver

struct TrainResult {
  LossBreakdown last;
  std::vector<LossBreakdown> log;  // one entry per step
  std::string checkpoint_dir;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, dataset::SceneDataset dataset);

  TrainResult run();
  LossBreakdown step(int iteration);
  void refresh_assignments();

  const field::ParamStore<float>& store() const { return store_; }
  field::ParamStore<float>& store() { return store_; }
  const std::vector<int>& train_frames() const { return train_frames_; }
  const std::vector<int>& holdout_frames() const { return holdout_frames_; }
  const dataset::SceneDataset& data() const { return ds_; }
  Checkpoint make_checkpoint(int iteration) const;

 private:
  TrainConfig cfg_;
  dataset::SceneDataset ds_;
  field::ParamStore<float> store_;
  AdamState adam_;
  std::vector<supervision::InstanceAssignment> assignments_;
  std::vector<std::vector<std::vector<uint32_t>>> thing_pixels_;  // frame -> local id -> pixels
  std::vector<int> train_frames_, holdout_frames_;
  supervision::FeatureExtractor<float> extractor_;
  Rng rng_;
};

// Builds the field config for a dataset (fills U/V from the taxonomy).
field::FieldConfig field_config_for(const TrainConfig& cfg, const dataset::ClassTaxonomy& tax);

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckRow {
  std::string group, term;
  double max_rel_err = 0;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double worst = 0;
  int skipped_kinks = 0;  // probes rejected for crossing a nonsmooth point
  std::vector<std::string> offenders(double tol) const;
};

// Tiny smooth preset: small grids and decoders, softplus activations, every
// sample shaded. 64-bit throughout.
TrainConfig gradcheck_preset();
GradcheckReport gradcheck(const TrainConfig& preset, int n_probe, uint64_t seed = 17,
                          double fd_h = 1e-5);

// ---------------------------------------------------------------------------
// evaluation

struct EvalReport {
  double psnr = 0;
  metrics::IouReport iou;
  metrics::PQReport pq;
  std::vector<int> views;
};

EvalReport evaluate(const field::ParamStore<float>& store, const dataset::SceneDataset& ds,
                    const std::vector<int>& views, int n_samples, const rendering::RenderConfig& rc);
void write_eval_report(const EvalReport& rep, const std::string& dir);

}  // namespace panfield::trainer
