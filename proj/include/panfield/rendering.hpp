// Ray sampling, transmittance weights, per-pixel panoptic compositing and
// full-view rendering, plus the exact backward pass from per-ray gradients to
// per-sample field gradients.
#pragma once

#include <array>
#include <functional>
#include <vector>

#include "panfield/dataset.hpp"
#include "panfield/field.hpp"

namespace panfield::rendering {

struct RenderConfig {
  int n_samples = 64;
  bool stratified = false;
  uint64_t seed = 0;
  int chunk = 2048;              // rays per evaluation batch
  double min_weight_eval = 0.0;  // skip shading where w <= this (0 keeps exact results)
  int n_threads = 0;             // 0 = hardware concurrency
};

// N distances in [t_near, t_far]: bucket midpoints when deterministic,
// uniform jitter inside each bucket when stratified. Sorted ascending.
std::vector<double> sample_along_ray(double t_near, double t_far, int n, bool stratified, Rng& rng);

// w_i = exp(-sum_{j<i} sigma_j dt_j) * (1 - exp(-sigma_i dt_i)), with
// dt_i = t_{i+1} - t_i and dt_N = t_far - t_N. t_resid receives the residual
// transmittance; sum(w) + t_resid == 1 up to rounding. Throws on unsorted ts.
void compute_weights(const std::vector<double>& sigmas, const std::vector<double>& ts,
                     double t_far, std::vector<double>& weights, double& t_resid);

// Spec-level sample set for the single-ray operations.
struct RaySampleSet {
  std::vector<double> ts;
  double t_far = 0;
  std::vector<double> sigmas;
  std::vector<double> weights;  // filled by compute_weights
  double t_resid = 1.0;
  std::vector<std::array<double, 3>> colors;
  std::vector<std::vector<double>> us, vs;  // per-sample logits
};

struct PanopticPixel {
  std::array<double, 3> C{};
  std::vector<double> U, V;  // simplex distributions
  double depth = 0, disparity = 0;
  int sem_label = 0;
  int inst_label = -1;  // -1 when the semantic argmax is not a thing class
};

// C = sum w c; U = softmax(sum w u); V = softmax(sum w v); D = sum w t;
// disparity = sum w / t. Labels by argmax, instance only on thing classes.
PanopticPixel composite_pixel(const RaySampleSet& s, const std::vector<uint8_t>& thing_mask);

struct PanopticImage {
  int width = 0, height = 0, n_classes = 0, n_instance_channels = 0;
  std::vector<float> color;      // H*W*3
  std::vector<float> sem_prob;   // H*W*U
  std::vector<float> inst_prob;  // H*W*V
  std::vector<float> depth, disparity;
  std::vector<uint16_t> sem_label;
  std::vector<uint16_t> inst_label;  // instance channel; 0 on stuff pixels
};

// ---------------------------------------------------------------------------
// batched helpers shared by render_view and the trainer

// Weights for nr rays of N samples each; double accumulation inside.
template <class T>
void batch_weights(const T* sigma, const double* ts, const double* t_far, int nr, int N,
                   T* weights, double* t_resid);

template <class T>
struct CompositeResult {
  int n_rays = 0, n_samples = 0, n_classes = 0, n_instance_channels = 0;
  std::vector<T> C;            // [nr,3]
  std::vector<T> u_agg, v_agg; // pre-softmax aggregates
  std::vector<T> u_prob, v_prob;
  std::vector<T> depth, disp;
};

template <class T>
void composite_from_trace(const field::FieldConfig& cfg, const field::EvalTrace<T>& trace,
                          const double* ts, const T* weights, int nr, int N,
                          CompositeResult<T>& out);

// Upstream per-ray gradients; empty vectors mean zero.
template <class T>
struct RayGrads {
  std::vector<T> dC;             // [nr,3]
  std::vector<T> du_agg, dv_agg; // w.r.t. pre-softmax aggregates
  std::vector<T> ddisp;          // [nr]
  std::vector<T> dsigma_direct;  // [nr*N], e.g. from density distillation
  void ensure(int nr, int N, int U, int V, bool with_uv);
};

// Chain from per-ray gradients through w_i (including the transmittance
// suffix term) to per-sample gradients matching the trace's compact rows.
template <class T>
void composite_backward(const field::FieldConfig& cfg, const field::EvalTrace<T>& trace,
                        const double* ts, const double* t_far, const T* weights, int nr, int N,
                        const RayGrads<T>& rg, field::SampleGrads<T>& out);

// ---------------------------------------------------------------------------
// full views

// Batched field evaluation callback for non-learned fields (the analytic
// oracle): fills sigma [n], rgb [n*3], and raw logits u [n*U], v [n*V].
using OracleFieldFn = std::function<void(const Vec3* xs, const Vec3* ds, size_t n, double* sigma,
                                         double* rgb, double* u, double* v)>;

template <class T>
PanopticImage render_view(const field::ParamStore<T>& store, const dataset::CameraModel& camera,
                          const RenderConfig& config, const std::vector<uint8_t>& thing_mask);

PanopticImage render_view_oracle(const OracleFieldFn& field_fn, int n_classes,
                                 int n_instance_channels, const dataset::CameraModel& camera,
                                 const RenderConfig& config, const std::vector<uint8_t>& thing_mask);

}  // namespace panfield::rendering
