// Patch-based ray sampling, same-label clustering, per-frame instance linear
// assignment, the perceptual feature extractor, and every loss term with its
// exact backward seed into the render gradients.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "panfield/dataset.hpp"
#include "panfield/encoding.hpp"
#include "panfield/metrics.hpp"
#include "panfield/rendering.hpp"

namespace panfield::supervision {

struct LossWeights {
  double distill = 1.2;
  double sem = 0.1;
  double inst = 0.1;
  double seg = 0.12;
  double feat = 0.2;
  double reg = 0.001;
  double charbonnier_eps = 1e-4;
};

// ---------------------------------------------------------------------------
// patches

struct Patch {
  int frame = 0;
  int x0 = 0, y0 = 0, side = 0;
  size_t ray_offset = 0;  // first ray of this patch in the batch
};

struct PatchBatch {
  int patch_side = 0;
  std::vector<Patch> patches;
  // per ray, patches concatenated row-major
  std::vector<dataset::Ray> rays;
  std::vector<int> frame_of_ray;
  std::vector<uint32_t> pixel_of_ray;
  std::vector<double> t_near_of_ray, t_far_of_ray;
  std::vector<float> target_rgb;  // [n*3]
  std::vector<uint16_t> sem;      // pseudo semantic labels
  std::vector<uint16_t> inst;     // stored-form instance ids (0 = none)
  std::vector<float> lambda;

  size_t n_rays() const { return rays.size(); }
};

// n_patches patches uniform over (frame in frame_ids, valid top-left).
PatchBatch sample_patches(const dataset::SceneDataset& ds, const std::vector<int>& frame_ids,
                          int patch_side, int n_patches, Rng& rng);

// ---------------------------------------------------------------------------
// same-label clusters (patch-local)

struct ClusterGroup {
  int label = 0;                // the shared pseudo semantic label
  std::vector<int> ray_indices;
};

// Groups each patch's rays by pseudo semantic label; groups smaller than two
// rays are dropped. When max_groups caps the result the largest groups win
// (ties by lower label, then patch order).
std::vector<ClusterGroup> cluster_same_label(const PatchBatch& batch, int max_groups);

// ---------------------------------------------------------------------------
// instance assignment

struct InstanceAssignment {
  int frame = -1;
  std::vector<int> local_to_channel;        // [V_frame], values in 1..V-1
  std::vector<std::vector<double>> cost;    // cost matrix used
  double total_cost = 0;

  int channel_for_local(int local_id) const;
};

// cost[j][k-1] = mean over pixels with frame-local id j of -log V_k, solved by
// minimum-cost matching into channels 1..V-1. local_ids are 0-based frame-local
// ids per sampled pixel; v_prob rows are the rendered instance distributions.
InstanceAssignment assign_instances(int frame, const std::vector<int>& local_ids,
                                    const std::vector<float>& v_prob, int n_channels);

// ---------------------------------------------------------------------------
// feature extractor

struct ExtractorConfig {
  std::string tag = "seeded-random-conv";  // | "identity" | "precomputed-file"
  uint64_t seed = 7;
  int channels = 32;
};

// Fixed (non-learned) patch embedding. The default is three stride-2
// convolutions with seeded random weights and |x| nonlinearities; "identity"
// returns the flattened patch (debug).
template <class T>
class FeatureExtractor {
 public:
  static FeatureExtractor identity();
  static FeatureExtractor seeded_conv(uint64_t seed, int out_channels);
  static FeatureExtractor create(const ExtractorConfig& cfg);

  int min_patch() const { return identity_ ? 1 : 32; }
  int out_channels() const { return identity_ ? 3 : chans_.back(); }
  size_t out_dim(int patch_side) const;

  struct Trace {
    std::vector<std::vector<T>> pre;  // pre-|x| activations per conv layer
    std::vector<int> sides;
  };

  // rgb is interleaved [side*side*3]
  std::vector<T> forward(const T* rgb, int side, Trace* trace = nullptr) const;
  // accumulates scale * d(features)/d(rgb)^T dfeat into drgb
  void backward(const Trace& trace, const T* rgb, int side, const T* dfeat, double scale,
                T* drgb) const;

 private:
  bool identity_ = true;
  std::vector<int> chans_;               // {3, 16, 32, out}
  std::vector<std::vector<T>> weights_;  // per layer [oc][ic][3][3]
};

// ---------------------------------------------------------------------------
// losses (values + backward seeds)

// mean over elements of sqrt((a-b)^2 + eps^2)
template <class T>
double charbonnier_loss(const T* a, const T* b, size_t n, double eps);
template <class T>
void charbonnier_backward(const T* a, const T* b, size_t n, double eps, double scale, T* da);

// -(1/n) sum_i lambda_i log prob_i[target_i]; prob rows on the simplex
template <class T>
double weighted_ce_loss(const T* prob, int dim, const uint16_t* targets, const float* lambda,
                        size_t n);
// d wrt pre-softmax aggregates: += scale * lambda_i/n * (prob_k - [k==target])
template <class T>
void weighted_ce_backward(const T* prob, int dim, const uint16_t* targets, const float* lambda,
                          size_t n, double scale, T* dagg);

template <class T>
double semantic_loss(const T* u_prob, int n_classes, const uint16_t* targets, const float* lambda,
                     size_t n_rays);

// thing rays map through the assignment, stuff/void rays supervise channel 0
std::vector<uint16_t> instance_targets(const PatchBatch& batch,
                                       const dataset::SceneDataset& ds,
                                       const std::vector<InstanceAssignment>& per_frame);
template <class T>
double instance_loss(const T* v_prob, int n_channels, const uint16_t* targets, const float* lambda,
                     size_t n_rays);

template <class T>
double seg_consistency_loss(const std::vector<ClusterGroup>& groups, const T* u_prob,
                            int n_classes, const float* lambda);
template <class T>
void seg_consistency_backward(const std::vector<ClusterGroup>& groups, const T* u_prob,
                              int n_classes, const float* lambda, double scale, T* du_agg);

// mean over patches of ||F(rendered) - F(observed)||_2; grads flow through the
// rendered side only
template <class T>
double perceptual_loss(const FeatureExtractor<T>& extractor, const T* rendered, const T* observed,
                       int n_patches, int side);
template <class T>
double perceptual_loss_backward(const FeatureExtractor<T>& extractor, const T* rendered,
                                const T* observed, int n_patches, int side, double scale,
                                T* drendered);

// mean over axis-adjacent node pairs (all axes, all levels) of ||xi_i - xi_j||
template <class T>
double tv_loss(const encoding::GridPyramid<T>& grid);
template <class T>
void tv_backward(const encoding::GridPyramid<T>& grid, double scale,
                 encoding::GridPyramid<T>& grads);

// (1/n_rays) sum_rays sum_i w_i / t_i
template <class T>
double disparity_loss(const T* weights, const double* ts, int n_rays, int n_samples);

}  // namespace panfield::supervision
