// The implicit model S: (x, d) -> (sigma, c, u, v). Decoders over grid and
// frequency encodings, parameter storage with named groups, batched forward
// with recorded activations, and exact reverse-mode backward into every
// parameter group. Scalar type is templated: float for training, double for
// gradient checking.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "panfield/common.hpp"
#include "panfield/encoding.hpp"

namespace panfield::field {

enum class Activation { kRelu, kSoftplus, kTanh };

Activation activation_from_name(const std::string& name);
std::string activation_name(Activation a);

struct DecoderSpec {
  int hidden = 64;
  int depth = 2;  // hidden layers
};

struct FieldConfig {
  encoding::EncodingConfig enc;
  int geo_feat_dim = 15;
  DecoderSpec geo{64, 2};
  DecoderSpec app{64, 2};
  DecoderSpec sem{256, 2};
  DecoderSpec inst{256, 2};
  Activation act = Activation::kRelu;
  int n_classes = 5;            // U
  int n_instance_channels = 4;  // V
  bool cascade = true;          // coarse branch for distillation
  int coarse_levels = 2;        // pyramid levels the coarse branch reads
  DecoderSpec coarse_geo{32, 2};
  DecoderSpec coarse_app{32, 2};

  int pe_dim() const { return 6 * enc.n_freq; }
  int sh_dim() const { return encoding::sh_dim(enc.sh_degree); }
  int geo_levels() const { return static_cast<int>(enc.geometric.resolutions.size()); }
  int geo_in(bool coarse) const {
    int levels = coarse ? coarse_levels : geo_levels();
    return levels * enc.geometric.feature_dim + pe_dim();
  }
  int app_in() const { return geo_feat_dim + sh_dim(); }
  int und_in() const { return enc.understanding.feature_dim + pe_dim(); }
  int geo_out() const { return 1 + geo_feat_dim; }
  void validate() const;
};

enum class Cascade { kFine, kCoarse };

template <class T>
struct Tensor {
  std::vector<T> data;
  std::vector<int> shape;
  size_t size() const { return data.size(); }
};

template <class T>
struct MlpParams {
  std::vector<Tensor<T>> w;  // [in,hidden], [hidden,hidden]..., [hidden,out]
  std::vector<Tensor<T>> b;
};

// All learnable state; also reused as the gradient accumulator (same shapes).
template <class T>
struct FieldParams {
  encoding::GridPyramid<T> geo_grid, und_grid;
  MlpParams<T> geo, app, sem, inst, coarse_geo, coarse_app;
};

// Flat view of one named parameter group with its gradient mirror.
template <class T>
struct GroupRef {
  std::string name;
  T* data = nullptr;
  T* grad = nullptr;
  size_t size = 0;
};

// The spec-facing parameter store: named groups backed by structured storage.
template <class T>
struct ParamStore {
  FieldConfig cfg;
  FieldParams<T> params;
  FieldParams<T> grads;

  static ParamStore init(const FieldConfig& cfg, uint64_t seed);

  std::vector<GroupRef<T>> groups();
  void zero_grads();
  void check_finite() const;

  template <class U>
  ParamStore<U> cast() const;
};

// Zero-valued parameter set with the config's shapes (gradient buffers).
template <class T>
FieldParams<T> make_zero_params(const FieldConfig& cfg);

template <class T>
void add_params(FieldParams<T>& into, const FieldParams<T>& from);

// ---------------------------------------------------------------------------
// batched evaluation with recorded activations

template <class T>
struct MlpTrace {
  int n = 0;
  std::vector<T> x;               // [n, in]
  std::vector<std::vector<T>> h;  // post-activation hidden layers
  std::vector<T> out;             // [n, out] raw
};

template <class T>
struct EvalTrace {
  Cascade cascade = Cascade::kFine;
  int n = 0;                       // total samples
  std::vector<Vec3> xc;            // contracted positions
  std::vector<Vec3> dirs;          // unit view directions
  MlpTrace<T> geo;                 // n rows
  std::vector<T> sigma;            // [n] post-softplus
  std::vector<int> app_rows;       // compact row -> sample index
  MlpTrace<T> app;
  std::vector<T> rgb;              // [n_app, 3] post-sigmoid
  std::vector<int> und_rows;       // understanding path rows (fine cascade only)
  MlpTrace<T> sem, inst;           // raw logits in .out
};

// Evaluates the requested cascade over n samples. Appearance runs on samples
// where app_mask is set, the understanding decoders where und_mask is set
// (null masks mean every sample). Rows are compacted; the trace keeps the
// row -> sample maps for backward.
template <class T>
void field_forward(const FieldConfig& cfg, const FieldParams<T>& params, Cascade cascade,
                   const Vec3* xs, const Vec3* ds, size_t n,
                   const uint8_t* app_mask, const uint8_t* und_mask, EvalTrace<T>& trace);

// Two-phase variant: the renderer computes transmittance weights from the
// geometry pass and derives the shading masks from them.
template <class T>
void field_forward_geo(const FieldConfig& cfg, const FieldParams<T>& params, Cascade cascade,
                       const Vec3* xs, const Vec3* ds, size_t n, EvalTrace<T>& trace);
template <class T>
void field_forward_shading(const FieldConfig& cfg, const FieldParams<T>& params,
                           const uint8_t* app_mask, const uint8_t* und_mask, EvalTrace<T>& trace);

// Per-sample upstream gradients; compact rows match the trace's row maps.
template <class T>
struct SampleGrads {
  std::vector<T> dsigma;  // [n]
  std::vector<T> drgb;    // [n_app, 3], w.r.t. post-sigmoid color
  std::vector<T> du;      // [n_und, U], w.r.t. raw logits
  std::vector<T> dv;      // [n_und, V]
};

// Exact reverse-mode pass: propagates SampleGrads through decoders and grid
// lookups, accumulating into `grads` (shapes from make_zero_params).
template <class T>
void field_backward(const FieldConfig& cfg, const FieldParams<T>& params,
                    const EvalTrace<T>& trace, const SampleGrads<T>& sg,
                    FieldParams<T>& grads);

// ---------------------------------------------------------------------------
// spec-level single-point interface

struct FieldSample {
  double sigma = 0;
  std::array<double, 3> c{};
  std::vector<double> u, v;  // raw logits; empty for the coarse cascade
};

template <class T>
FieldSample field_eval(const ParamStore<T>& store, const Vec3& x, const Vec3& d,
                       Cascade cascade = Cascade::kFine);

template <class T>
std::vector<FieldSample> field_eval_batch(const ParamStore<T>& store,
                                          const std::vector<Vec3>& xs,
                                          const std::vector<Vec3>& ds,
                                          Cascade cascade = Cascade::kFine);

template <class T>
std::pair<std::vector<FieldSample>, std::vector<FieldSample>> cascade_pair_eval(
    const ParamStore<T>& store, const std::vector<Vec3>& xs, const std::vector<Vec3>& ds);

// ---------------------------------------------------------------------------
// low-level kernels (exposed for the reference-forward test oracle)

template <class T>
void linear_forward(const T* a, int n, int in_dim, const T* w, const T* b, int out_dim, T* out);

template <class T>
void apply_activation(Activation act, T* x, size_t n);

template <class T>
T activation_derivative_from_output(Activation act, T y);

template <class T>
T softplus(T x);

}  // namespace panfield::field
