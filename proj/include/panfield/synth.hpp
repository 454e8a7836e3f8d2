// Analytic test scenes: piecewise-constant density primitives with known
// class/instance labels, rendered exactly in closed form. Also generates
// on-disk datasets with controlled pseudo-label noise. This is the
// verification backbone for the renderer and the training loop.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "panfield/dataset.hpp"
#include "panfield/rendering.hpp"

namespace panfield::synth {

struct Primitive {
  enum class Shape { kBox, kSphere };
  Shape shape = Shape::kBox;
  Vec3 center;
  Vec3 half_extents;   // box
  double radius = 0;   // sphere
  double density = 1e4;  // "opaque" primitives use 1e4 rather than a true infinity
  std::array<double, 3> color{1, 1, 1};
  int sem_class = 1;
  int instance_id = 0;  // 0 for stuff, unique >= 1 for things

  bool contains(const Vec3& p) const;
  // ray-primitive interval [t0, t1]; false when the ray misses (tangent
  // spheres count as a miss)
  bool intersect(const Vec3& o, const Vec3& d, double& t0, double& t1) const;
};

struct SynthScene {
  std::string name;
  std::vector<Primitive> primitives;
  std::array<double, 3> background{0, 0, 0};
  dataset::ClassTaxonomy taxonomy;

  void validate() const;  // primitives inside the unit ball, labels consistent
};

struct NoiseSpec {
  double p_flip = 0;             // per-block semantic flip probability
  int block = 8;                 // block side in pixels
  bool permute_instances = false;
  uint64_t seed = 0;
};

// Standard suite: "three-boxes", "orchard", "fog-road".
SynthScene make_scene(const std::string& name);
std::vector<std::string> standard_scene_names();

// Camera on an orbit looking at the origin; +y is world up, image y points
// down. Radius 2.1, t range covers the unit ball.
dataset::CameraModel orbit_camera(double azimuth, double elevation, double radius, int width,
                                  int height);
std::vector<dataset::CameraModel> orbit_cameras(int n_views, int width, int height);

// The pinned verification view of each standard scene. Midpoint quadrature
// cannot represent chords shorter than one bucket, so these views were chosen
// (and re-verified over a +-0.005 rad neighborhood) to keep every pixel ray
// clear of sub-bucket silhouette chords at N=512.
dataset::CameraModel standard_test_camera(const std::string& scene_name);

// Exact per-pixel integration of the piecewise-constant medium: interval
// intersections, closed-form transmittance, density-weighted colors, labels
// from the primitive with the largest opacity share (void where the residual
// transmittance dominates).
rendering::PanopticImage analytic_render(const SynthScene& scene,
                                         const dataset::CameraModel& camera);

// The scene as a hand-set field: exact densities/colors, label one-hots
// scaled to logits. Plugs into rendering::render_view_oracle.
rendering::OracleFieldFn scene_field_fn(const SynthScene& scene, double logit_scale = 25.0);

// Block semantic flips plus optional per-frame instance permutation.
// Instance ids are re-densified so the frame invariants keep holding.
void inject_label_noise(std::vector<uint16_t>& sem, std::vector<uint16_t>& inst,
                        const dataset::ClassTaxonomy& taxonomy, int width, int height,
                        const NoiseSpec& noise, uint64_t frame_index);

// Renders n_views orbit cameras, injects noise into the pseudo labels, keeps
// clean copies under gt/, and writes the dataset directory.
dataset::SceneDataset make_dataset(const SynthScene& scene, int n_views, int width, int height,
                                   const NoiseSpec& noise, const std::string& dir);

}  // namespace panfield::synth
