// Cameras, frames, rays and pseudo-label containers plus the on-disk dataset
// layout:
//   manifest.txt   version, frame count, taxonomy U/V/thing-mask
//   cameras.txt    per frame: fx fy cx cy W H t_near t_far + row-major 4x4 pose
//   images/NNNN.ppm              binary P6, 8-bit
//   labels/NNNN.{sem,inst}.u16   "u16 H W\n" + raw little-endian u16
//   conf/NNNN.f32                optional raw little-endian f32 lambda map
//   feat/NNNN.f32                optional "f32 C H W\n" + raw features
//   gt/NNNN.{sem,inst}.u16       optional clean labels for evaluation
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "panfield/common.hpp"

namespace panfield::dataset {

// Pinhole camera, right-handed, +z forward, image x right / y down,
// pixel centers at integer + 0.5. Pose maps camera to world.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat4 pose = Mat4::identity();
  double t_near = 0.1, t_far = 10.0;

  void validate() const;
  Vec3 position() const { return pose.translation(); }
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  double px = 0, py = 0;
};

// World ray through continuous image coordinates (px, py); sub-pixel
// coordinates are allowed, full pixels are addressed at center (i+0.5, j+0.5).
Ray ray_for_pixel(const CameraModel& camera, double px, double py);

struct ClassTaxonomy {
  int n_classes = 0;            // U, includes void at index 0
  int n_instance_channels = 0;  // V, includes background channel 0
  std::vector<uint8_t> thing;   // per-class thing flag, size U

  bool is_thing(int cls) const { return cls >= 0 && cls < n_classes && thing[cls]; }
  int n_thing() const;
  void validate() const;
  bool operator==(const ClassTaxonomy&) const = default;
};

constexpr int kVoidClass = 0;

// In instance maps 0 means "no instance" (stuff/void pixel); stored value k>=1
// is frame-local instance k-1. Shared by pseudo-label and GT maps.
constexpr uint16_t kNoInstance = 0;

struct Frame {
  CameraModel camera;
  std::vector<float> color;     // H*W*3, [0,1]
  std::vector<uint16_t> sem;    // H*W
  std::vector<uint16_t> inst;   // H*W, kNoInstance on stuff pixels
  std::vector<float> conf;      // H*W lambda, defaults to 1

  std::vector<uint16_t> gt_sem, gt_inst;  // empty unless dataset has gt/
  std::vector<float> feat;                // empty unless dataset has feat/
  int feat_channels = 0, feat_h = 0, feat_w = 0;

  bool has_gt() const { return !gt_sem.empty(); }
  size_t n_pixels() const { return size_t(camera.width) * camera.height; }
  int n_local_instances() const;  // frame-local instance count V_frame
};

struct SceneDataset {
  ClassTaxonomy taxonomy;
  std::vector<Frame> frames;

  void validate() const;
};

SceneDataset load_dataset(const std::string& dir);
void save_dataset(const SceneDataset& dataset, const std::string& dir);

// ---------------------------------------------------------------------------
// file primitives (also used by the render CLI to emit outputs)

void write_ppm(const std::string& path, const std::vector<float>& rgb, int width, int height);
std::vector<float> read_ppm(const std::string& path, int& width, int& height);

inline uint8_t quantize8(float v) {
  return static_cast<uint8_t>(std::lround(clamp(v, 0.0f, 1.0f) * 255.0f));
}

void write_u16_map(const std::string& path, const std::vector<uint16_t>& data, int width, int height);
std::vector<uint16_t> read_u16_map(const std::string& path, int& width, int& height);

void write_f32_raw(const std::string& path, const std::vector<float>& data);
std::vector<float> read_f32_raw(const std::string& path, size_t expected_count);

void write_feat(const std::string& path, const std::vector<float>& data, int channels, int height, int width);
std::vector<float> read_feat(const std::string& path, int& channels, int& height, int& width);

// Deterministic label palette for visualization output.
std::vector<float> colorize_labels(const std::vector<uint16_t>& labels, int width, int height);

}  // namespace panfield::dataset
