#include "panfield/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace panfield::dataset {

void CameraModel::validate() const {
  if (width <= 0 || height <= 0) fail_domain("camera: non-positive image size");
  if (fx <= 0 || fy <= 0) fail_domain("camera: non-positive focal length");
  if (!(t_near > 0) || !(t_near < t_far)) fail_domain("camera: need 0 < t_near < t_far");
  if (rotation_orthonormality_error(pose) > 1e-9)
    fail_domain("camera: pose rotation not orthonormal within 1e-9");
  // det(R) must be +1 (proper rotation)
  const Mat4& p = pose;
  double det = p.at(0, 0) * (p.at(1, 1) * p.at(2, 2) - p.at(1, 2) * p.at(2, 1)) -
               p.at(0, 1) * (p.at(1, 0) * p.at(2, 2) - p.at(1, 2) * p.at(2, 0)) +
               p.at(0, 2) * (p.at(1, 0) * p.at(2, 1) - p.at(1, 1) * p.at(2, 0));
  if (std::fabs(det - 1.0) > 1e-6) fail_domain("camera: pose rotation determinant != +1");
}

Ray ray_for_pixel(const CameraModel& camera, double px, double py) {
  if (!(px >= 0 && px < camera.width && py >= 0 && py < camera.height))
    fail_domain(strf("ray_for_pixel: pixel (%g, %g) outside %dx%d image", px, py,
                     camera.width, camera.height));
  Vec3 dir_cam{(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0};
  Ray ray;
  ray.origin = camera.position();
  ray.dir = normalized(camera.pose.rotate(dir_cam));
  ray.px = px;
  ray.py = py;
  return ray;
}

int ClassTaxonomy::n_thing() const {
  int n = 0;
  for (uint8_t t : thing) n += t ? 1 : 0;
  return n;
}

void ClassTaxonomy::validate() const {
  if (n_classes < 1) fail_domain("taxonomy: need at least the void class");
  if (static_cast<int>(thing.size()) != n_classes) fail_domain("taxonomy: thing mask size != U");
  if (thing[kVoidClass]) fail_domain("taxonomy: void class cannot be a thing");
  if (n_instance_channels < 1) fail_domain("taxonomy: need at least the background channel");
}

int Frame::n_local_instances() const {
  uint16_t max_id = 0;
  for (uint16_t v : inst) max_id = std::max(max_id, v);
  return max_id;  // stored ids are 1..V_frame
}

void SceneDataset::validate() const {
  taxonomy.validate();
  for (size_t fi = 0; fi < frames.size(); ++fi) {
    const Frame& f = frames[fi];
    f.camera.validate();
    size_t n = f.n_pixels();
    if (f.color.size() != n * 3 || f.sem.size() != n || f.inst.size() != n || f.conf.size() != n)
      fail(strf("dataset: frame %zu map sizes inconsistent with camera", fi));
    std::set<uint16_t> ids;
    for (size_t px = 0; px < n; ++px) {
      if (f.sem[px] >= taxonomy.n_classes)
        fail(strf("dataset: frame %zu semantic label %u >= U=%d", fi, f.sem[px], taxonomy.n_classes));
      bool thing = taxonomy.is_thing(f.sem[px]);
      bool has_inst = f.inst[px] != kNoInstance;
      if (thing != has_inst)
        fail(strf("dataset: frame %zu pixel %zu: instance id must be present exactly on thing pixels", fi, px));
      if (has_inst) ids.insert(f.inst[px]);
      if (!(f.conf[px] >= 0.0f && f.conf[px] <= 1.0f))
        fail(strf("dataset: frame %zu confidence outside [0,1]", fi));
    }
    // frame-local ids dense in 1..V_frame (spec's {0..V_frame-1} plus the +1 storage offset)
    int expect = 1;
    for (uint16_t id : ids) {
      if (id != expect)
        fail(strf("dataset: frame %zu instance ids not dense (missing id %d)", fi, expect));
      ++expect;
    }
    if (static_cast<int>(ids.size()) > taxonomy.n_instance_channels - 1)
      fail(strf("dataset: frame %zu has %zu instances but V=%d", fi, ids.size(),
                taxonomy.n_instance_channels));
  }
}

// ---------------------------------------------------------------------------
// file primitives

namespace {

std::ofstream open_out(const std::string& path, bool binary = true) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) fail(strf("cannot open '%s' for writing", path.c_str()));
  return f;
}

std::ifstream open_in(const std::string& path, bool binary = true) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) fail(strf("cannot open '%s' for reading", path.c_str()));
  return f;
}

void write_u16_le(std::ofstream& f, const uint16_t* data, size_t count) {
  std::vector<uint8_t> buf(count * 2);
  for (size_t i = 0; i < count; ++i) {
    buf[2 * i] = static_cast<uint8_t>(data[i] & 0xff);
    buf[2 * i + 1] = static_cast<uint8_t>(data[i] >> 8);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), buf.size());
}

void read_u16_le(std::ifstream& f, uint16_t* data, size_t count, const std::string& path) {
  std::vector<uint8_t> buf(count * 2);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (static_cast<size_t>(f.gcount()) != buf.size()) fail(strf("'%s': truncated u16 data", path.c_str()));
  for (size_t i = 0; i < count; ++i)
    data[i] = static_cast<uint16_t>(buf[2 * i] | (uint16_t(buf[2 * i + 1]) << 8));
}

void write_f32_le(std::ofstream& f, const float* data, size_t count) {
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

void read_f32_le(std::ifstream& f, float* data, size_t count, const std::string& path) {
  std::vector<uint8_t> buf(count * 4);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (static_cast<size_t>(f.gcount()) != buf.size()) fail(strf("'%s': truncated f32 data", path.c_str()));
  for (size_t i = 0; i < count; ++i) {
    uint32_t bits = buf[4 * i] | (uint32_t(buf[4 * i + 1]) << 8) | (uint32_t(buf[4 * i + 2]) << 16) |
                    (uint32_t(buf[4 * i + 3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
}

}  // namespace

void write_ppm(const std::string& path, const std::vector<float>& rgb, int width, int height) {
  if (rgb.size() != size_t(width) * height * 3) fail_domain("write_ppm: size mismatch");
  auto f = open_out(path);
  f << "P6\n" << width << " " << height << "\n255\n";
  std::vector<uint8_t> buf(rgb.size());
  for (size_t i = 0; i < rgb.size(); ++i) buf[i] = quantize8(rgb[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), buf.size());
  if (!f) fail(strf("write error on '%s'", path.c_str()));
}

std::vector<float> read_ppm(const std::string& path, int& width, int& height) {
  auto f = open_in(path);
  std::string magic;
  int maxval = 0;
  f >> magic >> width >> height >> maxval;
  if (magic != "P6" || maxval != 255 || width <= 0 || height <= 0)
    fail(strf("'%s': not an 8-bit binary P6 ppm", path.c_str()));
  f.get();  // single whitespace after maxval
  std::vector<uint8_t> buf(size_t(width) * height * 3);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (static_cast<size_t>(f.gcount()) != buf.size()) fail(strf("'%s': truncated pixel data", path.c_str()));
  std::vector<float> rgb(buf.size());
  for (size_t i = 0; i < buf.size(); ++i) rgb[i] = buf[i] / 255.0f;
  return rgb;
}

void write_u16_map(const std::string& path, const std::vector<uint16_t>& data, int width, int height) {
  if (data.size() != size_t(width) * height) fail_domain("write_u16_map: size mismatch");
  auto f = open_out(path);
  f << "u16 " << height << " " << width << "\n";
  write_u16_le(f, data.data(), data.size());
  if (!f) fail(strf("write error on '%s'", path.c_str()));
}

std::vector<uint16_t> read_u16_map(const std::string& path, int& width, int& height) {
  auto f = open_in(path);
  std::string tag;
  f >> tag >> height >> width;
  if (tag != "u16" || width <= 0 || height <= 0) fail(strf("'%s': bad u16 map header", path.c_str()));
  f.get();
  std::vector<uint16_t> data(size_t(width) * height);
  read_u16_le(f, data.data(), data.size(), path);
  return data;
}

void write_f32_raw(const std::string& path, const std::vector<float>& data) {
  auto f = open_out(path);
  write_f32_le(f, data.data(), data.size());
  if (!f) fail(strf("write error on '%s'", path.c_str()));
}

std::vector<float> read_f32_raw(const std::string& path, size_t expected_count) {
  auto f = open_in(path);
  std::vector<float> data(expected_count);
  read_f32_le(f, data.data(), expected_count, path);
  return data;
}

void write_feat(const std::string& path, const std::vector<float>& data, int channels, int height, int width) {
  if (data.size() != size_t(channels) * height * width) fail_domain("write_feat: size mismatch");
  auto f = open_out(path);
  f << "f32 " << channels << " " << height << " " << width << "\n";
  write_f32_le(f, data.data(), data.size());
  if (!f) fail(strf("write error on '%s'", path.c_str()));
}

std::vector<float> read_feat(const std::string& path, int& channels, int& height, int& width) {
  auto f = open_in(path);
  std::string tag;
  f >> tag >> channels >> height >> width;
  if (tag != "f32" || channels <= 0 || height <= 0 || width <= 0)
    fail(strf("'%s': bad feature file header", path.c_str()));
  f.get();
  std::vector<float> data(size_t(channels) * height * width);
  read_f32_le(f, data.data(), data.size(), path);
  return data;
}

std::vector<float> colorize_labels(const std::vector<uint16_t>& labels, int width, int height) {
  std::vector<float> rgb(size_t(width) * height * 3, 0.0f);
  for (size_t i = 0; i < labels.size(); ++i) {
    uint16_t id = labels[i];
    if (id == 0) continue;  // background stays black
    uint64_t h = id;
    Rng r(0xc01055Eull, h);
    rgb[3 * i] = 0.25f + 0.75f * float(r.uniform());
    rgb[3 * i + 1] = 0.25f + 0.75f * float(r.uniform());
    rgb[3 * i + 2] = 0.25f + 0.75f * float(r.uniform());
  }
  return rgb;
}

// ---------------------------------------------------------------------------
// dataset directory

namespace {

std::string frame_name(size_t i) { return strf("%04zu", i); }

}  // namespace

void save_dataset(const SceneDataset& dataset, const std::string& dir) {
  dataset.validate();
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "labels", ec);
  fs::create_directories(fs::path(dir) / "conf", ec);
  if (ec) fail(strf("cannot create dataset directory '%s'", dir.c_str()));

  {
    auto f = open_out((fs::path(dir) / "manifest.txt").string(), false);
    f << "panfield-dataset 1\n";
    f << "frames " << dataset.frames.size() << "\n";
    f << "taxonomy " << dataset.taxonomy.n_classes << " " << dataset.taxonomy.n_instance_channels << "\n";
    f << "thing-mask";
    for (uint8_t t : dataset.taxonomy.thing) f << " " << int(t);
    f << "\n";
  }
  {
    auto f = open_out((fs::path(dir) / "cameras.txt").string(), false);
    f.precision(17);
    for (const Frame& fr : dataset.frames) {
      const CameraModel& c = fr.camera;
      f << c.fx << " " << c.fy << " " << c.cx << " " << c.cy << " " << c.width << " " << c.height
        << " " << c.t_near << " " << c.t_far;
      for (double v : c.pose.m) f << " " << v;
      f << "\n";
    }
  }

  bool any_gt = false, any_feat = false;
  for (const Frame& fr : dataset.frames) {
    any_gt |= fr.has_gt();
    any_feat |= !fr.feat.empty();
  }
  if (any_gt) fs::create_directories(fs::path(dir) / "gt", ec);
  if (any_feat) fs::create_directories(fs::path(dir) / "feat", ec);

  for (size_t i = 0; i < dataset.frames.size(); ++i) {
    const Frame& fr = dataset.frames[i];
    const std::string n = frame_name(i);
    int w = fr.camera.width, h = fr.camera.height;
    write_ppm((fs::path(dir) / "images" / (n + ".ppm")).string(), fr.color, w, h);
    write_u16_map((fs::path(dir) / "labels" / (n + ".sem.u16")).string(), fr.sem, w, h);
    write_u16_map((fs::path(dir) / "labels" / (n + ".inst.u16")).string(), fr.inst, w, h);
    write_f32_raw((fs::path(dir) / "conf" / (n + ".f32")).string(), fr.conf);
    if (fr.has_gt()) {
      write_u16_map((fs::path(dir) / "gt" / (n + ".sem.u16")).string(), fr.gt_sem, w, h);
      write_u16_map((fs::path(dir) / "gt" / (n + ".inst.u16")).string(), fr.gt_inst, w, h);
    }
    if (!fr.feat.empty())
      write_feat((fs::path(dir) / "feat" / (n + ".f32")).string(), fr.feat, fr.feat_channels,
                 fr.feat_h, fr.feat_w);
  }
}

SceneDataset load_dataset(const std::string& dir) {
  fs::path root(dir);
  if (!fs::exists(root / "manifest.txt"))
    fail(strf("manifest not found in '%s'", dir.c_str()));

  SceneDataset ds;
  size_t n_frames = 0;
  {
    auto f = open_in((root / "manifest.txt").string(), false);
    std::string line;
    if (!std::getline(f, line) || split_ws(line).size() != 2 || split_ws(line)[0] != "panfield-dataset")
      fail(strf("'%s': bad manifest version line", (root / "manifest.txt").c_str()));
    while (std::getline(f, line)) {
      auto tok = split_ws(line);
      if (tok.empty()) continue;
      if (tok[0] == "frames" && tok.size() == 2) {
        n_frames = std::stoul(tok[1]);
      } else if (tok[0] == "taxonomy" && tok.size() == 3) {
        ds.taxonomy.n_classes = std::stoi(tok[1]);
        ds.taxonomy.n_instance_channels = std::stoi(tok[2]);
      } else if (tok[0] == "thing-mask") {
        for (size_t i = 1; i < tok.size(); ++i)
          ds.taxonomy.thing.push_back(static_cast<uint8_t>(std::stoi(tok[i])));
      } else {
        fail(strf("manifest: unknown entry '%s'", tok[0].c_str()));
      }
    }
  }
  ds.taxonomy.validate();

  {
    auto f = open_in((root / "cameras.txt").string(), false);
    std::string line;
    while (std::getline(f, line)) {
      auto tok = split_ws(line);
      if (tok.empty()) continue;
      if (tok.size() != 24) fail(strf("cameras.txt: expected 24 fields per frame, got %zu", tok.size()));
      Frame fr;
      CameraModel& c = fr.camera;
      c.fx = std::stod(tok[0]);
      c.fy = std::stod(tok[1]);
      c.cx = std::stod(tok[2]);
      c.cy = std::stod(tok[3]);
      c.width = std::stoi(tok[4]);
      c.height = std::stoi(tok[5]);
      c.t_near = std::stod(tok[6]);
      c.t_far = std::stod(tok[7]);
      for (int i = 0; i < 16; ++i) c.pose.m[i] = std::stod(tok[8 + i]);
      ds.frames.push_back(std::move(fr));
    }
  }
  if (ds.frames.size() != n_frames)
    fail(strf("cameras.txt lists %zu frames, manifest says %zu", ds.frames.size(), n_frames));

  for (size_t i = 0; i < ds.frames.size(); ++i) {
    Frame& fr = ds.frames[i];
    const std::string n = frame_name(i);
    int w = 0, h = 0;
    fr.color = read_ppm((root / "images" / (n + ".ppm")).string(), w, h);
    if (w != fr.camera.width || h != fr.camera.height)
      fail(strf("frame %zu: image size %dx%d does not match camera %dx%d", i, w, h,
                fr.camera.width, fr.camera.height));
    fr.sem = read_u16_map((root / "labels" / (n + ".sem.u16")).string(), w, h);
    fr.inst = read_u16_map((root / "labels" / (n + ".inst.u16")).string(), w, h);
    if (w != fr.camera.width || h != fr.camera.height)
      fail(strf("frame %zu: label size does not match camera", i));

    fs::path conf_path = root / "conf" / (n + ".f32");
    if (fs::exists(conf_path)) fr.conf = read_f32_raw(conf_path.string(), fr.n_pixels());
    else fr.conf.assign(fr.n_pixels(), 1.0f);

    fs::path gt_sem = root / "gt" / (n + ".sem.u16");
    if (fs::exists(gt_sem)) {
      fr.gt_sem = read_u16_map(gt_sem.string(), w, h);
      fr.gt_inst = read_u16_map((root / "gt" / (n + ".inst.u16")).string(), w, h);
    }
    fs::path feat_path = root / "feat" / (n + ".f32");
    if (fs::exists(feat_path))
      fr.feat = read_feat(feat_path.string(), fr.feat_channels, fr.feat_h, fr.feat_w);
  }

  ds.validate();
  return ds;
}

}  // namespace panfield::dataset
