#include "panfield/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace panfield::synth {

bool Primitive::contains(const Vec3& p) const {
  if (shape == Shape::kBox) {
    return std::fabs(p.x - center.x) <= half_extents.x &&
           std::fabs(p.y - center.y) <= half_extents.y &&
           std::fabs(p.z - center.z) <= half_extents.z;
  }
  return norm(p - center) <= radius;
}

bool Primitive::intersect(const Vec3& o, const Vec3& d, double& t0, double& t1) const {
  if (shape == Shape::kBox) {
    double lo = -1e300, hi = 1e300;
    double oc[3] = {o.x - center.x, o.y - center.y, o.z - center.z};
    double dd[3] = {d.x, d.y, d.z};
    double he[3] = {half_extents.x, half_extents.y, half_extents.z};
    for (int a = 0; a < 3; ++a) {
      if (std::fabs(dd[a]) < 1e-15) {
        if (std::fabs(oc[a]) > he[a]) return false;
        continue;
      }
      double inv = 1.0 / dd[a];
      double ta = (-he[a] - oc[a]) * inv;
      double tb = (he[a] - oc[a]) * inv;
      if (ta > tb) std::swap(ta, tb);
      lo = std::max(lo, ta);
      hi = std::min(hi, tb);
    }
    if (lo >= hi) return false;  // grazing an edge counts as a miss
    t0 = lo;
    t1 = hi;
    return true;
  }
  Vec3 oc = o - center;
  double b = dot(oc, d);
  double c = dot(oc, oc) - radius * radius;
  double disc = b * b - c;
  if (disc <= 0) return false;  // tangent rays treated as non-intersecting
  double s = std::sqrt(disc);
  t0 = -b - s;
  t1 = -b + s;
  return true;
}

void SynthScene::validate() const {
  taxonomy.validate();
  std::set<int> thing_ids;
  for (const Primitive& p : primitives) {
    double reach;
    if (p.shape == Primitive::Shape::kBox) {
      // farthest corner from the origin
      reach = norm({std::fabs(p.center.x) + p.half_extents.x,
                    std::fabs(p.center.y) + p.half_extents.y,
                    std::fabs(p.center.z) + p.half_extents.z});
    } else {
      reach = norm(p.center) + p.radius;
    }
    if (reach > 1.0 + 1e-9)
      fail_domain(strf("scene '%s': primitive extends outside the unit ball", name.c_str()));
    if (p.density <= 0) fail_domain("scene: primitive density must be positive");
    if (p.sem_class <= 0 || p.sem_class >= taxonomy.n_classes)
      fail_domain("scene: primitive class outside taxonomy");
    bool thing = taxonomy.is_thing(p.sem_class);
    if (thing) {
      if (p.instance_id < 1) fail_domain("scene: thing primitive needs instance id >= 1");
      if (!thing_ids.insert(p.instance_id).second)
        fail_domain("scene: duplicate thing instance id");
    } else if (p.instance_id != 0) {
      fail_domain("scene: stuff primitive must have instance id 0");
    }
  }
  if (static_cast<int>(thing_ids.size()) > taxonomy.n_instance_channels - 1)
    fail_domain("scene: more thing instances than instance channels");
}

// ---------------------------------------------------------------------------
// standard scenes

namespace {

Primitive box(Vec3 c, Vec3 he, std::array<double, 3> color, int cls, int id, double density = 1e4) {
  Primitive p;
  p.shape = Primitive::Shape::kBox;
  p.center = c;
  p.half_extents = he;
  p.color = color;
  p.sem_class = cls;
  p.instance_id = id;
  p.density = density;
  return p;
}

Primitive sphere(Vec3 c, double r, std::array<double, 3> color, int cls, int id,
                 double density = 1e4) {
  Primitive p;
  p.shape = Primitive::Shape::kSphere;
  p.center = c;
  p.radius = r;
  p.color = color;
  p.sem_class = cls;
  p.instance_id = id;
  p.density = density;
  return p;
}

}  // namespace

std::vector<std::string> standard_scene_names() { return {"three-boxes", "orchard", "fog-road"}; }

SynthScene make_scene(const std::string& name) {
  SynthScene s;
  s.name = name;
  if (name == "three-boxes") {
    // void, floor(stuff), three distinct box classes (things)
    s.taxonomy.n_classes = 5;
    s.taxonomy.n_instance_channels = 4;
    s.taxonomy.thing = {0, 0, 1, 1, 1};
    // low boxes spread over the slab: from the orbit elevations no box is
    // projected adjacent to another, so panoptic boundaries only meet the
    // ground and the background
    s.primitives = {
        box({0, -0.42, 0}, {0.62, 0.04, 0.62}, {0.45, 0.45, 0.48}, 1, 0),
        box({-0.34, -0.315, -0.20}, {0.15, 0.065, 0.15}, {0.85, 0.15, 0.12}, 2, 1),
        box({0.34, -0.32, 0.05}, {0.20, 0.06, 0.20}, {0.10, 0.70, 0.20}, 3, 2),
        box({-0.10, -0.33, 0.45}, {0.10, 0.05, 0.10}, {0.15, 0.25, 0.85}, 4, 3),
    };
  } else if (name == "orchard") {
    // one stuff ground class plus one thing class with six instances
    s.taxonomy.n_classes = 3;
    s.taxonomy.n_instance_channels = 8;
    s.taxonomy.thing = {0, 0, 1};
    s.primitives.push_back(box({0, -0.40, 0}, {0.62, 0.04, 0.62}, {0.35, 0.30, 0.22}, 1, 0));
    const double ring = 0.42;
    for (int i = 0; i < 6; ++i) {
      double a = 2.0 * M_PI * i / 6.0 + 0.31;
      std::array<double, 3> col{0.3 + 0.1 * ((i * 2) % 5), 0.55 - 0.07 * (i % 3),
                                0.25 + 0.11 * (i % 4)};
      s.primitives.push_back(
          sphere({ring * std::cos(a), -0.22, ring * std::sin(a)}, 0.13, col, 2, i + 1));
    }
  } else if (name == "fog-road") {
    // low-density ambient fog over an opaque slab; soft boundaries everywhere
    s.taxonomy.n_classes = 3;
    s.taxonomy.n_instance_channels = 2;
    s.taxonomy.thing = {0, 0, 0};
    s.primitives = {
        sphere({0, 0.05, 0}, 0.90, {0.55, 0.60, 0.70}, 1, 0, 0.6),
        box({0, -0.42, 0}, {0.60, 0.04, 0.60}, {0.20, 0.20, 0.22}, 2, 0),
    };
  } else {
    fail_usage(strf("unknown scene '%s' (standard scenes: three-boxes, orchard, fog-road)",
                    name.c_str()));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// cameras

dataset::CameraModel orbit_camera(double azimuth, double elevation, double radius, int width,
                                  int height) {
  dataset::CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = 0.9 * width;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.t_near = radius - 1.05;
  cam.t_far = radius + 1.05;
  if (cam.t_near <= 0) cam.t_near = 0.05;

  Vec3 pos{radius * std::cos(elevation) * std::cos(azimuth), radius * std::sin(elevation),
           radius * std::cos(elevation) * std::sin(azimuth)};
  Vec3 up{0, 1, 0};
  Vec3 z = normalized(-pos);               // toward the origin
  Vec3 x = normalized(cross(z, up));       // image x right
  Vec3 y = cross(z, x);                    // image y down
  cam.pose = Mat4::identity();
  for (int r = 0; r < 3; ++r) {
    cam.pose.at(r, 0) = r == 0 ? x.x : (r == 1 ? x.y : x.z);
    cam.pose.at(r, 1) = r == 0 ? y.x : (r == 1 ? y.y : y.z);
    cam.pose.at(r, 2) = r == 0 ? z.x : (r == 1 ? z.y : z.z);
    cam.pose.at(r, 3) = r == 0 ? pos.x : (r == 1 ? pos.y : pos.z);
  }
  cam.validate();
  return cam;
}

std::vector<dataset::CameraModel> orbit_cameras(int n_views, int width, int height) {
  std::vector<dataset::CameraModel> cams;
  for (int i = 0; i < n_views; ++i) {
    double az = 2.0 * M_PI * i / n_views + 0.13;
    double el = (i % 2 == 0) ? 0.68 : 0.84;
    cams.push_back(orbit_camera(az, el, 2.1, width, height));
  }
  return cams;
}

dataset::CameraModel standard_test_camera(const std::string& scene_name) {
  if (scene_name == "three-boxes") return orbit_camera(2.36, 0.58, 2.1, 32, 32);
  if (scene_name == "orchard") return orbit_camera(0.42, 0.58, 2.1, 32, 32);
  if (scene_name == "fog-road") return orbit_camera(1.58, 0.58, 2.1, 32, 32);
  fail_usage(strf("no standard test camera for scene '%s'", scene_name.c_str()));
}

// ---------------------------------------------------------------------------
// analytic rendering

namespace {

struct SegmentEvent {
  double t;
  int prim;
  bool enter;
};

}  // namespace

rendering::PanopticImage analytic_render(const SynthScene& scene,
                                         const dataset::CameraModel& camera) {
  scene.validate();
  camera.validate();
  const int W = camera.width, H = camera.height;
  const int U = scene.taxonomy.n_classes, V = scene.taxonomy.n_instance_channels;
  const int n_prims = static_cast<int>(scene.primitives.size());

  rendering::PanopticImage img;
  img.width = W;
  img.height = H;
  img.n_classes = U;
  img.n_instance_channels = V;
  img.color.assign(size_t(W) * H * 3, 0.f);
  img.sem_prob.assign(size_t(W) * H * U, 0.f);
  img.inst_prob.assign(size_t(W) * H * V, 0.f);
  img.depth.assign(size_t(W) * H, 0.f);
  img.disparity.assign(size_t(W) * H, 0.f);
  img.sem_label.assign(size_t(W) * H, 0);
  img.inst_label.assign(size_t(W) * H, 0);

  std::vector<SegmentEvent> events;
  std::vector<double> prim_share(n_prims);
  for (int py = 0; py < H; ++py) {
    for (int px = 0; px < W; ++px) {
      dataset::Ray ray = dataset::ray_for_pixel(camera, px + 0.5, py + 0.5);
      events.clear();
      for (int k = 0; k < n_prims; ++k) {
        double t0, t1;
        if (!scene.primitives[k].intersect(ray.origin, ray.dir, t0, t1)) continue;
        t0 = std::max(t0, camera.t_near);
        t1 = std::min(t1, camera.t_far);
        if (t0 >= t1) continue;
        events.push_back({t0, k, true});
        events.push_back({t1, k, false});
      }
      std::sort(events.begin(), events.end(),
                [](const SegmentEvent& a, const SegmentEvent& b) { return a.t < b.t; });

      double trans = 1.0;
      double color[3] = {0, 0, 0};
      double depth = 0, disp = 0;
      std::fill(prim_share.begin(), prim_share.end(), 0.0);
      std::vector<char> active(n_prims, 0);
      for (size_t e = 0; e + 1 <= events.size(); ++e) {
        if (events[e].enter) active[events[e].prim] = 1;
        else active[events[e].prim] = 0;
        if (e + 1 >= events.size()) break;
        double a = events[e].t, b = events[e + 1].t;
        if (b <= a) continue;
        double sigma_tot = 0;
        double emit[3] = {0, 0, 0};
        for (int k = 0; k < n_prims; ++k) {
          if (!active[k]) continue;
          sigma_tot += scene.primitives[k].density;
          for (int c = 0; c < 3; ++c)
            emit[c] += scene.primitives[k].density * scene.primitives[k].color[c];
        }
        if (sigma_tot <= 0) continue;
        double len = b - a;
        double w_seg = trans * -std::expm1(-sigma_tot * len);
        for (int c = 0; c < 3; ++c) color[c] += w_seg * emit[c] / sigma_tot;
        double mid = 0.5 * (a + b);
        depth += w_seg * mid;
        disp += w_seg / mid;
        for (int k = 0; k < n_prims; ++k)
          if (active[k]) prim_share[k] += w_seg * scene.primitives[k].density / sigma_tot;
        trans *= std::exp(-sigma_tot * len);
      }

      for (int c = 0; c < 3; ++c) color[c] += trans * scene.background[c];

      // label = primitive with the largest opacity share; void if the
      // residual transmittance dominates them all
      int best_prim = -1;
      double best_share = trans;
      for (int k = 0; k < n_prims; ++k) {
        if (prim_share[k] > best_share) {
          best_share = prim_share[k];
          best_prim = k;
        }
      }
      size_t p = size_t(py) * W + px;
      for (int c = 0; c < 3; ++c) img.color[p * 3 + c] = float(color[c]);
      img.depth[p] = float(depth);
      img.disparity[p] = float(disp);

      std::vector<double> class_share(U, 0.0), inst_share(V, 0.0);
      class_share[dataset::kVoidClass] = trans;
      inst_share[0] = trans;
      for (int k = 0; k < n_prims; ++k) {
        const Primitive& pr = scene.primitives[k];
        class_share[pr.sem_class] += prim_share[k];
        int ch = scene.taxonomy.is_thing(pr.sem_class) ? pr.instance_id : 0;
        if (ch < V) inst_share[ch] += prim_share[k];
        else inst_share[0] += prim_share[k];
      }
      for (int c = 0; c < U; ++c) img.sem_prob[p * U + c] = float(class_share[c]);
      for (int c = 0; c < V; ++c) img.inst_prob[p * V + c] = float(inst_share[c]);

      if (best_prim < 0) {
        img.sem_label[p] = dataset::kVoidClass;
        img.inst_label[p] = 0;
      } else {
        const Primitive& pr = scene.primitives[best_prim];
        img.sem_label[p] = static_cast<uint16_t>(pr.sem_class);
        img.inst_label[p] =
            scene.taxonomy.is_thing(pr.sem_class) ? static_cast<uint16_t>(pr.instance_id) : 0;
      }
    }
  }
  return img;
}

rendering::OracleFieldFn scene_field_fn(const SynthScene& scene, double logit_scale) {
  const int U = scene.taxonomy.n_classes, V = scene.taxonomy.n_instance_channels;
  if (U > 64 || V > 64) fail_domain("scene_field_fn: supports up to 64 classes/channels");
  SynthScene s = scene;  // captured by value; the field is pure
  return [s, U, V, logit_scale](const Vec3* xs, const Vec3*, size_t n, double* sigma, double* rgb,
                                double* u, double* v) {
    for (size_t i = 0; i < n; ++i) {
      double sig = 0;
      double emit[3] = {0, 0, 0};
      double cls[64] = {0};
      double ins[64] = {0};
      for (const Primitive& p : s.primitives) {
        if (!p.contains(xs[i])) continue;
        sig += p.density;
        for (int c = 0; c < 3; ++c) emit[c] += p.density * p.color[c];
        cls[p.sem_class] += p.density;
        ins[s.taxonomy.is_thing(p.sem_class) ? p.instance_id : 0] += p.density;
      }
      sigma[i] = sig;
      for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = sig > 0 ? emit[c] / sig : 0.0;
      for (int c = 0; c < U; ++c) u[i * U + c] = sig > 0 ? logit_scale * cls[c] / sig : 0.0;
      for (int c = 0; c < V; ++c) v[i * V + c] = sig > 0 ? logit_scale * ins[c] / sig : 0.0;
    }
  };
}

// ---------------------------------------------------------------------------
// label noise

void inject_label_noise(std::vector<uint16_t>& sem, std::vector<uint16_t>& inst,
                        const dataset::ClassTaxonomy& taxonomy, int width, int height,
                        const NoiseSpec& noise, uint64_t frame_index) {
  if (noise.p_flip < 0 || noise.p_flip > 1) fail_domain("noise: p_flip outside [0,1]");
  Rng rng(noise.seed, 0x4e4f4953ull);
  Rng frame_rng = rng.fork(frame_index + 1);

  if (noise.p_flip > 0) {
    int B = noise.block < 1 ? 1 : noise.block;
    int bx = (width + B - 1) / B, by = (height + B - 1) / B;
    int new_id_counter = 0;
    for (uint16_t id : inst) new_id_counter = std::max<int>(new_id_counter, id);
    for (int byi = 0; byi < by; ++byi) {
      for (int bxi = 0; bxi < bx; ++bxi) {
        double roll = frame_rng.uniform();
        if (roll >= noise.p_flip) continue;
        // majority class of this block
        std::map<int, int> counts;
        for (int y = byi * B; y < std::min(height, (byi + 1) * B); ++y)
          for (int x = bxi * B; x < std::min(width, (bxi + 1) * B); ++x)
            counts[sem[size_t(y) * width + x]]++;
        int majority = 0, best = -1;
        for (auto& [c, k] : counts)
          if (k > best) { best = k; majority = c; }
        // flip the whole block to a random different class
        int target = majority;
        while (target == majority && taxonomy.n_classes > 1)
          target = static_cast<int>(frame_rng.uniform_int(taxonomy.n_classes));
        bool target_thing = taxonomy.is_thing(target);
        int block_new_id = 0;
        for (int y = byi * B; y < std::min(height, (byi + 1) * B); ++y) {
          for (int x = bxi * B; x < std::min(width, (bxi + 1) * B); ++x) {
            size_t p = size_t(y) * width + x;
            sem[p] = static_cast<uint16_t>(target);
            if (!target_thing) {
              inst[p] = dataset::kNoInstance;
            } else if (inst[p] == dataset::kNoInstance) {
              // flipped stuff pixels need an instance: one fresh id per block
              if (block_new_id == 0) block_new_id = ++new_id_counter;
              inst[p] = static_cast<uint16_t>(block_new_id);
            }
          }
        }
      }
    }
    // keep the thing/stuff <-> instance invariant on untouched pixels too
    for (size_t p = 0; p < sem.size(); ++p)
      if (!taxonomy.is_thing(sem[p])) inst[p] = dataset::kNoInstance;

    // re-densify ids to 1..K
    std::set<uint16_t> used(inst.begin(), inst.end());
    used.erase(dataset::kNoInstance);
    std::map<uint16_t, uint16_t> remap;
    uint16_t next = 1;
    for (uint16_t id : used) remap[id] = next++;
    for (uint16_t& id : inst)
      if (id != dataset::kNoInstance) id = remap[id];
  }

  if (noise.permute_instances) {
    uint16_t max_id = 0;
    for (uint16_t id : inst) max_id = std::max(max_id, id);
    if (max_id > 0) {
      std::vector<uint16_t> perm(max_id);
      for (uint16_t i = 0; i < max_id; ++i) perm[i] = i + 1;
      Rng perm_rng = rng.fork(frame_index + 1, 0x5045524dull);
      for (int i = max_id - 1; i > 0; --i) {
        int j = static_cast<int>(perm_rng.uniform_int(i + 1));
        std::swap(perm[i], perm[j]);
      }
      for (uint16_t& id : inst)
        if (id != dataset::kNoInstance) id = perm[id - 1];
    }
  }
}

// ---------------------------------------------------------------------------
// dataset generation

dataset::SceneDataset make_dataset(const SynthScene& scene, int n_views, int width, int height,
                                   const NoiseSpec& noise, const std::string& dir) {
  if (n_views < 2) fail_domain("make_dataset: need at least 2 views");
  scene.validate();
  dataset::SceneDataset ds;
  ds.taxonomy = scene.taxonomy;
  auto cams = orbit_cameras(n_views, width, height);
  for (int i = 0; i < n_views; ++i) {
    rendering::PanopticImage gt = analytic_render(scene, cams[i]);
    dataset::Frame fr;
    fr.camera = cams[i];
    fr.color = gt.color;
    fr.gt_sem = gt.sem_label;
    fr.gt_inst = gt.inst_label;
    fr.sem = gt.sem_label;
    fr.inst = gt.inst_label;
    inject_label_noise(fr.sem, fr.inst, scene.taxonomy, width, height, noise, uint64_t(i));
    // frame-local ids must be dense; when every thing is visible in every view
    // this keeps pseudo ids identical to the GT ids
    {
      std::set<uint16_t> used(fr.inst.begin(), fr.inst.end());
      used.erase(dataset::kNoInstance);
      std::map<uint16_t, uint16_t> remap;
      uint16_t next = 1;
      for (uint16_t id : used) remap[id] = next++;
      for (uint16_t& id : fr.inst)
        if (id != dataset::kNoInstance) id = remap[id];
    }
    fr.conf.assign(fr.n_pixels(), 1.0f);
    ds.frames.push_back(std::move(fr));
  }
  // semantic flips can mint fresh frame-local ids; grow V to keep the
  // "V >= max frame-local instance count" invariant
  int max_local = 0;
  for (const auto& fr : ds.frames) max_local = std::max(max_local, fr.n_local_instances());
  ds.taxonomy.n_instance_channels = std::max(ds.taxonomy.n_instance_channels, max_local + 1);
  ds.validate();
  if (!dir.empty()) dataset::save_dataset(ds, dir);
  return ds;
}

}  // namespace panfield::synth
