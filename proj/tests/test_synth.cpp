#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "panfield/synth.hpp"

using namespace panfield;
using namespace panfield::synth;

namespace {

std::string temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / "panfield_tests" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

dataset::CameraModel straight_camera(int w, int h) {
  dataset::CameraModel cam;
  cam.fx = cam.fy = 0.9 * w;
  cam.cx = 0.5 * w;
  cam.cy = 0.5 * h;
  cam.width = w;
  cam.height = h;
  cam.t_near = 0.1;
  cam.t_far = 3.9;
  cam.pose = Mat4::identity();
  cam.pose.at(2, 3) = -1.9;  // looking +z at the origin
  return cam;
}

}  // namespace

TEST_CASE("analytic render of an empty scene") {
  SynthScene scene;
  scene.name = "empty";
  scene.background = {0.1, 0.2, 0.3};
  scene.taxonomy.n_classes = 2;
  scene.taxonomy.n_instance_channels = 2;
  scene.taxonomy.thing = {0, 1};
  auto img = analytic_render(scene, straight_camera(4, 4));
  for (int p = 0; p < 16; ++p) {
    CHECK(img.color[p * 3 + 0] == doctest::Approx(0.1));
    CHECK(img.color[p * 3 + 2] == doctest::Approx(0.3));
    CHECK(img.sem_label[p] == dataset::kVoidClass);
    CHECK(img.inst_label[p] == 0);
    CHECK(img.sem_prob[p * 2 + 0] == doctest::Approx(1.0));  // residual share
  }
}

TEST_CASE("single opaque box fills the pixel exactly") {
  SynthScene scene;
  scene.name = "box";
  scene.taxonomy.n_classes = 3;
  scene.taxonomy.n_instance_channels = 2;
  scene.taxonomy.thing = {0, 0, 1};
  Primitive box;
  box.shape = Primitive::Shape::kBox;
  box.center = {0, 0, 0};
  box.half_extents = {0.4, 0.4, 0.4};
  box.density = 1e4;
  box.color = {0.9, 0.3, 0.2};
  box.sem_class = 2;
  box.instance_id = 1;
  scene.primitives = {box};
  auto img = analytic_render(scene, straight_camera(8, 8));
  // center pixel: fully occluded by the box
  int p = 4 * 8 + 4;
  CHECK(img.color[p * 3 + 0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(img.color[p * 3 + 1] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(img.sem_label[p] == 2);
  CHECK(img.inst_label[p] == 1);
  CHECK(img.depth[p] > 1.0);
  CHECK(img.depth[p] < 2.0);
}

TEST_CASE("two translucent slabs composite in closed form") {
  // slab A over z [-0.5, 0], slab B over z [0, 0.5], both sigma = 2, so each
  // contributes optical depth 1 on an axis ray
  SynthScene scene;
  scene.name = "slabs";
  scene.taxonomy.n_classes = 3;
  scene.taxonomy.n_instance_channels = 1;
  scene.taxonomy.thing = {0, 0, 0};
  Primitive a, b;
  a.shape = b.shape = Primitive::Shape::kBox;
  a.center = {0, 0, -0.25};
  b.center = {0, 0, 0.25};
  a.half_extents = b.half_extents = {0.55, 0.55, 0.25};
  a.density = b.density = 2.0;
  a.color = {1.0, 0.0, 0.25};
  b.color = {0.0, 1.0, 0.5};
  a.sem_class = 1;
  b.sem_class = 2;
  scene.primitives = {a, b};
  auto img = analytic_render(scene, straight_camera(9, 9));
  int p = 4 * 9 + 4;
  const double e1 = std::exp(-1.0);
  double wa = 1 - e1, wb = e1 * (1 - e1);
  CHECK(img.color[p * 3 + 0] == doctest::Approx(wa * 1.0).epsilon(1e-6));
  CHECK(img.color[p * 3 + 1] == doctest::Approx(wb * 1.0).epsilon(1e-6));
  CHECK(img.color[p * 3 + 2] == doctest::Approx(wa * 0.25 + wb * 0.5).epsilon(1e-6));
  // residual transmittance e^-2 shows up as the void share
  CHECK(img.sem_prob[p * 3 + 0] == doctest::Approx(std::exp(-2.0)).epsilon(1e-6));
}

TEST_CASE("standard scenes validate and make_dataset produces loadable frames") {
  for (const std::string& name : standard_scene_names()) {
    SynthScene scene = make_scene(name);
    CHECK_NOTHROW(scene.validate());
  }
  std::string dir = temp_dir("make_dataset");
  SynthScene scene = make_scene("three-boxes");
  dataset::SceneDataset ds = make_dataset(scene, 8, 32, 32, NoiseSpec{}, dir);
  CHECK(ds.frames.size() == 8);
  CHECK(ds.taxonomy.n_classes == 5);
  CHECK(ds.taxonomy.n_instance_channels == 4);
  dataset::SceneDataset re = dataset::load_dataset(dir);
  CHECK(re.frames.size() == 8);
  CHECK(re.frames[3].sem == ds.frames[3].sem);
  CHECK(re.frames[3].has_gt());
}

TEST_CASE("noise disabled keeps pseudo labels equal to GT") {
  dataset::SceneDataset ds = make_dataset(make_scene("three-boxes"), 2, 24, 24, NoiseSpec{}, "");
  for (const auto& fr : ds.frames) {
    CHECK(fr.sem == fr.gt_sem);
    CHECK(fr.inst == fr.gt_inst);
  }
}

TEST_CASE("forced flip turns the map into a single other class") {
  dataset::ClassTaxonomy tax;
  tax.n_classes = 4;
  tax.n_instance_channels = 3;
  tax.thing = {0, 0, 1, 1};
  int w = 16, h = 16;
  std::vector<uint16_t> sem(w * h, 1), inst(w * h, dataset::kNoInstance);
  NoiseSpec noise;
  noise.p_flip = 1.0;
  noise.block = 64;  // one block covering the image
  noise.seed = 5;
  inject_label_noise(sem, inst, tax, w, h, noise, 0);
  std::set<uint16_t> classes(sem.begin(), sem.end());
  CHECK(classes.size() == 1);
  CHECK(*classes.begin() != 1);
  // instance map stays consistent with the flipped class
  bool thing = tax.is_thing(*classes.begin());
  for (auto v : inst) CHECK((v != dataset::kNoInstance) == thing);
}

TEST_CASE("flip rate matches the binomial expectation") {
  dataset::ClassTaxonomy tax;
  tax.n_classes = 3;
  tax.n_instance_channels = 1;
  tax.thing = {0, 0, 0};
  int w = 200, h = 200, block = 2;  // 10^4 blocks
  std::vector<uint16_t> sem(w * h, 1), inst(w * h, dataset::kNoInstance);
  NoiseSpec noise;
  noise.p_flip = 0.1;
  noise.block = block;
  noise.seed = 77;
  inject_label_noise(sem, inst, tax, w, h, noise, 0);
  int flipped_blocks = 0;
  for (int by = 0; by < h / block; ++by)
    for (int bx = 0; bx < w / block; ++bx)
      if (sem[(by * block) * w + bx * block] != 1) ++flipped_blocks;
  double f = flipped_blocks / 1e4;
  double sigma = std::sqrt(0.1 * 0.9 / 1e4);
  CHECK(std::fabs(f - 0.1) < 3 * sigma);
}

TEST_CASE("noise is deterministic given the seed") {
  dataset::ClassTaxonomy tax;
  tax.n_classes = 5;
  tax.n_instance_channels = 4;
  tax.thing = {0, 0, 1, 1, 1};
  std::vector<uint16_t> sem(64 * 64);
  std::vector<uint16_t> inst(64 * 64, dataset::kNoInstance);
  for (size_t i = 0; i < sem.size(); ++i) sem[i] = i % 2;
  NoiseSpec noise;
  noise.p_flip = 0.3;
  noise.block = 4;
  noise.permute_instances = true;
  noise.seed = 1234;
  auto s1 = sem, i1 = inst;
  inject_label_noise(s1, i1, tax, 64, 64, noise, 3);
  auto s2 = sem, i2 = inst;
  inject_label_noise(s2, i2, tax, 64, 64, noise, 3);
  CHECK(s1 == s2);
  CHECK(i1 == i2);
}

TEST_CASE("instance permutation preserves the pixel partition") {
  dataset::SceneDataset clean = make_dataset(make_scene("three-boxes"), 3, 32, 32, NoiseSpec{}, "");
  NoiseSpec noise;
  noise.permute_instances = true;
  noise.seed = 9;
  dataset::SceneDataset perm = make_dataset(make_scene("three-boxes"), 3, 32, 32, noise, "");
  bool any_changed = false;
  for (size_t f = 0; f < clean.frames.size(); ++f) {
    // group pixels by id in both maps; the multiset of pixel groups must match
    auto groups_of = [](const std::vector<uint16_t>& inst) {
      std::map<uint16_t, std::vector<size_t>> g;
      for (size_t p = 0; p < inst.size(); ++p)
        if (inst[p] != dataset::kNoInstance) g[inst[p]].push_back(p);
      std::set<std::vector<size_t>> out;
      for (auto& [id, v] : g) out.insert(v);
      return out;
    };
    CHECK(groups_of(clean.frames[f].inst) == groups_of(perm.frames[f].inst));
    any_changed |= clean.frames[f].inst != perm.frames[f].inst;
  }
  CHECK(any_changed);  // the permutation actually permuted something
}

TEST_CASE("orbit cameras are valid and look at the scene") {
  auto cams = orbit_cameras(6, 48, 48);
  CHECK(cams.size() == 6);
  for (const auto& cam : cams) {
    CHECK_NOTHROW(cam.validate());
    // the optical axis passes near the origin
    dataset::Ray r = dataset::ray_for_pixel(cam, cam.cx, cam.cy);
    Vec3 closest = r.origin + r.dir * -dot(r.origin, r.dir);
    CHECK(norm(closest) < 1e-9);
  }
}

