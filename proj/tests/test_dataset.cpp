#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "panfield/dataset.hpp"

using namespace panfield;
using namespace panfield::dataset;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "panfield_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

SceneDataset tiny_dataset() {
  SceneDataset ds;
  ds.taxonomy.n_classes = 3;
  ds.taxonomy.n_instance_channels = 3;
  ds.taxonomy.thing = {0, 0, 1};
  Frame fr;
  fr.camera.fx = fr.camera.fy = 10;
  fr.camera.cx = 2;
  fr.camera.cy = 1.5;
  fr.camera.width = 4;
  fr.camera.height = 3;
  fr.camera.t_near = 0.25;
  fr.camera.t_far = 3.75;
  fr.camera.pose = Mat4::identity();
  fr.camera.pose.at(0, 3) = 0.125;
  size_t n = fr.n_pixels();
  fr.color.resize(n * 3);
  for (size_t i = 0; i < fr.color.size(); ++i) fr.color[i] = float((i % 256) / 255.0);
  fr.sem.assign(n, 0);
  fr.inst.assign(n, kNoInstance);
  fr.sem[5] = 2;
  fr.inst[5] = 1;
  fr.sem[6] = 2;
  fr.inst[6] = 2;
  fr.sem[7] = 1;
  fr.conf.assign(n, 0.75f);
  ds.frames.push_back(fr);
  return ds;
}

}  // namespace

TEST_CASE("load_dataset on an empty directory reports the manifest") {
  std::string dir = temp_dir("empty");
  try {
    load_dataset(dir);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("manifest not found") != std::string::npos);
  }
}

TEST_CASE("save/load roundtrip is exact") {
  std::string dir = temp_dir("roundtrip");
  SceneDataset ds = tiny_dataset();
  save_dataset(ds, dir);
  SceneDataset re = load_dataset(dir);
  REQUIRE(re.frames.size() == 1);
  CHECK(re.taxonomy == ds.taxonomy);
  const Frame &a = ds.frames[0], &b = re.frames[0];
  CHECK(a.sem == b.sem);
  CHECK(a.inst == b.inst);
  CHECK(a.conf == b.conf);
  CHECK(a.camera.fx == b.camera.fx);
  CHECK(a.camera.t_near == b.camera.t_near);
  for (int i = 0; i < 16; ++i) CHECK(a.camera.pose.m[i] == b.camera.pose.m[i]);
  // color roundtrips exactly after the documented 8-bit quantization
  for (size_t i = 0; i < a.color.size(); ++i)
    CHECK(b.color[i] == doctest::Approx(quantize8(a.color[i]) / 255.0f).epsilon(1e-9));
  // a second roundtrip is bit-exact
  std::string dir2 = temp_dir("roundtrip2");
  save_dataset(re, dir2);
  SceneDataset re2 = load_dataset(dir2);
  CHECK(re.frames[0].color == re2.frames[0].color);
  CHECK(re.frames[0].sem == re2.frames[0].sem);
}

TEST_CASE("color 0.5 quantizes to 128/255") {
  CHECK(quantize8(0.5f) == 128);
  std::string dir = temp_dir("quant");
  std::vector<float> img(3, 0.5f);
  write_ppm(dir + "/x.ppm", img, 1, 1);
  int w = 0, h = 0;
  auto back = read_ppm(dir + "/x.ppm", w, h);
  CHECK(back[0] == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("u16 label container stores large ids exactly") {
  std::string dir = temp_dir("u16");
  std::vector<uint16_t> labels{300, 0, 65535, 12};
  write_u16_map(dir + "/l.u16", labels, 2, 2);
  int w = 0, h = 0;
  CHECK(read_u16_map(dir + "/l.u16", w, h) == labels);
  CHECK(w == 2);
  CHECK(h == 2);
}

TEST_CASE("ray_for_pixel basics") {
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = 200;
  cam.height = 200;
  cam.t_near = 0.1;
  cam.t_far = 10;

  Ray r0 = ray_for_pixel(cam, 50, 50);
  CHECK(r0.dir.x == doctest::Approx(0.0));
  CHECK(r0.dir.y == doctest::Approx(0.0));
  CHECK(r0.dir.z == doctest::Approx(1.0));

  Ray r1 = ray_for_pixel(cam, 150, 50);
  CHECK(r1.dir.x == doctest::Approx(0.70710678).epsilon(1e-7));
  CHECK(r1.dir.y == doctest::Approx(0.0));
  CHECK(r1.dir.z == doctest::Approx(0.70710678).epsilon(1e-7));

  CHECK_THROWS(ray_for_pixel(cam, -1, 0));
  CHECK_THROWS(ray_for_pixel(cam, 0, 200));
}

TEST_CASE("ray directions are unit and origins match the pose") {
  Rng rng(9);
  CameraModel cam;
  cam.fx = 80;
  cam.fy = 95;
  cam.cx = 31;
  cam.cy = 33;
  cam.width = 64;
  cam.height = 64;
  // a rotation about y by 0.3 plus a translation
  double c = std::cos(0.3), s = std::sin(0.3);
  cam.pose = Mat4::identity();
  cam.pose.at(0, 0) = c;
  cam.pose.at(0, 2) = s;
  cam.pose.at(2, 0) = -s;
  cam.pose.at(2, 2) = c;
  cam.pose.at(1, 3) = 2.5;
  for (int i = 0; i < 200; ++i) {
    double px = rng.uniform(0, 64), py = rng.uniform(0, 64);
    Ray r = ray_for_pixel(cam, px, py);
    CHECK(std::fabs(norm(r.dir) - 1.0) < 1e-9);
    CHECK(r.origin.y == doctest::Approx(2.5));
  }
}

TEST_CASE("camera validation rejects bad poses and ranges") {
  CameraModel cam;
  cam.fx = cam.fy = 10;
  cam.width = cam.height = 4;
  cam.t_near = 0.1;
  cam.t_far = 2;
  cam.pose = Mat4::identity();
  CHECK_NOTHROW(cam.validate());
  CameraModel bad = cam;
  bad.pose.at(0, 0) = 1.1;  // not orthonormal
  CHECK_THROWS(bad.validate());
  bad = cam;
  bad.t_near = 0;
  CHECK_THROWS(bad.validate());
  bad = cam;
  bad.pose.at(0, 0) = -1;  // reflection, det = -1
  CHECK_THROWS(bad.validate());
}

TEST_CASE("dataset validation enforces label invariants") {
  SceneDataset ds = tiny_dataset();
  CHECK_NOTHROW(ds.validate());
  SUBCASE("instance on a stuff pixel") {
    ds.frames[0].inst[0] = 1;
    CHECK_THROWS(ds.validate());
  }
  SUBCASE("thing pixel without instance") {
    ds.frames[0].inst[5] = kNoInstance;
    CHECK_THROWS(ds.validate());
  }
  SUBCASE("non-dense frame-local ids") {
    ds.frames[0].inst[5] = 2;
    ds.frames[0].inst[6] = 3;
    CHECK_THROWS(ds.validate());
  }
  SUBCASE("semantic label outside taxonomy") {
    ds.frames[0].sem[0] = 7;
    CHECK_THROWS(ds.validate());
  }
}
