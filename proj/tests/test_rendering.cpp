#include <doctest.h>

#include <cmath>

#include "panfield/rendering.hpp"
#include "panfield/synth.hpp"

using namespace panfield;
using namespace panfield::rendering;

TEST_CASE("sample_along_ray midpoints") {
  Rng rng(1);
  auto t1 = sample_along_ray(0.1, 1.1, 1, false, rng);
  REQUIRE(t1.size() == 1);
  CHECK(t1[0] == doctest::Approx(0.6));
  auto t4 = sample_along_ray(0.0, 4.0, 4, false, rng);
  CHECK(t4[0] == doctest::Approx(0.5));
  CHECK(t4[1] == doctest::Approx(1.5));
  CHECK(t4[2] == doctest::Approx(2.5));
  CHECK(t4[3] == doctest::Approx(3.5));
  CHECK_THROWS(sample_along_ray(0, 1, 0, false, rng));
}

TEST_CASE("stratified samples stay inside their buckets") {
  Rng rng(77);
  const int n = 8;
  const double t_near = 0.3, t_far = 2.7, dt = (t_far - t_near) / n;
  for (int trial = 0; trial < 10000; ++trial) {
    auto ts = sample_along_ray(t_near, t_far, n, true, rng);
    for (int i = 0; i < n; ++i) {
      CHECK(ts[i] >= t_near + i * dt);
      CHECK(ts[i] < t_near + (i + 1) * dt);
      if (i) CHECK(ts[i] > ts[i - 1]);
    }
  }
}

TEST_CASE("compute_weights basics") {
  std::vector<double> w;
  double resid = 0;

  compute_weights({0, 0, 0}, {0.5, 1.0, 1.5}, 2.0, w, resid);
  for (double v : w) CHECK(v == 0.0);
  CHECK(resid == doctest::Approx(1.0));

  compute_weights({1e6, 1.0}, {0.0, 1.0}, 2.0, w, resid);
  CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(w[1] == doctest::Approx(0.0));

  // sigma = (1, 1), dt = (1, 1)
  compute_weights({1.0, 1.0}, {0.0, 1.0}, 2.0, w, resid);
  CHECK(w[0] == doctest::Approx(0.632121).epsilon(1e-5));
  CHECK(w[1] == doctest::Approx(0.232544).epsilon(1e-5));
  CHECK(w[0] + w[1] + resid == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS(compute_weights({1, 1}, {1.0, 0.5}, 2.0, w, resid));  // unsorted
  CHECK_THROWS(compute_weights({-1}, {0.5}, 1.0, w, resid));         // negative density
}

TEST_CASE("weight normalization property on random rays") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    int n = 1 + rng.uniform_int(64);
    std::vector<double> ts(n);
    double t = rng.uniform(0.01, 0.5);
    for (int i = 0; i < n; ++i) {
      ts[i] = t;
      t += rng.uniform(0.001, 0.2);
    }
    double t_far = t + rng.uniform(0.0, 0.2);
    std::vector<double> sig(n);
    for (double& s : sig) s = rng.uniform(0.0, 30.0);
    std::vector<double> w;
    double resid;
    compute_weights(sig, ts, t_far, w, resid);
    double sum = resid;
    for (double v : w) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("increasing the first density never decreases the first weight") {
  std::vector<double> ts{0.2, 0.8, 1.4};
  double prev = -1;
  for (double s1 : {0.0, 0.3, 1.0, 4.0, 20.0, 1e4}) {
    std::vector<double> w;
    double resid;
    compute_weights({s1, 2.0, 1.0}, ts, 2.0, w, resid);
    CHECK(w[0] >= prev);
    prev = w[0];
  }
}

namespace {

RaySampleSet two_sample_set() {
  RaySampleSet s;
  s.ts = {0.5, 1.0};
  s.t_far = 1.5;
  s.sigmas = {1.0, 2.0};
  s.colors = {{1, 0, 0}, {0, 1, 0}};
  s.us = {{4, 0, 0}, {0, 0, 0}};
  s.vs = {{0, 1}, {1, 0}};
  compute_weights(s.sigmas, s.ts, s.t_far, s.weights, s.t_resid);
  return s;
}

}  // namespace

TEST_CASE("composite_pixel worked examples") {
  std::vector<uint8_t> thing{0, 1, 1};

  SUBCASE("all weights zero gives black and uniform simplices") {
    RaySampleSet s;
    s.ts = {0.5, 1.0};
    s.t_far = 1.5;
    s.sigmas = {0, 0};
    s.colors = {{1, 0, 0}, {0, 1, 0}};
    s.us = {{4, 0, 0}, {1, 1, 1}};
    s.vs = {{0, 1}, {1, 0}};
    compute_weights(s.sigmas, s.ts, s.t_far, s.weights, s.t_resid);
    PanopticPixel px = composite_pixel(s, thing);
    CHECK(px.C[0] == 0.0);
    for (double u : px.U) CHECK(u == doctest::Approx(1.0 / 3));
    for (double v : px.V) CHECK(v == doctest::Approx(0.5));
  }

  SUBCASE("single unit weight reproduces the softmax of its logits") {
    RaySampleSet s;
    s.ts = {0.5};
    s.t_far = 1.5;
    s.sigmas = {1e9};
    s.colors = {{0.2, 0.4, 0.6}};
    s.us = {{4, 0, 0}};
    s.vs = {{0, 0}};
    compute_weights(s.sigmas, s.ts, s.t_far, s.weights, s.t_resid);
    PanopticPixel px = composite_pixel(s, thing);
    // softmax(4, 0, 0) = e^4/(e^4 + 2) = 0.9646627 and 0.0176686 on the rest
    CHECK(px.U[0] == doctest::Approx(0.9646627).epsilon(1e-5));
    CHECK(px.U[1] == doctest::Approx(0.0176686).epsilon(1e-4));
    CHECK(px.U[2] == doctest::Approx(0.0176686).epsilon(1e-4));
    CHECK(px.sem_label == 0);
    CHECK(px.inst_label == -1);  // class 0 is stuff here
  }

  SUBCASE("adding a constant to every semantic logit changes nothing") {
    RaySampleSet s = two_sample_set();
    PanopticPixel a = composite_pixel(s, thing);
    for (auto& u : s.us)
      for (double& v : u) v += 3.25;
    PanopticPixel b = composite_pixel(s, thing);
    CHECK(a.sem_label == b.sem_label);
    for (size_t k = 0; k < a.U.size(); ++k) CHECK(a.U[k] == doctest::Approx(b.U[k]).epsilon(1e-12));
  }

  SUBCASE("simplex outputs") {
    RaySampleSet s = two_sample_set();
    PanopticPixel px = composite_pixel(s, thing);
    double su = 0, sv = 0;
    for (double u : px.U) { CHECK(u > 0); su += u; }
    for (double v : px.V) { CHECK(v > 0); sv += v; }
    CHECK(su == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(sv == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(px.depth > 0);
    CHECK(px.disparity > 0);
  }

  SUBCASE("t <= 0 is rejected at the disparity term") {
    RaySampleSet s = two_sample_set();
    s.ts[0] = 0.0;
    s.weights = {0.5, 0.2};
    CHECK_THROWS(composite_pixel(s, thing));
  }
}

TEST_CASE("batch weights agree with the single-ray routine") {
  Rng rng(13);
  const int nr = 16, N = 24;
  std::vector<double> ts(nr * N), sig(nr * N), tf(nr);
  for (int r = 0; r < nr; ++r) {
    double t = 0.2;
    for (int i = 0; i < N; ++i) {
      t += rng.uniform(0.01, 0.1);
      ts[r * N + i] = t;
      sig[r * N + i] = rng.uniform(0.0, 8.0);
    }
    tf[r] = t + 0.05;
  }
  std::vector<double> w_batch(nr * N), resid(nr);
  batch_weights(sig.data(), ts.data(), tf.data(), nr, N, w_batch.data(), resid.data());
  for (int r = 0; r < nr; ++r) {
    std::vector<double> ts1(ts.begin() + r * N, ts.begin() + (r + 1) * N);
    std::vector<double> sg1(sig.begin() + r * N, sig.begin() + (r + 1) * N);
    std::vector<double> w1;
    double res1;
    compute_weights(sg1, ts1, tf[r], w1, res1);
    for (int i = 0; i < N; ++i) CHECK(w_batch[r * N + i] == doctest::Approx(w1[i]).epsilon(1e-14));
    CHECK(resid[r] == doctest::Approx(res1).epsilon(1e-14));
  }
}

TEST_CASE("render_view of a near-empty field is black with uniform semantics") {
  field::FieldConfig cfg;
  cfg.enc.geometric = {{4}, 2, 2.0};
  cfg.enc.understanding = {{4}, 1, 2.0};
  cfg.enc.n_freq = 1;
  cfg.enc.sh_degree = 1;
  cfg.geo = {4, 1};
  cfg.geo_feat_dim = 3;
  cfg.app = {4, 1};
  cfg.sem = {4, 1};
  cfg.inst = {4, 1};
  cfg.n_classes = 3;
  cfg.n_instance_channels = 2;
  cfg.cascade = false;
  field::ParamStore<float> store;
  store.cfg = cfg;
  store.params = field::make_zero_params<float>(cfg);
  store.grads = field::make_zero_params<float>(cfg);
  store.params.geo.b.back().data[0] = -60.f;  // sigma ~ 0 everywhere

  dataset::CameraModel cam;
  cam.fx = cam.fy = 2;
  cam.cx = cam.cy = 1;
  cam.width = cam.height = 2;
  cam.t_near = 0.5;
  cam.t_far = 2.0;

  RenderConfig rc;
  rc.n_samples = 8;
  auto img = render_view(store, cam, rc, {0, 0, 1});
  for (float c : img.color) CHECK(std::fabs(c) < 1e-12f);  // softplus never hits exact zero
  for (float u : img.sem_prob) CHECK(u == doctest::Approx(1.0f / 3).epsilon(1e-5));
  for (auto l : img.sem_label) CHECK(l == 0);
}

TEST_CASE("chunked rendering is bit-identical to unchunked") {
  auto store = field::ParamStore<float>::init(
      []{
        field::FieldConfig c;
        c.enc.geometric = {{4, 8}, 2, 2.0};
        c.enc.understanding = {{4}, 1, 2.0};
        c.enc.n_freq = 2;
        c.enc.sh_degree = 2;
        c.geo = {8, 2};
        c.geo_feat_dim = 5;
        c.app = {8, 2};
        c.sem = {8, 2};
        c.inst = {8, 2};
        c.n_classes = 4;
        c.n_instance_channels = 3;
        c.cascade = false;
        return c;
      }(),
      91);
  dataset::CameraModel cam;
  cam.fx = cam.fy = 12;
  cam.cx = cam.cy = 6;
  cam.width = cam.height = 12;
  cam.t_near = 0.4;
  cam.t_far = 3.0;
  RenderConfig a, b;
  a.n_samples = b.n_samples = 11;
  a.chunk = 1;
  b.chunk = 12 * 12;
  a.seed = b.seed = 9;
  auto ia = render_view(store, cam, a, {0, 0, 1, 1});
  auto ib = render_view(store, cam, b, {0, 0, 1, 1});
  CHECK(ia.color == ib.color);
  CHECK(ia.sem_prob == ib.sem_prob);
  CHECK(ia.inst_label == ib.inst_label);
  CHECK(ia.depth == ib.depth);
}

TEST_CASE("oracle field rendering matches the analytic image at the test view") {
  synth::SynthScene scene = synth::make_scene("three-boxes");
  auto cam = synth::standard_test_camera("three-boxes");
  auto gt = synth::analytic_render(scene, cam);
  auto field_fn = synth::scene_field_fn(scene);
  RenderConfig rc;
  rc.n_samples = 512;
  auto img = render_view_oracle(field_fn, scene.taxonomy.n_classes,
                                scene.taxonomy.n_instance_channels, cam, rc, scene.taxonomy.thing);
  double max_err = 0;
  for (size_t i = 0; i < gt.color.size(); ++i)
    max_err = std::max(max_err, std::fabs(double(img.color[i]) - double(gt.color[i])));
  CHECK(max_err < 0.01);
}

TEST_CASE("rendered color converges monotonically on the oracle scene") {
  synth::SynthScene scene = synth::make_scene("fog-road");
  auto cam = synth::standard_test_camera("fog-road");
  auto gt = synth::analytic_render(scene, cam);
  auto field_fn = synth::scene_field_fn(scene);
  double prev = 1e9;
  for (int n : {32, 64, 128, 256, 512}) {
    RenderConfig rc;
    rc.n_samples = n;
    auto img = render_view_oracle(field_fn, scene.taxonomy.n_classes,
                                  scene.taxonomy.n_instance_channels, cam, rc,
                                  scene.taxonomy.thing);
    double mean_err = 0;
    for (size_t i = 0; i < gt.color.size(); ++i)
      mean_err += std::fabs(double(img.color[i]) - double(gt.color[i]));
    mean_err /= gt.color.size();
    CHECK(mean_err <= prev + 1e-12);
    prev = mean_err;
  }
}
