#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "panfield/supervision.hpp"
#include "panfield/synth.hpp"

using namespace panfield;
using namespace panfield::supervision;

namespace {

dataset::SceneDataset boxes_dataset(int views = 2, int res = 40) {
  return synth::make_dataset(synth::make_scene("three-boxes"), views, res, res,
                             synth::NoiseSpec{}, "");
}

}  // namespace

TEST_CASE("sample_patches degenerate and full-frame cases") {
  auto ds = boxes_dataset(2, 16);
  Rng rng(4);
  PatchBatch single = sample_patches(ds, {0, 1}, 1, 5, rng);
  CHECK(single.n_rays() == 5);
  CHECK(single.patches.size() == 5);

  PatchBatch full = sample_patches(ds, {0}, 16, 1, rng);
  CHECK(full.n_rays() == 256);
  CHECK(full.patches[0].x0 == 0);
  CHECK(full.patches[0].y0 == 0);
  // rays are the frame's pixels exactly once
  std::set<uint32_t> pix(full.pixel_of_ray.begin(), full.pixel_of_ray.end());
  CHECK(pix.size() == 256);

  CHECK_THROWS(sample_patches(ds, {0}, 17, 1, rng));
}

TEST_CASE("sample_patches covers top-left positions uniformly") {
  auto ds = boxes_dataset(2, 8);
  Rng rng(12);
  const int P = 3;  // 6x6 = 36 valid top-lefts
  std::map<std::pair<int, int>, int> counts;
  const int draws = 10000;
  PatchBatch b = sample_patches(ds, {0}, P, draws, rng);
  for (const auto& p : b.patches) counts[{p.x0, p.y0}]++;
  const double expect = draws / 36.0;
  const double sigma = std::sqrt(draws * (1.0 / 36) * (35.0 / 36));
  CHECK(counts.size() == 36);
  for (auto& [pos, c] : counts) CHECK(std::fabs(c - expect) < 5 * sigma);
}

TEST_CASE("cluster_same_label partitions each patch by label") {
  auto ds = boxes_dataset(2, 40);
  Rng rng(9);
  PatchBatch batch = sample_patches(ds, {0, 1}, 12, 3, rng);
  auto groups = cluster_same_label(batch, 0);
  // members all share the group label; groups are disjoint
  std::set<int> used;
  for (const auto& g : groups) {
    CHECK(g.ray_indices.size() >= 2);
    for (int r : g.ray_indices) {
      CHECK(batch.sem[r] == g.label);
      CHECK(!used.count(r));
      used.insert(r);
    }
  }
  // every dropped ray is a singleton of its (patch, label) cell
  std::map<std::pair<size_t, int>, int> cell_count;
  for (size_t p = 0; p < batch.patches.size(); ++p)
    for (size_t r = batch.patches[p].ray_offset; r < batch.patches[p].ray_offset + 144; ++r)
      cell_count[{p, batch.sem[r]}]++;
  for (size_t p = 0; p < batch.patches.size(); ++p)
    for (size_t r = batch.patches[p].ray_offset; r < batch.patches[p].ray_offset + 144; ++r)
      if (!used.count(int(r))) CHECK(cell_count[{p, batch.sem[r]}] == 1);
}

TEST_CASE("cluster sizes for a hand-built batch") {
  // one 3x3 patch: labels 1 on three rays, 2 on five, a dropped singleton 4
  PatchBatch b;
  b.patch_side = 3;
  b.patches.push_back({0, 0, 0, 3, 0});
  b.sem = {1, 1, 1, 2, 2, 2, 2, 2, 4};
  b.rays.resize(9);
  auto groups = cluster_same_label(b, 0);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].ray_indices.size() == 3);
  CHECK(groups[0].label == 1);
  CHECK(groups[1].ray_indices.size() == 5);
  CHECK(groups[1].label == 2);
}

TEST_CASE("assign_instances recovers concentrated and permuted channels") {
  const int V = 5;
  SUBCASE("diagonal dominance maps j to j+1") {
    std::vector<int> ids;
    std::vector<float> prob;
    for (int j = 0; j < 3; ++j) {
      for (int rep = 0; rep < 4; ++rep) {
        ids.push_back(j);
        std::vector<float> row(V, 0.01f / (V - 1));
        row[j + 1] = 0.99f;
        float s = 0;
        for (float v : row) s += v;
        for (float& v : row) v /= s;
        prob.insert(prob.end(), row.begin(), row.end());
      }
    }
    auto a = assign_instances(0, ids, prob, V);
    CHECK(a.local_to_channel == std::vector<int>{1, 2, 3});
  }
  SUBCASE("permuted mass recovers the permutation") {
    // rendered mass for local id j concentrated on channel perm[j]+1
    std::vector<int> perm{2, 0, 1};
    std::vector<int> ids;
    std::vector<float> prob;
    for (int j = 0; j < 3; ++j) {
      ids.push_back(j);
      std::vector<float> row(V, 0.02f);
      row[perm[j] + 1] = 0.92f;
      prob.insert(prob.end(), row.begin(), row.end());
    }
    auto a = assign_instances(7, ids, prob, V);
    CHECK(a.frame == 7);
    CHECK(a.local_to_channel == std::vector<int>{3, 1, 2});
  }
  SUBCASE("uniform distributions tie at n_ids * log V") {
    const int channels = 65;
    std::vector<int> ids{0, 1, 2};
    std::vector<float> prob(3 * channels, 1.0f / channels);
    auto a = assign_instances(0, ids, prob, channels);
    CHECK(a.total_cost == doctest::Approx(3.0 * std::log(65.0)).epsilon(1e-7));
  }
  SUBCASE("capacity error") {
    std::vector<int> ids{0, 1, 2, 3, 4};
    std::vector<float> prob(5 * V, 1.0f / V);
    CHECK_THROWS(assign_instances(0, ids, prob, V));
  }
}

TEST_CASE("charbonnier loss") {
  std::vector<double> a{0.5, 0.5}, b{0.5, 0.5};
  CHECK(charbonnier_loss(a.data(), b.data(), 2, 1e-4) == doctest::Approx(1e-4).epsilon(1e-9));
  std::vector<double> c{3e-4}, d{0.0};
  CHECK(charbonnier_loss(c.data(), d.data(), 1, 1e-4) ==
        doctest::Approx(3.16228e-4).epsilon(1e-5));
  std::vector<double> e{0.1}, f{0.0};
  CHECK(charbonnier_loss(e.data(), f.data(), 1, 1e-4) ==
        doctest::Approx(0.1).epsilon(1e-6));  // |diff| asymptote
}

TEST_CASE("charbonnier backward matches finite differences") {
  Rng rng(3);
  const int n = 10;
  std::vector<double> a(n), b(n), da(n, 0.0);
  for (int i = 0; i < n; ++i) {
    a[i] = rng.uniform(0, 1);
    b[i] = rng.uniform(0, 1);
  }
  charbonnier_backward(a.data(), b.data(), n, 1e-4, 2.0, da.data());
  const double h = 1e-7;
  for (int i = 0; i < n; ++i) {
    double saved = a[i];
    a[i] = saved + h;
    double lp = charbonnier_loss(a.data(), b.data(), n, 1e-4);
    a[i] = saved - h;
    double lm = charbonnier_loss(a.data(), b.data(), n, 1e-4);
    a[i] = saved;
    CHECK(da[i] == doctest::Approx(2.0 * (lp - lm) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("semantic loss worked examples") {
  SUBCASE("confident correct prediction") {
    std::vector<double> prob{1.0 - 1e-9, 0.5e-9, 0.5e-9};
    uint16_t t = 0;
    float l = 1.0f;
    CHECK(semantic_loss(prob.data(), 3, &t, &l, 1) == doctest::Approx(1e-9).epsilon(0.01));
  }
  SUBCASE("uniform over four classes") {
    std::vector<double> prob{0.25, 0.25, 0.25, 0.25};
    uint16_t t = 2;
    float l = 1.0f;
    CHECK(semantic_loss(prob.data(), 4, &t, &l, 1) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }
  SUBCASE("zero confidence annihilates the loss") {
    std::vector<double> prob{0.25, 0.25, 0.25, 0.25, 0.25, 0.75};  // two rays, dim 3... use dim 3
    std::vector<double> p{0.2, 0.3, 0.5, 0.6, 0.3, 0.1};
    std::vector<uint16_t> t{0, 2};
    std::vector<float> l{0.f, 0.f};
    CHECK(semantic_loss(p.data(), 3, t.data(), l.data(), 2) == 0.0);
  }
}

TEST_CASE("instance loss worked examples") {
  SUBCASE("uniform over 65 channels") {
    std::vector<double> prob(65, 1.0 / 65);
    uint16_t t = 13;
    float l = 1.0f;
    CHECK(instance_loss(prob.data(), 65, &t, &l, 1) == doctest::Approx(4.17439).epsilon(1e-5));
  }
  SUBCASE("perfect prediction") {
    std::vector<double> prob{1e-9, 1.0 - 2e-9, 1e-9};
    uint16_t t = 1;
    float l = 1.0f;
    CHECK(instance_loss(prob.data(), 3, &t, &l, 1) < 1e-8);
  }
}

TEST_CASE("instance targets: things map through the assignment, stuff to channel 0") {
  auto ds = boxes_dataset(2, 32);
  Rng rng(5);
  PatchBatch batch = sample_patches(ds, {0}, 32, 1, rng);
  std::vector<InstanceAssignment> assignments(1);
  assignments[0].frame = 0;
  assignments[0].local_to_channel = {2, 3, 1};
  auto targets = instance_targets(batch, ds, assignments);
  for (size_t r = 0; r < batch.n_rays(); ++r) {
    if (batch.inst[r] == dataset::kNoInstance) CHECK(targets[r] == 0);
    else CHECK(targets[r] == assignments[0].local_to_channel[batch.inst[r] - 1]);
  }
}

TEST_CASE("seg consistency loss") {
  // two groups over 4 rays with uniform predictions over 4 classes
  std::vector<double> prob(4 * 4, 0.25);
  std::vector<ClusterGroup> groups;
  groups.push_back({1, {0, 1}});
  groups.push_back({2, {2, 3}});
  std::vector<float> lambda(4, 1.0f);
  CHECK(seg_consistency_loss(groups.data() ? groups : groups, prob.data(), 4, lambda.data()) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  SUBCASE("already consistent predictions give zero") {
    std::vector<double> sharp(4 * 4, 1e-12);
    for (int r = 0; r < 2; ++r) sharp[r * 4 + 1] = 1.0;
    for (int r = 2; r < 4; ++r) sharp[r * 4 + 2] = 1.0;
    CHECK(seg_consistency_loss(groups, sharp.data(), 4, lambda.data()) ==
          doctest::Approx(0.0).epsilon(1e-8));
  }
  SUBCASE("ray-count-weighted combination of per-group values") {
    std::vector<double> p(6 * 2);
    // group A: 2 rays with prob 0.5 on label 0; group B: 4 rays with prob 0.25
    std::vector<ClusterGroup> g2;
    g2.push_back({0, {0, 1}});
    g2.push_back({1, {2, 3, 4, 5}});
    for (int r = 0; r < 2; ++r) { p[r * 2] = 0.5; p[r * 2 + 1] = 0.5; }
    for (int r = 2; r < 6; ++r) { p[r * 2] = 0.75; p[r * 2 + 1] = 0.25; }
    std::vector<float> lam(6, 1.0f);
    double expect = (2 * std::log(2.0) + 4 * std::log(4.0)) / 6.0;
    CHECK(seg_consistency_loss(g2, p.data(), 2, lam.data()) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("group order and ray order do not matter") {
    std::vector<ClusterGroup> shuffled;
    shuffled.push_back({2, {3, 2}});
    shuffled.push_back({1, {1, 0}});
    CHECK(seg_consistency_loss(shuffled, prob.data(), 4, lambda.data()) ==
          doctest::Approx(seg_consistency_loss(groups, prob.data(), 4, lambda.data())));
  }
  SUBCASE("no groups is a no-op") {
    std::vector<ClusterGroup> none;
    CHECK(seg_consistency_loss(none, prob.data(), 4, lambda.data()) == 0.0);
  }
}

TEST_CASE("perceptual loss with the identity extractor is pixel L2") {
  auto ex = FeatureExtractor<double>::identity();
  Rng rng(8);
  const int side = 4;
  std::vector<double> a(side * side * 3), b(side * side * 3);
  for (auto& v : a) v = rng.uniform(0, 1);
  for (auto& v : b) v = rng.uniform(0, 1);
  double want = 0;
  for (size_t i = 0; i < a.size(); ++i) want += (a[i] - b[i]) * (a[i] - b[i]);
  want = std::sqrt(want);
  CHECK(perceptual_loss(ex, a.data(), b.data(), 1, side) == doctest::Approx(want).epsilon(1e-12));
  CHECK(perceptual_loss(ex, a.data(), a.data(), 1, side) == 0.0);
  // symmetry
  CHECK(perceptual_loss(ex, b.data(), a.data(), 1, side) ==
        doctest::Approx(perceptual_loss(ex, a.data(), b.data(), 1, side)));
}

TEST_CASE("seeded conv extractor is deterministic and respects the minimum patch") {
  auto e1 = FeatureExtractor<float>::seeded_conv(42, 32);
  auto e2 = FeatureExtractor<float>::seeded_conv(42, 32);
  CHECK(e1.min_patch() == 32);
  Rng rng(3);
  std::vector<float> patch(32 * 32 * 3);
  for (auto& v : patch) v = float(rng.uniform(0, 1));
  auto f1 = e1.forward(patch.data(), 32);
  auto f2 = e2.forward(patch.data(), 32);
  CHECK(f1 == f2);
  CHECK(f1.size() == e1.out_dim(32));
  std::vector<float> small(16 * 16 * 3, 0.f);
  CHECK_THROWS(e1.forward(small.data(), 16));
}

TEST_CASE("perceptual loss backward matches finite differences through the conv") {
  auto ex = FeatureExtractor<double>::seeded_conv(5, 8);
  Rng rng(21);
  const int side = 32;
  std::vector<double> a(side * side * 3), b(side * side * 3);
  for (auto& v : a) v = rng.uniform(0, 1);
  for (auto& v : b) v = rng.uniform(0, 1);
  std::vector<double> da(a.size(), 0.0);
  perceptual_loss_backward(ex, a.data(), b.data(), 1, side, 1.0, da.data());
  const double h = 1e-6;
  Rng pick(77);
  for (int probe = 0; probe < 20; ++probe) {
    size_t i = pick.uniform_int(static_cast<uint32_t>(a.size()));
    double saved = a[i];
    a[i] = saved + h;
    double lp = perceptual_loss(ex, a.data(), b.data(), 1, side);
    a[i] = saved - h;
    double lm = perceptual_loss(ex, a.data(), b.data(), 1, side);
    a[i] = saved;
    double fd = (lp - lm) / (2 * h);
    CHECK(da[i] == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("precomputed-file extractor tag is rejected for training with guidance") {
  ExtractorConfig cfg;
  cfg.tag = "precomputed-file";
  CHECK_THROWS(FeatureExtractor<float>::create(cfg));
}

TEST_CASE("tv loss") {
  using encoding::GridLevel;
  using encoding::GridPyramid;
  SUBCASE("constant grid gives zero") {
    auto g = GridPyramid<double>::from_spec({{4}, 2, 2.0});
    for (auto& v : g.levels[0].data) v = 0.37;
    CHECK(tv_loss(g) == 0.0);
  }
  SUBCASE("two-node 1-D grid worked example") {
    GridPyramid<double> g;
    GridLevel<double> level;
    level.nx = 2;
    level.ny = 1;
    level.nz = 1;
    level.fdim = 1;
    level.data = {1.0, -1.0};
    g.levels.push_back(level);
    CHECK(tv_loss(g) == doctest::Approx(2.0));
  }
  SUBCASE("positive homogeneity") {
    Rng rng(2);
    auto g = GridPyramid<double>::from_spec({{3}, 2, 2.0});
    for (auto& v : g.levels[0].data) v = rng.uniform(-1, 1);
    double base = tv_loss(g);
    for (auto& v : g.levels[0].data) v *= 2.0;
    CHECK(tv_loss(g) == doctest::Approx(2.0 * base).epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    Rng rng(4);
    auto g = GridPyramid<double>::from_spec({{3}, 2, 2.0});
    for (auto& v : g.levels[0].data) v = rng.uniform(-1, 1);
    auto grads = GridPyramid<double>::from_spec({{3}, 2, 2.0});
    tv_backward(g, 1.5, grads);
    const double h = 1e-7;
    for (size_t i = 0; i < g.levels[0].data.size(); i += 7) {
      double saved = g.levels[0].data[i];
      g.levels[0].data[i] = saved + h;
      double lp = tv_loss(g);
      g.levels[0].data[i] = saved - h;
      double lm = tv_loss(g);
      g.levels[0].data[i] = saved;
      CHECK(grads.levels[0].data[i] == doctest::Approx(1.5 * (lp - lm) / (2 * h)).epsilon(1e-4));
    }
  }
}

TEST_CASE("disparity loss") {
  SUBCASE("zero weights") {
    std::vector<double> w(8, 0.0), ts(8, 1.0);
    for (int i = 0; i < 8; ++i) ts[i] = 0.5 + i * 0.1;
    CHECK(disparity_loss(w.data(), ts.data(), 2, 4) == 0.0);
  }
  SUBCASE("single unit weight at t = 2") {
    std::vector<double> w{1.0}, ts{2.0};
    CHECK(disparity_loss(w.data(), ts.data(), 1, 1) == doctest::Approx(0.5));
  }
  SUBCASE("mean over rays") {
    std::vector<double> w{1.0, 0.5}, ts{2.0, 1.0};
    // ray values: 0.5 and 0.5 -> mean 0.5
    CHECK(disparity_loss(w.data(), ts.data(), 2, 1) == doctest::Approx(0.5));
    CHECK_THROWS([&] {
      std::vector<double> bad_ts{0.0};
      std::vector<double> bw{0.1};
      disparity_loss(bw.data(), bad_ts.data(), 1, 1);
    }());
  }
}
