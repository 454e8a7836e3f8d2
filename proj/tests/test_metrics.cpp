#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "panfield/metrics.hpp"

using namespace panfield;
using namespace panfield::metrics;

namespace {

// exhaustive assignment oracle: tries every injective row->column mapping
double brute_force_cost(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  int m = static_cast<int>(cost[0].size());
  std::vector<int> cols(m);
  std::iota(cols.begin(), cols.end(), 0);
  double best = 1e300;
  do {
    double total = 0;
    for (int i = 0; i < n; ++i) total += cost[i][cols[i]];
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

}  // namespace

TEST_CASE("hungarian 1x1") {
  auto a = hungarian({{3.5}});
  CHECK(a.row_to_col == std::vector<int>{0});
  CHECK(a.total_cost == doctest::Approx(3.5));
}

TEST_CASE("hungarian worked 3x3 example") {
  auto a = hungarian({{4, 1, 3}, {2, 0, 5}, {3, 2, 2}});
  CHECK(a.total_cost == doctest::Approx(5.0));
  CHECK(a.row_to_col == std::vector<int>{1, 0, 2});
}

TEST_CASE("hungarian equals brute force on random matrices") {
  Rng rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + rng.uniform_int(6);
    int m = n + rng.uniform_int(static_cast<uint32_t>(7 - n));
    std::vector<std::vector<double>> cost(n, std::vector<double>(m));
    for (auto& row : cost)
      for (double& c : row) c = rng.uniform(-5.0, 5.0);
    auto a = hungarian(cost);
    CHECK(a.total_cost == doctest::Approx(brute_force_cost(cost)).epsilon(1e-12));
    // injectivity
    std::vector<int> seen;
    for (int c : a.row_to_col) {
      CHECK(c >= 0);
      CHECK(c < m);
      CHECK(std::find(seen.begin(), seen.end(), c) == seen.end());
      seen.push_back(c);
    }
  }
}

TEST_CASE("hungarian optimum bounds random injective assignments") {
  Rng rng(7);
  std::vector<std::vector<double>> cost(5, std::vector<double>(8));
  for (auto& row : cost)
    for (double& c : row) c = rng.uniform(0.0, 10.0);
  auto a = hungarian(cost);
  std::vector<int> cols(8);
  std::iota(cols.begin(), cols.end(), 0);
  for (int t = 0; t < 1000; ++t) {
    for (int i = 7; i > 0; --i) std::swap(cols[i], cols[rng.uniform_int(i + 1)]);
    double total = 0;
    for (int i = 0; i < 5; ++i) total += cost[i][cols[i]];
    CHECK(a.total_cost <= total + 1e-12);
  }
}

TEST_CASE("hungarian shift invariance") {
  Rng rng(11);
  std::vector<std::vector<double>> cost(4, std::vector<double>(4));
  for (auto& row : cost)
    for (double& c : row) c = rng.uniform(0.0, 3.0);
  auto base = hungarian(cost);
  auto shifted = cost;
  for (auto& row : shifted)
    for (double& c : row) c += 2.25;
  auto after = hungarian(shifted);
  CHECK(after.total_cost == doctest::Approx(base.total_cost + 4 * 2.25).epsilon(1e-12));
}

TEST_CASE("hungarian errors") {
  CHECK_THROWS(hungarian({{1, 2}, {3, 4}, {5, 6}}));  // 3 rows > 2 cols
  CHECK_THROWS(hungarian({{std::nan("")}}));
}

TEST_CASE("psnr") {
  std::vector<float> a(12, 0.25f), b(12, 0.25f);
  CHECK(psnr(a, b) == doctest::Approx(99.0));
  // MSE 0.01 -> 20 dB (up to the f32 rounding of 0.1)
  std::vector<float> c(100, 0.0f), d(100, 0.1f);
  CHECK(psnr(c, d) == doctest::Approx(20.0).epsilon(1e-6));
  std::vector<float> e(4, 0.0f), f(4, 0.5f);
  CHECK(psnr(e, f) == doctest::Approx(6.0206).epsilon(1e-4));
  CHECK_THROWS(psnr(a, c));
}

TEST_CASE("miou worked example") {
  // 4 pixels; class 1 predicted on pixels {0,1}, GT class 1 on {1,2}
  std::vector<uint16_t> pred{1, 1, 0, 0}, gt{0, 1, 1, 0};
  auto rep = miou({pred.data()}, {gt.data()}, 4, 2, /*void=*/0);
  CHECK(rep.class_iou[1] == doctest::Approx(1.0 / 3));
  CHECK(rep.class_iou[0] == doctest::Approx(1.0 / 3));
  CHECK(rep.miou == doctest::Approx(1.0 / 3));  // void excluded from the mean
}

TEST_CASE("miou identical and absent classes") {
  std::vector<uint16_t> a{1, 2, 2, 1};
  auto rep = miou({a.data()}, {a.data()}, 4, 5, 0);
  CHECK(rep.miou == doctest::Approx(1.0));
  CHECK(rep.class_iou[3] == -1.0);  // absent everywhere: excluded
  CHECK(rep.in_mean[3] == 0);
  std::vector<uint16_t> bad{9, 0, 0, 0};
  CHECK_THROWS(miou({bad.data()}, {a.data()}, 4, 5, 0));
}

namespace {

SegmentSet from_single(const std::vector<uint16_t>& sem, const std::vector<uint16_t>& inst,
                       const std::vector<uint8_t>& thing) {
  return SegmentSet::from_label_maps({sem.data()}, {inst.data()}, sem.size(), thing, 0);
}

}  // namespace

TEST_CASE("panoptic quality identical maps") {
  std::vector<uint16_t> sem{1, 1, 2, 2, 0}, inst{0, 0, 1, 1, 0};
  std::vector<uint8_t> thing{0, 0, 1};
  auto s = from_single(sem, inst, thing);
  auto rep = panoptic_quality(s, s);
  CHECK(rep.pq == doctest::Approx(1.0));
  CHECK(rep.sq == doctest::Approx(1.0));
  CHECK(rep.rq == doctest::Approx(1.0));
  CHECK(rep.fp == 0);
  CHECK(rep.fn == 0);
}

TEST_CASE("panoptic quality worked example: one TP at IoU 0.8 plus one FP") {
  // GT: one segment of class 1 covering pixels 0..9
  std::vector<uint16_t> gt_sem(12, 0), gt_inst(12, 0);
  for (int i = 0; i < 10; ++i) { gt_sem[i] = 1; gt_inst[i] = 1; }
  // pred: class-1 segment on pixels 0..7 (IoU 8/10), plus a spurious segment
  std::vector<uint16_t> p_sem(12, 0), p_inst(12, 0);
  for (int i = 0; i < 8; ++i) { p_sem[i] = 1; p_inst[i] = 1; }
  p_sem[10] = 1;
  p_inst[10] = 2;
  std::vector<uint8_t> thing{0, 1};
  auto rep = panoptic_quality(from_single(p_sem, p_inst, thing), from_single(gt_sem, gt_inst, thing));
  CHECK(rep.tp == 1);
  CHECK(rep.fp == 1);
  CHECK(rep.fn == 0);
  CHECK(rep.pq == doctest::Approx(0.8 / 1.5).epsilon(1e-9));
  CHECK(rep.sq == doctest::Approx(0.8));
  CHECK(rep.rq == doctest::Approx(1.0 / 1.5).epsilon(1e-9));
}

TEST_CASE("panoptic quality empty prediction") {
  std::vector<uint16_t> gt_sem{1, 1}, gt_inst{1, 1};
  std::vector<uint16_t> p_sem{0, 0}, p_inst{0, 0};
  std::vector<uint8_t> thing{0, 1};
  auto rep = panoptic_quality(from_single(p_sem, p_inst, thing), from_single(gt_sem, gt_inst, thing));
  CHECK(rep.pq == 0.0);
  CHECK(rep.rq == 0.0);
  CHECK(rep.sq == 1.0);  // vacuous
  CHECK(rep.sq_vacuous);
  CHECK(rep.fn == 1);
}

TEST_CASE("pq = sq*rq identity on randomized segment sets") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    int n_px = 60;
    std::vector<uint16_t> gt_sem(n_px), gt_inst(n_px), p_sem(n_px), p_inst(n_px);
    std::vector<uint8_t> thing{0, 0, 1, 1};
    for (int i = 0; i < n_px; ++i) {
      gt_sem[i] = static_cast<uint16_t>(rng.uniform_int(4));
      p_sem[i] = static_cast<uint16_t>(rng.uniform_int(4));
      gt_inst[i] = thing[gt_sem[i]] ? static_cast<uint16_t>(1 + rng.uniform_int(3)) : 0;
      p_inst[i] = thing[p_sem[i]] ? static_cast<uint16_t>(1 + rng.uniform_int(3)) : 0;
    }
    auto rep = panoptic_quality(from_single(p_sem, p_inst, thing), from_single(gt_sem, gt_inst, thing));
    CHECK(std::fabs(rep.pq - rep.sq * rep.rq) < 1e-9);
    CHECK(rep.pq >= 0.0);
    CHECK(rep.pq <= 1.0);
    CHECK(rep.sq <= 1.0);
    CHECK(rep.rq <= 1.0);
  }
}

TEST_CASE("segment sets must partition pixels") {
  SegmentSet s;
  s.segments.push_back({1, 1, {0, 1, 2}});
  s.segments.push_back({2, 1, {2, 3}});  // pixel 2 twice
  CHECK_THROWS(s.validate_partition());
}
