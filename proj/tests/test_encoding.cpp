#include <doctest.h>

#include <cmath>

#include "panfield/encoding.hpp"

using namespace panfield;
using namespace panfield::encoding;

TEST_CASE("contract is identity inside the unit ball") {
  Vec3 x{0.3, 0, 0};
  Vec3 y = contract(x);
  CHECK(y.x == doctest::Approx(0.3));
  CHECK(y.y == 0.0);
  CHECK(y.z == 0.0);
}

TEST_CASE("contract formula outside") {
  Vec3 y = contract({2, 0, 0});
  CHECK(y.x == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(norm(contract({0, -3, 4})) == doctest::Approx(2.0 - 1.0 / 5.0).epsilon(1e-12));
}

TEST_CASE("contract maps far points near the boundary") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    Vec3 x = normalized(d) * 1e6;
    double n = norm(contract(x));
    CHECK(n >= 1.999999 - 1e-12);  // 2 - 1/r at r = 1e6
    CHECK(n < 2.0);
  }
}

TEST_CASE("contract monotone in radius and errors on non-finite") {
  Vec3 dir = normalized(Vec3{1, 2, -0.5});
  double prev = -1;
  for (double r : {0.1, 0.7, 1.0, 1.4, 3.0, 50.0}) {
    double n = norm(contract(dir * r));
    CHECK(n > prev);
    prev = n;
  }
  CHECK_THROWS(contract({std::nan(""), 0, 0}));
}

namespace {

GridPyramid<double> random_pyramid(Rng& rng, std::vector<int> res, int fdim) {
  GridPyramid<double> g = GridPyramid<double>::from_spec({res, fdim, 2.0});
  for (auto& level : g.levels)
    for (double& v : level.data) v = rng.uniform(-1.0, 1.0);
  return g;
}

}  // namespace

TEST_CASE("grid lookup at nodes and edge midpoints") {
  Rng rng(3);
  auto g = random_pyramid(rng, {4}, 2);
  const auto& level = g.levels[0];
  // node (1,2,3) lies at coords (-2 + i * 4/3)
  double step = 4.0 / 3.0;
  Vec3 at_node{-2 + 1 * step, -2 + 2 * step, -2 + 3 * step};
  double out[2];
  grid_lookup(g, at_node, out);
  size_t idx = level.node_index(1, 2, 3);
  CHECK(out[0] == doctest::Approx(level.data[idx * 2]).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(level.data[idx * 2 + 1]).epsilon(1e-12));

  // midpoint of the x-edge between (1,2,3) and (2,2,3)
  Vec3 mid{-2 + 1.5 * step, -2 + 2 * step, -2 + 3 * step};
  grid_lookup(g, mid, out);
  size_t idx2 = level.node_index(2, 2, 3);
  CHECK(out[0] == doctest::Approx(0.5 * (level.data[idx * 2] + level.data[idx2 * 2])).epsilon(1e-12));
}

TEST_CASE("grid lookup matches the 8-corner weight oracle") {
  Rng rng(17);
  auto g = random_pyramid(rng, {4, 8}, 2);
  for (int trial = 0; trial < 100; ++trial) {
    Vec3 q{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    double out[4];
    grid_lookup(g, q, out);
    int off = 0;
    for (const auto& level : g.levels) {
      // independent oracle: explicit corner enumeration with product weights
      double u[3] = {(q.x + 2) / 4 * (level.nx - 1), (q.y + 2) / 4 * (level.ny - 1),
                     (q.z + 2) / 4 * (level.nz - 1)};
      int i0[3];
      double fr[3];
      int dims[3] = {level.nx, level.ny, level.nz};
      for (int a = 0; a < 3; ++a) {
        double c = std::min(std::max(u[a], 0.0), double(dims[a] - 1));
        i0[a] = std::min(static_cast<int>(c), dims[a] - 2);
        fr[a] = c - i0[a];
      }
      for (int f = 0; f < 2; ++f) {
        double acc = 0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              double w = (dx ? fr[0] : 1 - fr[0]) * (dy ? fr[1] : 1 - fr[1]) * (dz ? fr[2] : 1 - fr[2]);
              acc += w * level.data[level.node_index(i0[0] + dx, i0[1] + dy, i0[2] + dz) * 2 + f];
            }
        CHECK(out[off + f] == doctest::Approx(acc).epsilon(1e-12));
      }
      off += 2;
    }
  }
}

TEST_CASE("grid lookup is linear in node features") {
  Rng rng(23);
  auto g1 = random_pyramid(rng, {4, 8}, 2);
  auto g2 = random_pyramid(rng, {4, 8}, 2);
  auto combo = g1;
  const double a = 1.7, b = -0.4;
  for (size_t l = 0; l < combo.levels.size(); ++l)
    for (size_t i = 0; i < combo.levels[l].data.size(); ++i)
      combo.levels[l].data[i] = a * g1.levels[l].data[i] + b * g2.levels[l].data[i];
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 q{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    double o1[4], o2[4], oc[4];
    grid_lookup(g1, q, o1);
    grid_lookup(g2, q, o2);
    grid_lookup(combo, q, oc);
    for (int k = 0; k < 4; ++k) CHECK(oc[k] == doctest::Approx(a * o1[k] + b * o2[k]).epsilon(1e-12));
  }
}

TEST_CASE("grid lookup gradients match finite differences") {
  Rng rng(31);
  auto g = random_pyramid(rng, {4}, 2);
  Vec3 q{0.31, -0.72, 1.13};
  // loss = dot(lookup, probe)
  double probe[2] = {0.8, -1.3};
  auto grads = GridPyramid<double>::from_spec({{4}, 2, 2.0});
  grid_lookup_backward(g, q, probe, grads);
  const double h = 1e-6;
  for (size_t i = 0; i < g.levels[0].data.size(); ++i) {
    double saved = g.levels[0].data[i];
    double out[2];
    g.levels[0].data[i] = saved + h;
    grid_lookup(g, q, out);
    double lp = out[0] * probe[0] + out[1] * probe[1];
    g.levels[0].data[i] = saved - h;
    grid_lookup(g, q, out);
    double lm = out[0] * probe[0] + out[1] * probe[1];
    g.levels[0].data[i] = saved;
    double fd = (lp - lm) / (2 * h);
    double ga = grads.levels[0].data[i];
    CHECK(std::fabs(ga - fd) <= 1e-6 * std::max(1.0, std::fabs(fd)));
  }
}

TEST_CASE("grid spatial jacobian matches finite differences") {
  Rng rng(37);
  auto g = random_pyramid(rng, {5}, 1);
  Vec3 q{0.21, 0.4, -0.9};
  std::vector<double> jac(g.out_dim() * 3);
  grid_lookup_jacobian(g, q, jac.data());
  const double h = 1e-7;
  for (int a = 0; a < 3; ++a) {
    Vec3 qp = q, qm = q;
    (a == 0 ? qp.x : a == 1 ? qp.y : qp.z) += h;
    (a == 0 ? qm.x : a == 1 ? qm.y : qm.z) -= h;
    double op[1], om[1];
    grid_lookup(g, qp, op);
    grid_lookup(g, qm, om);
    CHECK(jac[a] == doctest::Approx((op[0] - om[0]) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("positional encoding") {
  auto z = positional_encoding_vec({0, 0, 0}, 3);
  for (int k = 0; k < 3; ++k) {
    for (int a = 0; a < 3; ++a) {
      CHECK(z[k * 6 + a] == 0.0);
      CHECK(z[k * 6 + 3 + a] == 1.0);
    }
  }
  CHECK(positional_encoding_vec({1, 2, 3}, 0).empty());
  auto e = positional_encoding_vec({1, 0, 0}, 1);
  CHECK(std::fabs(e[0]) < 1e-12);        // sin(pi)
  CHECK(e[3] == doctest::Approx(-1.0));  // cos(pi)
}

TEST_CASE("spherical harmonics basics") {
  auto y0 = sh_encoding_vec({0.3, -0.8, 0.52}, 0);
  CHECK(y0.size() == 1);
  CHECK(y0[0] == doctest::Approx(0.28209479).epsilon(1e-8));

  auto y1 = sh_encoding_vec({0, 0, 1}, 1);
  CHECK(y1[1] == doctest::Approx(0.0));
  CHECK(y1[2] == doctest::Approx(0.48860251).epsilon(1e-8));
  CHECK(y1[3] == doctest::Approx(0.0));
}

TEST_CASE("spherical harmonics Monte Carlo orthogonality") {
  Rng rng(101);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    // uniform direction
    double z = rng.uniform(-1, 1);
    double phi = rng.uniform(0, 2 * M_PI);
    double r = std::sqrt(std::max(0.0, 1 - z * z));
    auto y = sh_encoding_vec({r * std::cos(phi), r * std::sin(phi), z}, 1);
    sum += y[2];  // Y_10
  }
  CHECK(std::fabs(sum / n) < 1e-2);
}

TEST_CASE("sh normalizes non-unit input") {
  auto a = sh_encoding_vec({0, 0, 2}, 2);
  auto b = sh_encoding_vec({0, 0, 1}, 2);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));
}
