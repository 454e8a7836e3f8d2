// Position/direction encodings: scene contraction, multi-resolution voxel
// grids with trilinear lookup, sinusoidal position encoding and real
// spherical harmonics for directions.
#pragma once

#include <cstdint>
#include <vector>

#include "panfield/common.hpp"

namespace panfield::encoding {

// Maps all of space into the open ball of radius 2: identity on the unit
// ball, (2 - 1/|x|) * x/|x| outside. Continuous, injective, monotone in
// radius. Throws on non-finite input.
Vec3 contract(const Vec3& x);

struct GridSpec {
  std::vector<int> resolutions;  // nodes per axis per level, strictly increasing
  int feature_dim = 2;
  double bound = 2.0;  // grid spans [-bound, bound]^3 in contracted coords
};

struct EncodingConfig {
  int n_freq = 2;     // positional encoding frequencies
  int sh_degree = 2;  // spherical harmonics degree, 0..4
  GridSpec geometric{{16, 32, 64, 128}, 2, 2.0};
  GridSpec understanding{{16}, 1, 2.0};
};

// One dense grid level. Dims are usually cubic; tests use degenerate 1-D
// shapes for the adjacency-based losses.
template <class T>
struct GridLevel {
  int nx = 0, ny = 0, nz = 0, fdim = 0;
  double bound = 2.0;
  std::vector<T> data;  // [(ix*ny + iy)*nz + iz]*fdim + f

  static GridLevel cube(int r, int fdim, double bound) {
    GridLevel g;
    g.nx = g.ny = g.nz = r;
    g.fdim = fdim;
    g.bound = bound;
    g.data.assign(size_t(r) * r * r * fdim, T(0));
    return g;
  }
  size_t n_nodes() const { return size_t(nx) * ny * nz; }
  size_t node_index(int ix, int iy, int iz) const {
    return (size_t(ix) * ny + iy) * nz + iz;
  }
};

template <class T>
struct GridPyramid {
  std::vector<GridLevel<T>> levels;
  int feature_dim() const { return levels.empty() ? 0 : levels[0].fdim; }
  int out_dim() const { return static_cast<int>(levels.size()) * feature_dim(); }

  static GridPyramid from_spec(const GridSpec& spec) {
    GridPyramid p;
    int prev = 0;
    for (int r : spec.resolutions) {
      if (r <= prev) fail_domain("GridPyramid: resolutions must be strictly increasing");
      prev = r;
      p.levels.push_back(GridLevel<T>::cube(r, spec.feature_dim, spec.bound));
    }
    return p;
  }
};

// The 8 enclosing nodes of a query point with trilinear weights. Out-of-domain
// queries clamp to the boundary.
struct CellWeights {
  size_t idx[8];
  double w[8];
};

template <class T>
CellWeights cell_weights(const GridLevel<T>& level, const Vec3& xc);

// Per-level trilinear interpolation, levels concatenated coarse-to-fine into
// out (pyramid.out_dim() values). Linear in node features.
template <class T>
void grid_lookup(const GridPyramid<T>& pyramid, const Vec3& xc, T* out);

// Scatters d(loss)/d(out) into node-feature gradients.
template <class T>
void grid_lookup_backward(const GridPyramid<T>& pyramid, const Vec3& xc, const T* gout,
                          GridPyramid<T>& grads);

// d(feature)/d(xc): out_dim x 3, row-major. Piecewise constant per cell.
template <class T>
void grid_lookup_jacobian(const GridPyramid<T>& pyramid, const Vec3& xc, double* jac);

// [sin(2^k pi x), cos(2^k pi x)] per coordinate, k = 0..n_freq-1.
// Layout: for k, for coord: sin; then for k, for coord: cos is interleaved as
// (sin_k0(xyz), cos_k0(xyz), sin_k1(xyz), cos_k1(xyz), ...). 6*n_freq values.
template <class T>
void positional_encoding(const Vec3& x, int n_freq, T* out);

inline int sh_dim(int degree) { return (degree + 1) * (degree + 1); }

// Real spherical harmonics basis up to degree 4 evaluated at a unit
// direction. Non-unit input is normalized.
template <class T>
void sh_encoding(const Vec3& d, int degree, T* out);

// convenience (allocating) forms used by tests and bindings
std::vector<double> positional_encoding_vec(const Vec3& x, int n_freq);
std::vector<double> sh_encoding_vec(const Vec3& d, int degree);

}  // namespace panfield::encoding
