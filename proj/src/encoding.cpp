#include "panfield/encoding.hpp"

#include <cmath>

namespace panfield::encoding {

Vec3 contract(const Vec3& x) {
  if (!finite(x)) fail_domain("contract: non-finite input");
  double r = norm(x);
  if (r <= 1.0) return x;
  return x * ((2.0 - 1.0 / r) / r);
}

namespace {

struct AxisWeights {
  int i0, i1;
  double w0, w1;
};

inline AxisWeights axis_weights(double x, int n, double bound) {
  if (n == 1) return {0, 0, 1.0, 0.0};
  double u = (x + bound) / (2.0 * bound) * (n - 1);
  u = clamp(u, 0.0, double(n - 1));
  int i0 = static_cast<int>(u);
  if (i0 > n - 2) i0 = n - 2;
  double f = u - i0;
  return {i0, i0 + 1, 1.0 - f, f};
}

}  // namespace

template <class T>
CellWeights cell_weights(const GridLevel<T>& level, const Vec3& xc) {
  AxisWeights ax = axis_weights(xc.x, level.nx, level.bound);
  AxisWeights ay = axis_weights(xc.y, level.ny, level.bound);
  AxisWeights az = axis_weights(xc.z, level.nz, level.bound);
  CellWeights cw;
  int c = 0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        int ix = dx ? ax.i1 : ax.i0;
        int iy = dy ? ay.i1 : ay.i0;
        int iz = dz ? az.i1 : az.i0;
        cw.idx[c] = level.node_index(ix, iy, iz);
        cw.w[c] = (dx ? ax.w1 : ax.w0) * (dy ? ay.w1 : ay.w0) * (dz ? az.w1 : az.w0);
        ++c;
      }
  return cw;
}

template <class T>
void grid_lookup(const GridPyramid<T>& pyramid, const Vec3& xc, T* out) {
  int off = 0;
  for (const auto& level : pyramid.levels) {
    CellWeights cw = cell_weights(level, xc);
    for (int f = 0; f < level.fdim; ++f) {
      double acc = 0;
      for (int c = 0; c < 8; ++c) acc += cw.w[c] * double(level.data[cw.idx[c] * level.fdim + f]);
      out[off + f] = static_cast<T>(acc);
    }
    off += level.fdim;
  }
}

template <class T>
void grid_lookup_backward(const GridPyramid<T>& pyramid, const Vec3& xc, const T* gout,
                          GridPyramid<T>& grads) {
  int off = 0;
  for (size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& level = pyramid.levels[l];
    auto& glevel = grads.levels[l];
    CellWeights cw = cell_weights(level, xc);
    for (int c = 0; c < 8; ++c) {
      for (int f = 0; f < level.fdim; ++f)
        glevel.data[cw.idx[c] * level.fdim + f] += static_cast<T>(cw.w[c] * double(gout[off + f]));
    }
    off += level.fdim;
  }
}

template <class T>
void grid_lookup_jacobian(const GridPyramid<T>& pyramid, const Vec3& xc, double* jac) {
  int out_dim = pyramid.out_dim();
  for (int i = 0; i < out_dim * 3; ++i) jac[i] = 0;
  int off = 0;
  for (const auto& level : pyramid.levels) {
    AxisWeights aw[3] = {axis_weights(xc.x, level.nx, level.bound),
                         axis_weights(xc.y, level.ny, level.bound),
                         axis_weights(xc.z, level.nz, level.bound)};
    int dims[3] = {level.nx, level.ny, level.nz};
    for (int axis = 0; axis < 3; ++axis) {
      if (dims[axis] == 1) continue;
      double scale = (dims[axis] - 1) / (2.0 * level.bound);
      // d(w)/d(x_axis): replace that axis' pair of weights by (-1, +1)*scale
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
          for (int dz = 0; dz < 2; ++dz) {
            int sel[3] = {dx, dy, dz};
            double w = 1.0;
            for (int a = 0; a < 3; ++a) {
              if (a == axis) w *= (sel[a] ? 1.0 : -1.0) * scale;
              else w *= sel[a] ? aw[a].w1 : aw[a].w0;
            }
            int ix = dx ? aw[0].i1 : aw[0].i0;
            int iy = dy ? aw[1].i1 : aw[1].i0;
            int iz = dz ? aw[2].i1 : aw[2].i0;
            size_t idx = level.node_index(ix, iy, iz);
            for (int f = 0; f < level.fdim; ++f)
              jac[(off + f) * 3 + axis] += w * double(level.data[idx * level.fdim + f]);
          }
    }
    off += level.fdim;
  }
}

template <class T>
void positional_encoding(const Vec3& x, int n_freq, T* out) {
  double coords[3] = {x.x, x.y, x.z};
  for (int k = 0; k < n_freq; ++k) {
    double scale = std::ldexp(M_PI, k);  // 2^k * pi
    for (int a = 0; a < 3; ++a) out[k * 6 + a] = static_cast<T>(std::sin(scale * coords[a]));
    for (int a = 0; a < 3; ++a) out[k * 6 + 3 + a] = static_cast<T>(std::cos(scale * coords[a]));
  }
}

template <class T>
void sh_encoding(const Vec3& d_in, int degree, T* out) {
  if (degree < 0 || degree > 4) fail_domain("sh_encoding: degree must be in 0..4");
  double n = norm(d_in);
  if (n == 0) fail_domain("sh_encoding: zero direction");
  Vec3 d = d_in / n;
  double x = d.x, y = d.y, z = d.z;
  double xx = x * x, yy = y * y, zz = z * z;
  int i = 0;
  out[i++] = T(0.28209479177387814);
  if (degree >= 1) {
    out[i++] = T(0.4886025119029199 * y);
    out[i++] = T(0.4886025119029199 * z);
    out[i++] = T(0.4886025119029199 * x);
  }
  if (degree >= 2) {
    out[i++] = T(1.0925484305920792 * x * y);
    out[i++] = T(1.0925484305920792 * y * z);
    out[i++] = T(0.31539156525252005 * (3.0 * zz - 1.0));
    out[i++] = T(1.0925484305920792 * x * z);
    out[i++] = T(0.5462742152960396 * (xx - yy));
  }
  if (degree >= 3) {
    out[i++] = T(0.5900435899266435 * y * (3.0 * xx - yy));
    out[i++] = T(2.890611442640554 * x * y * z);
    out[i++] = T(0.4570457994644658 * y * (5.0 * zz - 1.0));
    out[i++] = T(0.3731763325901154 * z * (5.0 * zz - 3.0));
    out[i++] = T(0.4570457994644658 * x * (5.0 * zz - 1.0));
    out[i++] = T(1.445305721320277 * z * (xx - yy));
    out[i++] = T(0.5900435899266435 * x * (xx - 3.0 * yy));
  }
  if (degree >= 4) {
    out[i++] = T(2.5033429417967046 * x * y * (xx - yy));
    out[i++] = T(1.7701307697799304 * y * z * (3.0 * xx - yy));
    out[i++] = T(0.9461746957575601 * x * y * (7.0 * zz - 1.0));
    out[i++] = T(0.6690465435572892 * y * z * (7.0 * zz - 3.0));
    out[i++] = T(0.10578554691520431 * (35.0 * zz * zz - 30.0 * zz + 3.0));
    out[i++] = T(0.6690465435572892 * x * z * (7.0 * zz - 3.0));
    out[i++] = T(0.47308734787878004 * (xx - yy) * (7.0 * zz - 1.0));
    out[i++] = T(1.7701307697799304 * x * z * (xx - 3.0 * yy));
    out[i++] = T(0.6258357354491761 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)));
  }
}

std::vector<double> positional_encoding_vec(const Vec3& x, int n_freq) {
  std::vector<double> out(size_t(6) * n_freq);
  positional_encoding(x, n_freq, out.data());
  return out;
}

std::vector<double> sh_encoding_vec(const Vec3& d, int degree) {
  std::vector<double> out(sh_dim(degree));
  sh_encoding(d, degree, out.data());
  return out;
}

// explicit instantiations
template CellWeights cell_weights<float>(const GridLevel<float>&, const Vec3&);
template CellWeights cell_weights<double>(const GridLevel<double>&, const Vec3&);
template void grid_lookup<float>(const GridPyramid<float>&, const Vec3&, float*);
template void grid_lookup<double>(const GridPyramid<double>&, const Vec3&, double*);
template void grid_lookup_backward<float>(const GridPyramid<float>&, const Vec3&, const float*, GridPyramid<float>&);
template void grid_lookup_backward<double>(const GridPyramid<double>&, const Vec3&, const double*, GridPyramid<double>&);
template void grid_lookup_jacobian<float>(const GridPyramid<float>&, const Vec3&, double*);
template void grid_lookup_jacobian<double>(const GridPyramid<double>&, const Vec3&, double*);
template void positional_encoding<float>(const Vec3&, int, float*);
template void positional_encoding<double>(const Vec3&, int, double*);
template void sh_encoding<float>(const Vec3&, int, float*);
template void sh_encoding<double>(const Vec3&, int, double*);

}  // namespace panfield::encoding
