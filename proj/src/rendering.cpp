#include "panfield/rendering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace panfield::rendering {

std::vector<double> sample_along_ray(double t_near, double t_far, int n, bool stratified, Rng& rng) {
  if (n < 1) fail_domain("sample_along_ray: need n >= 1");
  if (!(t_near < t_far)) fail_domain("sample_along_ray: need t_near < t_far");
  std::vector<double> ts(n);
  double dt = (t_far - t_near) / n;
  for (int i = 0; i < n; ++i) {
    double u = stratified ? rng.uniform() : 0.5;
    ts[i] = t_near + (i + u) * dt;
  }
  return ts;
}

void compute_weights(const std::vector<double>& sigmas, const std::vector<double>& ts,
                     double t_far, std::vector<double>& weights, double& t_resid) {
  const size_t n = ts.size();
  if (sigmas.size() != n) fail_domain("compute_weights: sigma/ts size mismatch");
  for (size_t i = 0; i + 1 < n; ++i)
    if (!(ts[i] < ts[i + 1])) fail_domain("compute_weights: ts must be strictly increasing");
  if (n > 0 && !(ts.back() <= t_far)) fail_domain("compute_weights: ts exceed t_far");
  for (double s : sigmas)
    if (s < 0) fail_domain("compute_weights: negative density");
  weights.resize(n);
  double trans = 1.0;
  for (size_t i = 0; i < n; ++i) {
    double dt = (i + 1 < n ? ts[i + 1] : t_far) - ts[i];
    double optical = sigmas[i] * dt;
    double alpha = -std::expm1(-optical);
    weights[i] = trans * alpha;
    trans *= std::exp(-optical);
  }
  t_resid = trans;
}

namespace {

void softmax_inplace(std::vector<double>& z) {
  double m = z.empty() ? 0.0 : *std::max_element(z.begin(), z.end());
  double sum = 0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

int argmax(const std::vector<double>& z, size_t from = 0) {
  int best = static_cast<int>(from);
  for (size_t i = from + 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace

PanopticPixel composite_pixel(const RaySampleSet& s, const std::vector<uint8_t>& thing_mask) {
  const size_t n = s.ts.size();
  if (s.weights.size() != n) fail_usage("composite_pixel: weights not computed");
  PanopticPixel px;
  size_t u_dim = n > 0 ? s.us[0].size() : thing_mask.size();
  size_t v_dim = n > 0 ? s.vs[0].size() : 1;
  std::vector<double> u_agg(u_dim, 0.0), v_agg(v_dim, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double w = s.weights[i];
    if (s.ts[i] <= 0) fail_domain("composite_pixel: t <= 0 reaching disparity");
    for (int k = 0; k < 3; ++k) px.C[k] += w * s.colors[i][k];
    for (size_t k = 0; k < u_dim; ++k) u_agg[k] += w * s.us[i][k];
    for (size_t k = 0; k < v_dim; ++k) v_agg[k] += w * s.vs[i][k];
    px.depth += w * s.ts[i];
    px.disparity += w / s.ts[i];
  }
  px.U = u_agg;
  px.V = v_agg;
  softmax_inplace(px.U);
  softmax_inplace(px.V);
  px.sem_label = argmax(px.U);
  bool thing = px.sem_label < static_cast<int>(thing_mask.size()) && thing_mask[px.sem_label];
  // channel 0 carries background/stuff supervision, not an instance identity:
  // thing pixels read their instance among channels >= 1
  px.inst_label = thing && px.V.size() > 1 ? argmax(px.V, 1) : -1;
  return px;
}

// ---------------------------------------------------------------------------
// batched forms

template <class T>
void batch_weights(const T* sigma, const double* ts, const double* t_far, int nr, int N,
                   T* weights, double* t_resid) {
  for (int r = 0; r < nr; ++r) {
    const double* t = ts + size_t(r) * N;
    const T* sg = sigma + size_t(r) * N;
    T* w = weights + size_t(r) * N;
    double trans = 1.0;
    for (int i = 0; i < N; ++i) {
      double dt = (i + 1 < N ? t[i + 1] : t_far[r]) - t[i];
      double optical = double(sg[i]) * dt;
      double alpha = -std::expm1(-optical);
      w[i] = static_cast<T>(trans * alpha);
      trans *= std::exp(-optical);
    }
    t_resid[r] = trans;
  }
}

template <class T>
void composite_from_trace(const field::FieldConfig& cfg, const field::EvalTrace<T>& trace,
                          const double* ts, const T* weights, int nr, int N,
                          CompositeResult<T>& out) {
  const int U = cfg.n_classes, V = cfg.n_instance_channels;
  const bool fine = trace.cascade == field::Cascade::kFine;
  out.n_rays = nr;
  out.n_samples = N;
  out.n_classes = U;
  out.n_instance_channels = V;
  std::vector<double> C(size_t(nr) * 3, 0.0);
  std::vector<double> u_agg(fine ? size_t(nr) * U : 0, 0.0);
  std::vector<double> v_agg(fine ? size_t(nr) * V : 0, 0.0);
  std::vector<double> depth(nr, 0.0), disp(nr, 0.0);

  for (size_t r = 0; r < trace.app_rows.size(); ++r) {
    int s = trace.app_rows[r];
    int ray = s / N;
    double w = double(weights[s]);
    for (int k = 0; k < 3; ++k) C[size_t(ray) * 3 + k] += w * double(trace.rgb[r * 3 + k]);
  }
  if (fine) {
    for (size_t r = 0; r < trace.und_rows.size(); ++r) {
      int s = trace.und_rows[r];
      int ray = s / N;
      double w = double(weights[s]);
      for (int k = 0; k < U; ++k)
        u_agg[size_t(ray) * U + k] += w * double(trace.sem.out[r * U + k]);
      for (int k = 0; k < V; ++k)
        v_agg[size_t(ray) * V + k] += w * double(trace.inst.out[r * V + k]);
    }
  }
  for (int ray = 0; ray < nr; ++ray) {
    for (int i = 0; i < N; ++i) {
      size_t s = size_t(ray) * N + i;
      double w = double(weights[s]);
      double t = ts[s];
      if (t <= 0) fail_domain("composite: t <= 0 reaching disparity");
      depth[ray] += w * t;
      disp[ray] += w / t;
    }
  }

  auto to_T = [](const std::vector<double>& src, std::vector<T>& dst) {
    dst.resize(src.size());
    for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
  };
  to_T(C, out.C);
  to_T(depth, out.depth);
  to_T(disp, out.disp);
  if (fine) {
    to_T(u_agg, out.u_agg);
    to_T(v_agg, out.v_agg);
    out.u_prob.resize(u_agg.size());
    out.v_prob.resize(v_agg.size());
    std::vector<double> z;
    for (int ray = 0; ray < nr; ++ray) {
      z.assign(u_agg.begin() + size_t(ray) * U, u_agg.begin() + size_t(ray + 1) * U);
      softmax_inplace(z);
      for (int k = 0; k < U; ++k) out.u_prob[size_t(ray) * U + k] = static_cast<T>(z[k]);
      z.assign(v_agg.begin() + size_t(ray) * V, v_agg.begin() + size_t(ray + 1) * V);
      softmax_inplace(z);
      for (int k = 0; k < V; ++k) out.v_prob[size_t(ray) * V + k] = static_cast<T>(z[k]);
    }
  } else {
    out.u_agg.clear();
    out.v_agg.clear();
    out.u_prob.clear();
    out.v_prob.clear();
  }
}

template <class T>
void RayGrads<T>::ensure(int nr, int N, int U, int V, bool with_uv) {
  dC.assign(size_t(nr) * 3, T(0));
  ddisp.assign(nr, T(0));
  dsigma_direct.assign(size_t(nr) * N, T(0));
  if (with_uv) {
    du_agg.assign(size_t(nr) * U, T(0));
    dv_agg.assign(size_t(nr) * V, T(0));
  } else {
    du_agg.clear();
    dv_agg.clear();
  }
}

template <class T>
void composite_backward(const field::FieldConfig& cfg, const field::EvalTrace<T>& trace,
                        const double* ts, const double* t_far, const T* weights, int nr, int N,
                        const RayGrads<T>& rg, field::SampleGrads<T>& out) {
  const int U = cfg.n_classes, V = cfg.n_instance_channels;
  const bool fine = trace.cascade == field::Cascade::kFine;
  const size_t n = size_t(nr) * N;

  // inverse row maps
  std::vector<int> app_row_of(n, -1), und_row_of(n, -1);
  for (size_t r = 0; r < trace.app_rows.size(); ++r) app_row_of[trace.app_rows[r]] = int(r);
  for (size_t r = 0; r < trace.und_rows.size(); ++r) und_row_of[trace.und_rows[r]] = int(r);

  out.dsigma.assign(n, T(0));
  out.drgb.assign(trace.app_rows.size() * 3, T(0));
  if (fine) {
    out.du.assign(trace.und_rows.size() * size_t(U), T(0));
    out.dv.assign(trace.und_rows.size() * size_t(V), T(0));
  } else {
    out.du.clear();
    out.dv.clear();
  }

  std::vector<double> dw(n, 0.0);
  for (int ray = 0; ray < nr; ++ray) {
    for (int i = 0; i < N; ++i) {
      size_t s = size_t(ray) * N + i;
      double w = double(weights[s]);
      double acc = 0;
      int ar = app_row_of[s];
      if (ar >= 0 && !rg.dC.empty()) {
        for (int k = 0; k < 3; ++k) {
          double g = double(rg.dC[size_t(ray) * 3 + k]);
          acc += g * double(trace.rgb[size_t(ar) * 3 + k]);
          out.drgb[size_t(ar) * 3 + k] += static_cast<T>(w * g);
        }
      }
      int ur = und_row_of[s];
      if (fine && ur >= 0) {
        if (!rg.du_agg.empty()) {
          for (int k = 0; k < U; ++k) {
            double g = double(rg.du_agg[size_t(ray) * U + k]);
            acc += g * double(trace.sem.out[size_t(ur) * U + k]);
            out.du[size_t(ur) * U + k] += static_cast<T>(w * g);
          }
        }
        if (!rg.dv_agg.empty()) {
          for (int k = 0; k < V; ++k) {
            double g = double(rg.dv_agg[size_t(ray) * V + k]);
            acc += g * double(trace.inst.out[size_t(ur) * V + k]);
            out.dv[size_t(ur) * V + k] += static_cast<T>(w * g);
          }
        }
      }
      if (!rg.ddisp.empty()) acc += double(rg.ddisp[ray]) / ts[s];
      dw[s] = acc;
    }

    // chain rule through w_i = T_i (1 - exp(-sigma_i dt_i)):
    //   dsigma_k = dw_k T_k dt_k exp(-sigma_k dt_k) - dt_k sum_{i>k} dw_i w_i
    double suffix = 0.0;
    std::vector<double> dsig(N, 0.0);
    double trans = 1.0;
    std::vector<double> trans_at(N);
    std::vector<double> dt(N);
    const double* t = ts + size_t(ray) * N;
    const T* sg = trace.sigma.data() + size_t(ray) * N;
    for (int i = 0; i < N; ++i) {
      dt[i] = (i + 1 < N ? t[i + 1] : t_far[ray]) - t[i];
      trans_at[i] = trans;
      trans *= std::exp(-double(sg[i]) * dt[i]);
    }
    for (int i = N - 1; i >= 0; --i) {
      size_t s = size_t(ray) * N + i;
      double e = std::exp(-double(sg[i]) * dt[i]);
      dsig[i] = dw[s] * trans_at[i] * dt[i] * e - dt[i] * suffix;
      suffix += dw[s] * double(weights[s]);
      if (!rg.dsigma_direct.empty()) dsig[i] += double(rg.dsigma_direct[s]);
      out.dsigma[s] = static_cast<T>(dsig[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// full views

namespace {

struct ViewPlan {
  int width = 0, height = 0;
  int n_samples = 0;
};

// Shared per-chunk pixel loop used by both the learned-field and oracle
// renderers. eval(xs, ds, n_rays_in_chunk, ts, out arrays...) must fill
// sigma/rgb/u/v for every sample.
template <class Eval>
PanopticImage render_generic(const dataset::CameraModel& camera, const RenderConfig& config,
                             int n_classes, int n_instance_channels,
                             const std::vector<uint8_t>& thing_mask, const Eval& eval) {
  camera.validate();
  const int W = camera.width, H = camera.height, N = config.n_samples;
  if (N < 1) fail_domain("render_view: need at least one sample per ray");
  const size_t n_px = size_t(W) * H;

  PanopticImage img;
  img.width = W;
  img.height = H;
  img.n_classes = n_classes;
  img.n_instance_channels = n_instance_channels;
  img.color.assign(n_px * 3, 0.f);
  img.sem_prob.assign(n_px * n_classes, 0.f);
  img.inst_prob.assign(n_px * n_instance_channels, 0.f);
  img.depth.assign(n_px, 0.f);
  img.disparity.assign(n_px, 0.f);
  img.sem_label.assign(n_px, 0);
  img.inst_label.assign(n_px, 0);

  const size_t chunk = config.chunk < 1 ? n_px : size_t(config.chunk);
  Rng base(config.seed, 0x52454e44ull);

  parallel_chunks(n_px, chunk, config.n_threads > 0 ? config.n_threads : default_thread_count(),
                  [&](size_t, size_t begin, size_t end) {
    const size_t nr = end - begin;
    std::vector<Vec3> xs(nr * N), ds(nr * N);
    std::vector<double> ts(nr * N), tf(nr);
    for (size_t r = 0; r < nr; ++r) {
      size_t px = begin + r;
      double x = double(px % W) + 0.5, y = double(px / W) + 0.5;
      dataset::Ray ray = dataset::ray_for_pixel(camera, x, y);
      Rng ray_rng = base.fork(px);  // per-pixel stream keeps chunking irrelevant
      std::vector<double> t =
          sample_along_ray(camera.t_near, camera.t_far, N, config.stratified, ray_rng);
      tf[r] = camera.t_far;
      for (int i = 0; i < N; ++i) {
        ts[r * N + i] = t[i];
        xs[r * N + i] = ray.origin + ray.dir * t[i];
        ds[r * N + i] = ray.dir;
      }
    }
    std::vector<double> sigma(nr * N), rgb(nr * N * 3), u(nr * N * n_classes),
        v(nr * N * n_instance_channels), weights(nr * N), t_resid(nr);
    try {
      eval(xs.data(), ds.data(), nr, ts.data(), tf.data(), sigma, rgb, u, v, weights, t_resid);
    } catch (const std::exception& e) {
      fail(strf("%s [while rendering pixel chunk starting at (%zu, %zu)]", e.what(), begin % W,
                begin / W));
    }

    std::vector<double> z;
    for (size_t r = 0; r < nr; ++r) {
      size_t px = begin + r;
      double C[3] = {0, 0, 0}, depth = 0, disp = 0;
      std::vector<double> u_agg(n_classes, 0.0), v_agg(n_instance_channels, 0.0);
      for (int i = 0; i < N; ++i) {
        size_t s = r * N + i;
        double w = weights[s];
        for (int k = 0; k < 3; ++k) C[k] += w * rgb[s * 3 + k];
        for (int k = 0; k < n_classes; ++k) u_agg[k] += w * u[s * n_classes + k];
        for (int k = 0; k < n_instance_channels; ++k)
          v_agg[k] += w * v[s * n_instance_channels + k];
        depth += w * ts[s];
        disp += w / ts[s];
      }
      for (int k = 0; k < 3; ++k) img.color[px * 3 + k] = float(C[k]);
      img.depth[px] = float(depth);
      img.disparity[px] = float(disp);
      z = u_agg;
      softmax_inplace(z);
      int u_star = argmax(z);
      for (int k = 0; k < n_classes; ++k) img.sem_prob[px * n_classes + k] = float(z[k]);
      z = v_agg;
      softmax_inplace(z);
      for (int k = 0; k < n_instance_channels; ++k)
        img.inst_prob[px * n_instance_channels + k] = float(z[k]);
      img.sem_label[px] = static_cast<uint16_t>(u_star);
      bool thing = u_star < int(thing_mask.size()) && thing_mask[u_star];
      // instance channels start at 1; channel 0 is background supervision
      img.inst_label[px] =
          thing && n_instance_channels > 1 ? static_cast<uint16_t>(argmax(z, 1)) : 0;
    }
  });
  return img;
}

}  // namespace

template <class T>
PanopticImage render_view(const field::ParamStore<T>& store, const dataset::CameraModel& camera,
                          const RenderConfig& config, const std::vector<uint8_t>& thing_mask) {
  const field::FieldConfig& cfg = store.cfg;
  const int U = cfg.n_classes, V = cfg.n_instance_channels;
  return render_generic(
      camera, config, U, V, thing_mask,
      [&](const Vec3* xs, const Vec3* ds, size_t nr, const double* ts, const double* tf,
          std::vector<double>& sigma, std::vector<double>& rgb, std::vector<double>& u,
          std::vector<double>& v, std::vector<double>& weights, std::vector<double>& t_resid) {
        const int N = config.n_samples;
        const size_t n = nr * N;
        field::EvalTrace<T> trace;
        field::field_forward_geo(cfg, store.params, field::Cascade::kFine, xs, ds, n, trace);
        std::vector<T> w_T(n);
        batch_weights(trace.sigma.data(), ts, tf, int(nr), N, w_T.data(), t_resid.data());
        std::vector<uint8_t> mask(n);
        for (size_t i = 0; i < n; ++i)
          mask[i] = double(w_T[i]) > config.min_weight_eval ? 1 : 0;
        field::field_forward_shading(cfg, store.params, mask.data(), mask.data(), trace);
        std::fill(rgb.begin(), rgb.end(), 0.0);
        std::fill(u.begin(), u.end(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
        for (size_t i = 0; i < n; ++i) {
          sigma[i] = double(trace.sigma[i]);
          weights[i] = double(w_T[i]);
        }
        for (size_t r = 0; r < trace.app_rows.size(); ++r) {
          size_t s = trace.app_rows[r];
          for (int k = 0; k < 3; ++k) rgb[s * 3 + k] = double(trace.rgb[r * 3 + k]);
        }
        for (size_t r = 0; r < trace.und_rows.size(); ++r) {
          size_t s = trace.und_rows[r];
          for (int k = 0; k < U; ++k) u[s * U + k] = double(trace.sem.out[r * U + k]);
          for (int k = 0; k < V; ++k) v[s * V + k] = double(trace.inst.out[r * V + k]);
        }
      });
}

PanopticImage render_view_oracle(const OracleFieldFn& field_fn, int n_classes,
                                 int n_instance_channels, const dataset::CameraModel& camera,
                                 const RenderConfig& config, const std::vector<uint8_t>& thing_mask) {
  return render_generic(
      camera, config, n_classes, n_instance_channels, thing_mask,
      [&](const Vec3* xs, const Vec3* ds, size_t nr, const double* ts, const double* tf,
          std::vector<double>& sigma, std::vector<double>& rgb, std::vector<double>& u,
          std::vector<double>& v, std::vector<double>& weights, std::vector<double>& t_resid) {
        const int N = config.n_samples;
        const size_t n = nr * N;
        field_fn(xs, ds, n, sigma.data(), rgb.data(), u.data(), v.data());
        batch_weights(sigma.data(), ts, tf, int(nr), N, weights.data(), t_resid.data());
      });
}

// instantiations
template void batch_weights<float>(const float*, const double*, const double*, int, int, float*, double*);
template void batch_weights<double>(const double*, const double*, const double*, int, int, double*, double*);
template struct RayGrads<float>;
template struct RayGrads<double>;
template void composite_from_trace<float>(const field::FieldConfig&, const field::EvalTrace<float>&,
                                          const double*, const float*, int, int, CompositeResult<float>&);
template void composite_from_trace<double>(const field::FieldConfig&, const field::EvalTrace<double>&,
                                           const double*, const double*, int, int, CompositeResult<double>&);
template void composite_backward<float>(const field::FieldConfig&, const field::EvalTrace<float>&,
                                        const double*, const double*, const float*, int, int,
                                        const RayGrads<float>&, field::SampleGrads<float>&);
template void composite_backward<double>(const field::FieldConfig&, const field::EvalTrace<double>&,
                                         const double*, const double*, const double*, int, int,
                                         const RayGrads<double>&, field::SampleGrads<double>&);
template PanopticImage render_view<float>(const field::ParamStore<float>&, const dataset::CameraModel&,
                                          const RenderConfig&, const std::vector<uint8_t>&);
template PanopticImage render_view<double>(const field::ParamStore<double>&, const dataset::CameraModel&,
                                           const RenderConfig&, const std::vector<uint8_t>&);

}  // namespace panfield::rendering
