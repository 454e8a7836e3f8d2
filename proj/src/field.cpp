#include "panfield/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace panfield::field {

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "softplus") return Activation::kSoftplus;
  if (name == "tanh") return Activation::kTanh;
  fail_usage(strf("unknown activation '%s'", name.c_str()));
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

void FieldConfig::validate() const {
  if (enc.n_freq < 0) fail_domain("field config: n_freq must be >= 0");
  if (enc.sh_degree < 0 || enc.sh_degree > 4) fail_domain("field config: sh degree in 0..4");
  if (n_classes < 1 || n_instance_channels < 1) fail_domain("field config: U and V must be >= 1");
  if (geo_feat_dim < 1) fail_domain("field config: geo feature dim must be >= 1");
  for (const DecoderSpec* d : {&geo, &app, &sem, &inst, &coarse_geo, &coarse_app})
    if (d->hidden < 1 || d->depth < 1) fail_domain("field config: decoder width/depth must be >= 1");
  if (cascade && (coarse_levels < 1 || coarse_levels > geo_levels()))
    fail_domain("field config: coarse_levels outside pyramid");
}

// ---------------------------------------------------------------------------
// kernels

template <class T>
T softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <class T>
void apply_activation(Activation act, T* x, size_t n) {
  switch (act) {
    case Activation::kRelu:
      for (size_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Activation::kSoftplus:
      for (size_t i = 0; i < n; ++i) x[i] = softplus(x[i]);
      break;
    case Activation::kTanh:
      for (size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
      break;
  }
}

template <class T>
T activation_derivative_from_output(Activation act, T y) {
  switch (act) {
    case Activation::kRelu: return y > T(0) ? T(1) : T(0);
    case Activation::kSoftplus: return T(1) - std::exp(-y);
    case Activation::kTanh: return T(1) - y * y;
  }
  return T(0);
}

template <class T>
void linear_forward(const T* a, int n, int in_dim, const T* w, const T* b, int out_dim, T* out) {
  for (int i = 0; i < n; ++i) {
    T* orow = out + size_t(i) * out_dim;
    if (b) std::memcpy(orow, b, sizeof(T) * out_dim);
    else std::fill(orow, orow + out_dim, T(0));
    const T* arow = a + size_t(i) * in_dim;
    for (int k = 0; k < in_dim; ++k) {
      T av = arow[k];
      if (av == T(0)) continue;
      const T* wrow = w + size_t(k) * out_dim;
      for (int j = 0; j < out_dim; ++j) orow[j] += av * wrow[j];
    }
  }
}

namespace {

// gw += a^T dout, gb += colsum(dout), da = dout w^T (da may be null)
template <class T>
void linear_backward(const T* a, int n, int in_dim, const T* w, int out_dim, const T* dout,
                     T* gw, T* gb, T* da) {
  for (int i = 0; i < n; ++i) {
    const T* drow = dout + size_t(i) * out_dim;
    const T* arow = a + size_t(i) * in_dim;
    for (int k = 0; k < in_dim; ++k) {
      T av = arow[k];
      if (av != T(0)) {
        T* gwrow = gw + size_t(k) * out_dim;
        for (int j = 0; j < out_dim; ++j) gwrow[j] += av * drow[j];
      }
      if (da) {
        const T* wrow = w + size_t(k) * out_dim;
        T acc = T(0);
        for (int j = 0; j < out_dim; ++j) acc += drow[j] * wrow[j];
        da[size_t(i) * in_dim + k] = acc;
      }
    }
    for (int j = 0; j < out_dim; ++j) gb[j] += drow[j];
  }
}

template <class T>
void check_layer_finite(const T* x, size_t n, const char* decoder, int layer) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(double(x[i])))
      fail(strf("numeric fault: %s decoder layer %d produced a non-finite value", decoder, layer));
}

template <class T>
void mlp_forward(const MlpParams<T>& mlp, Activation act, int in_dim, int hidden, int out_dim,
                 int depth, MlpTrace<T>& t, const char* name) {
  int n = t.n;
  t.h.assign(depth, {});
  const T* cur = t.x.data();
  int cur_dim = in_dim;
  for (int l = 0; l < depth; ++l) {
    t.h[l].resize(size_t(n) * hidden);
    linear_forward(cur, n, cur_dim, mlp.w[l].data.data(), mlp.b[l].data.data(), hidden,
                   t.h[l].data());
    apply_activation(act, t.h[l].data(), t.h[l].size());
    check_layer_finite(t.h[l].data(), t.h[l].size(), name, l);
    cur = t.h[l].data();
    cur_dim = hidden;
  }
  t.out.resize(size_t(n) * out_dim);
  linear_forward(cur, n, cur_dim, mlp.w[depth].data.data(), mlp.b[depth].data.data(), out_dim,
                 t.out.data());
  check_layer_finite(t.out.data(), t.out.size(), name, depth);
}

template <class T>
void mlp_backward(const MlpParams<T>& mlp, Activation act, int in_dim, int hidden, int out_dim,
                  int depth, const MlpTrace<T>& t, const T* dout, MlpParams<T>& grads, T* dx) {
  int n = t.n;
  std::vector<T> dcur(dout, dout + size_t(n) * out_dim);
  for (int l = depth; l >= 0; --l) {
    int this_out = (l == depth) ? out_dim : hidden;
    int this_in = (l == 0) ? in_dim : hidden;
    const T* input = (l == 0) ? t.x.data() : t.h[l - 1].data();
    bool need_dinput = (l > 0) || (dx != nullptr);
    std::vector<T> dinput;
    T* dinput_ptr = nullptr;
    if (need_dinput) {
      if (l == 0) dinput_ptr = dx;
      else {
        dinput.resize(size_t(n) * this_in);
        dinput_ptr = dinput.data();
      }
    }
    linear_backward(input, n, this_in, mlp.w[l].data.data(), this_out, dcur.data(),
                    grads.w[l].data.data(), grads.b[l].data.data(), dinput_ptr);
    if (l > 0) {
      // through the activation of layer l-1
      const T* post = t.h[l - 1].data();
      for (size_t i = 0; i < dinput.size(); ++i)
        dinput[i] *= activation_derivative_from_output(act, post[i]);
      dcur = std::move(dinput);
    }
  }
}

template <class T>
MlpParams<T> make_mlp(int in_dim, int hidden, int out_dim, int depth) {
  MlpParams<T> m;
  m.w.resize(depth + 1);
  m.b.resize(depth + 1);
  for (int l = 0; l <= depth; ++l) {
    int i = (l == 0) ? in_dim : hidden;
    int o = (l == depth) ? out_dim : hidden;
    m.w[l].shape = {i, o};
    m.w[l].data.assign(size_t(i) * o, T(0));
    m.b[l].shape = {o};
    m.b[l].data.assign(o, T(0));
  }
  return m;
}

template <class T>
void xavier_init(MlpParams<T>& m, Rng rng) {
  for (size_t l = 0; l < m.w.size(); ++l) {
    int fan_in = m.w[l].shape[0], fan_out = m.w[l].shape[1];
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (T& v : m.w[l].data) v = static_cast<T>(rng.uniform(-a, a));
  }
}

struct MlpDims {
  int in, hidden, out, depth;
};

MlpDims mlp_dims(const FieldConfig& cfg, const char* which) {
  std::string w(which);
  if (w == "geo") return {cfg.geo_in(false), cfg.geo.hidden, cfg.geo_out(), cfg.geo.depth};
  if (w == "app") return {cfg.app_in(), cfg.app.hidden, 3, cfg.app.depth};
  if (w == "sem") return {cfg.und_in(), cfg.sem.hidden, cfg.n_classes, cfg.sem.depth};
  if (w == "inst") return {cfg.und_in(), cfg.inst.hidden, cfg.n_instance_channels, cfg.inst.depth};
  if (w == "coarse_geo") return {cfg.geo_in(true), cfg.coarse_geo.hidden, cfg.geo_out(), cfg.coarse_geo.depth};
  if (w == "coarse_app") return {cfg.app_in(), cfg.coarse_app.hidden, 3, cfg.coarse_app.depth};
  fail("mlp_dims: unknown decoder");
}

}  // namespace

// ---------------------------------------------------------------------------
// parameter store

template <class T>
FieldParams<T> make_zero_params(const FieldConfig& cfg) {
  FieldParams<T> p;
  p.geo_grid = encoding::GridPyramid<T>::from_spec(cfg.enc.geometric);
  p.und_grid = encoding::GridPyramid<T>::from_spec(cfg.enc.understanding);
  for (const char* name : {"geo", "app", "sem", "inst", "coarse_geo", "coarse_app"}) {
    MlpDims d = mlp_dims(cfg, name);
    MlpParams<T> m = make_mlp<T>(d.in, d.hidden, d.out, d.depth);
    std::string w(name);
    if (w == "geo") p.geo = std::move(m);
    else if (w == "app") p.app = std::move(m);
    else if (w == "sem") p.sem = std::move(m);
    else if (w == "inst") p.inst = std::move(m);
    else if (w == "coarse_geo") p.coarse_geo = std::move(m);
    else p.coarse_app = std::move(m);
  }
  return p;
}

template <class T>
void add_params(FieldParams<T>& into, const FieldParams<T>& from) {
  auto add_grid = [](encoding::GridPyramid<T>& a, const encoding::GridPyramid<T>& b) {
    for (size_t l = 0; l < a.levels.size(); ++l)
      for (size_t i = 0; i < a.levels[l].data.size(); ++i) a.levels[l].data[i] += b.levels[l].data[i];
  };
  auto add_mlp = [](MlpParams<T>& a, const MlpParams<T>& b) {
    for (size_t l = 0; l < a.w.size(); ++l) {
      for (size_t i = 0; i < a.w[l].data.size(); ++i) a.w[l].data[i] += b.w[l].data[i];
      for (size_t i = 0; i < a.b[l].data.size(); ++i) a.b[l].data[i] += b.b[l].data[i];
    }
  };
  add_grid(into.geo_grid, from.geo_grid);
  add_grid(into.und_grid, from.und_grid);
  add_mlp(into.geo, from.geo);
  add_mlp(into.app, from.app);
  add_mlp(into.sem, from.sem);
  add_mlp(into.inst, from.inst);
  add_mlp(into.coarse_geo, from.coarse_geo);
  add_mlp(into.coarse_app, from.coarse_app);
}

template <class T>
ParamStore<T> ParamStore<T>::init(const FieldConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore<T> s;
  s.cfg = cfg;
  s.params = make_zero_params<T>(cfg);
  s.grads = make_zero_params<T>(cfg);
  Rng r(seed);
  // grid features start small but nonzero so adjacency losses are smooth at init
  int stream = 0;
  auto init_grid = [&](encoding::GridPyramid<T>& g) {
    Rng gr = r.fork(0x60 + (++stream));
    for (auto& level : g.levels)
      for (T& v : level.data) v = static_cast<T>(gr.uniform(-0.05, 0.05));
  };
  init_grid(s.params.geo_grid);
  init_grid(s.params.und_grid);
  xavier_init(s.params.geo, r.fork(101));
  xavier_init(s.params.app, r.fork(102));
  xavier_init(s.params.sem, r.fork(103));
  xavier_init(s.params.inst, r.fork(104));
  xavier_init(s.params.coarse_geo, r.fork(105));
  xavier_init(s.params.coarse_app, r.fork(106));
  // transparent scenes at init: raw density bias -1
  s.params.geo.b.back().data[0] = T(-1);
  s.params.coarse_geo.b.back().data[0] = T(-1);
  return s;
}

namespace {

template <class T, class Fn>
void visit_groups(const FieldConfig& cfg, FieldParams<T>& p, FieldParams<T>& g, Fn&& fn) {
  for (size_t l = 0; l < p.geo_grid.levels.size(); ++l)
    fn(strf("grid.geo.l%zu", l), p.geo_grid.levels[l].data, g.geo_grid.levels[l].data);
  for (size_t l = 0; l < p.und_grid.levels.size(); ++l)
    fn(strf("grid.und.l%zu", l), p.und_grid.levels[l].data, g.und_grid.levels[l].data);
  auto mlp = [&](const char* name, MlpParams<T>& m, MlpParams<T>& mg) {
    for (size_t l = 0; l < m.w.size(); ++l) {
      fn(strf("mlp.%s.w%zu", name, l), m.w[l].data, mg.w[l].data);
      fn(strf("mlp.%s.b%zu", name, l), m.b[l].data, mg.b[l].data);
    }
  };
  mlp("geo", p.geo, g.geo);
  mlp("app", p.app, g.app);
  mlp("sem", p.sem, g.sem);
  mlp("inst", p.inst, g.inst);
  if (cfg.cascade) {
    mlp("coarse_geo", p.coarse_geo, g.coarse_geo);
    mlp("coarse_app", p.coarse_app, g.coarse_app);
  }
}

}  // namespace

template <class T>
std::vector<GroupRef<T>> ParamStore<T>::groups() {
  std::vector<GroupRef<T>> out;
  visit_groups(cfg, params, grads, [&](const std::string& name, std::vector<T>& p, std::vector<T>& g) {
    out.push_back({name, p.data(), g.data(), p.size()});
  });
  return out;
}

template <class T>
void ParamStore<T>::zero_grads() {
  visit_groups(cfg, params, grads, [&](const std::string&, std::vector<T>&, std::vector<T>& g) {
    std::fill(g.begin(), g.end(), T(0));
  });
}

template <class T>
void ParamStore<T>::check_finite() const {
  auto& self = const_cast<ParamStore<T>&>(*this);
  visit_groups(self.cfg, self.params, self.grads,
               [&](const std::string& name, std::vector<T>& p, std::vector<T>&) {
                 for (T v : p)
                   if (!std::isfinite(double(v))) fail(strf("parameter group %s is non-finite", name.c_str()));
               });
}

template <class T>
template <class U>
ParamStore<U> ParamStore<T>::cast() const {
  ParamStore<U> out;
  out.cfg = cfg;
  out.params = make_zero_params<U>(cfg);
  out.grads = make_zero_params<U>(cfg);
  auto& self = const_cast<ParamStore<T>&>(*this);
  auto src = self.groups();
  auto dst = out.groups();
  for (size_t i = 0; i < src.size(); ++i)
    for (size_t k = 0; k < src[i].size; ++k) dst[i].data[k] = static_cast<U>(src[i].data[k]);
  return out;
}

// ---------------------------------------------------------------------------
// forward

namespace {

template <class T>
void lookup_levels(const encoding::GridPyramid<T>& pyramid, int n_levels, const Vec3& xc, T* out) {
  int off = 0;
  for (int l = 0; l < n_levels; ++l) {
    const auto& level = pyramid.levels[l];
    encoding::CellWeights cw = encoding::cell_weights(level, xc);
    for (int f = 0; f < level.fdim; ++f) {
      double acc = 0;
      for (int c = 0; c < 8; ++c) acc += cw.w[c] * double(level.data[cw.idx[c] * level.fdim + f]);
      out[off + f] = static_cast<T>(acc);
    }
    off += level.fdim;
  }
}

template <class T>
void scatter_levels(encoding::GridPyramid<T>& grads, int n_levels, const Vec3& xc, const T* gout) {
  int off = 0;
  for (int l = 0; l < n_levels; ++l) {
    auto& level = grads.levels[l];
    encoding::CellWeights cw = encoding::cell_weights(level, xc);
    for (int c = 0; c < 8; ++c)
      for (int f = 0; f < level.fdim; ++f)
        level.data[cw.idx[c] * level.fdim + f] += static_cast<T>(cw.w[c] * double(gout[off + f]));
    off += level.fdim;
  }
}

}  // namespace

template <class T>
void field_forward_geo(const FieldConfig& cfg, const FieldParams<T>& params, Cascade cascade,
                       const Vec3* xs, const Vec3* ds, size_t n, EvalTrace<T>& trace) {
  const bool coarse = cascade == Cascade::kCoarse;
  const int n_levels = coarse ? cfg.coarse_levels : cfg.geo_levels();
  const int grid_dim = n_levels * cfg.enc.geometric.feature_dim;
  const int geo_in = grid_dim + cfg.pe_dim();
  const int geo_out = cfg.geo_out();
  const MlpParams<T>& geo_mlp = coarse ? params.coarse_geo : params.geo;
  const DecoderSpec& geo_spec = coarse ? cfg.coarse_geo : cfg.geo;

  trace.cascade = cascade;
  trace.n = static_cast<int>(n);
  trace.xc.resize(n);
  trace.dirs.assign(ds, ds + n);

  trace.geo.n = static_cast<int>(n);
  trace.geo.x.resize(n * geo_in);
  for (size_t i = 0; i < n; ++i) {
    trace.xc[i] = encoding::contract(xs[i]);
    T* row = trace.geo.x.data() + i * geo_in;
    lookup_levels(params.geo_grid, n_levels, trace.xc[i], row);
    encoding::positional_encoding(trace.xc[i], cfg.enc.n_freq, row + grid_dim);
  }
  mlp_forward(geo_mlp, cfg.act, geo_in, geo_spec.hidden, geo_out, geo_spec.depth, trace.geo,
              coarse ? "coarse geometry" : "geometry");

  trace.sigma.resize(n);
  for (size_t i = 0; i < n; ++i) trace.sigma[i] = softplus(trace.geo.out[i * geo_out]);
}

template <class T>
void field_forward_shading(const FieldConfig& cfg, const FieldParams<T>& params,
                           const uint8_t* app_mask, const uint8_t* und_mask,
                           EvalTrace<T>& trace) {
  const bool coarse = trace.cascade == Cascade::kCoarse;
  const size_t n = static_cast<size_t>(trace.n);
  const int n_levels = coarse ? cfg.coarse_levels : cfg.geo_levels();
  const int grid_dim = n_levels * cfg.enc.geometric.feature_dim;
  const int pe = cfg.pe_dim();
  const int geo_in = grid_dim + pe;
  const int geo_out = cfg.geo_out();
  const MlpParams<T>& app_mlp = coarse ? params.coarse_app : params.app;
  const DecoderSpec& app_spec = coarse ? cfg.coarse_app : cfg.app;
  const Vec3* ds = trace.dirs.data();

  // appearance on selected samples
  trace.app_rows.clear();
  for (size_t i = 0; i < n; ++i)
    if (!app_mask || app_mask[i]) trace.app_rows.push_back(static_cast<int>(i));
  const int n_app = static_cast<int>(trace.app_rows.size());
  const int app_in = cfg.app_in();
  trace.app.n = n_app;
  trace.app.x.resize(size_t(n_app) * app_in);
  for (int r = 0; r < n_app; ++r) {
    int s = trace.app_rows[r];
    T* row = trace.app.x.data() + size_t(r) * app_in;
    const T* geo_row = trace.geo.out.data() + size_t(s) * geo_out;
    for (int f = 0; f < cfg.geo_feat_dim; ++f) row[f] = geo_row[1 + f];
    encoding::sh_encoding(ds[s], cfg.enc.sh_degree, row + cfg.geo_feat_dim);
  }
  mlp_forward(app_mlp, cfg.act, app_in, app_spec.hidden, 3, app_spec.depth, trace.app,
              coarse ? "coarse appearance" : "appearance");
  trace.rgb.resize(size_t(n_app) * 3);
  for (size_t i = 0; i < trace.rgb.size(); ++i)
    trace.rgb[i] = T(1) / (T(1) + std::exp(-trace.app.out[i]));

  // understanding path: fine cascade only, view-independent by construction
  trace.und_rows.clear();
  if (!coarse) {
    for (size_t i = 0; i < n; ++i)
      if (!und_mask || und_mask[i]) trace.und_rows.push_back(static_cast<int>(i));
    const int n_und = static_cast<int>(trace.und_rows.size());
    const int und_in = cfg.und_in();
    const int fu = cfg.enc.understanding.feature_dim;
    trace.sem.n = n_und;
    trace.sem.x.resize(size_t(n_und) * und_in);
    for (int r = 0; r < n_und; ++r) {
      int s = trace.und_rows[r];
      T* row = trace.sem.x.data() + size_t(r) * und_in;
      lookup_levels(params.und_grid, 1, trace.xc[s], row);
      // reuse the positional encoding computed for the geometry input
      std::memcpy(row + fu, trace.geo.x.data() + size_t(s) * geo_in + grid_dim, sizeof(T) * pe);
    }
    trace.inst.n = n_und;
    trace.inst.x = trace.sem.x;
    mlp_forward(params.sem, cfg.act, und_in, cfg.sem.hidden, cfg.n_classes, cfg.sem.depth,
                trace.sem, "semantic");
    mlp_forward(params.inst, cfg.act, und_in, cfg.inst.hidden, cfg.n_instance_channels,
                cfg.inst.depth, trace.inst, "instance");
  } else {
    trace.sem = {};
    trace.inst = {};
  }
}

template <class T>
void field_forward(const FieldConfig& cfg, const FieldParams<T>& params, Cascade cascade,
                   const Vec3* xs, const Vec3* ds, size_t n,
                   const uint8_t* app_mask, const uint8_t* und_mask, EvalTrace<T>& trace) {
  field_forward_geo(cfg, params, cascade, xs, ds, n, trace);
  field_forward_shading(cfg, params, app_mask, und_mask, trace);
}

// ---------------------------------------------------------------------------
// backward

template <class T>
void field_backward(const FieldConfig& cfg, const FieldParams<T>& params,
                    const EvalTrace<T>& trace, const SampleGrads<T>& sg,
                    FieldParams<T>& grads) {
  const bool coarse = trace.cascade == Cascade::kCoarse;
  const int n = trace.n;
  const int n_levels = coarse ? cfg.coarse_levels : cfg.geo_levels();
  const int grid_dim = n_levels * cfg.enc.geometric.feature_dim;
  const int geo_in = grid_dim + cfg.pe_dim();
  const int geo_out = cfg.geo_out();
  const MlpParams<T>& geo_mlp = coarse ? params.coarse_geo : params.geo;
  const MlpParams<T>& app_mlp = coarse ? params.coarse_app : params.app;
  MlpParams<T>& geo_grads = coarse ? grads.coarse_geo : grads.geo;
  MlpParams<T>& app_grads = coarse ? grads.coarse_app : grads.app;
  const DecoderSpec& geo_spec = coarse ? cfg.coarse_geo : cfg.geo;
  const DecoderSpec& app_spec = coarse ? cfg.coarse_app : cfg.app;

  std::vector<T> dgeo_out(size_t(n) * geo_out, T(0));

  // appearance first: its input gradient feeds the geometry feature columns
  const int n_app = static_cast<int>(trace.app_rows.size());
  if (n_app > 0 && !sg.drgb.empty()) {
    const int app_in = cfg.app_in();
    std::vector<T> dapp_out(size_t(n_app) * 3);
    for (size_t i = 0; i < dapp_out.size(); ++i) {
      T c = trace.rgb[i];
      dapp_out[i] = sg.drgb[i] * c * (T(1) - c);  // through the sigmoid head
    }
    std::vector<T> dapp_x(size_t(n_app) * app_in);
    mlp_backward(app_mlp, cfg.act, app_in, app_spec.hidden, 3, app_spec.depth, trace.app,
                 dapp_out.data(), app_grads, dapp_x.data());
    for (int r = 0; r < n_app; ++r) {
      int s = trace.app_rows[r];
      for (int f = 0; f < cfg.geo_feat_dim; ++f)
        dgeo_out[size_t(s) * geo_out + 1 + f] += dapp_x[size_t(r) * app_in + f];
    }
  }
  if (!sg.dsigma.empty()) {
    for (int s = 0; s < n; ++s) {
      // softplus'(raw) recovered from the stored post-activation value
      T dsp = T(1) - std::exp(-trace.sigma[s]);
      dgeo_out[size_t(s) * geo_out] += sg.dsigma[s] * dsp;
    }
  }

  std::vector<T> dgeo_x(size_t(n) * geo_in);
  mlp_backward(geo_mlp, cfg.act, geo_in, geo_spec.hidden, geo_out, geo_spec.depth, trace.geo,
               dgeo_out.data(), geo_grads, dgeo_x.data());
  for (int s = 0; s < n; ++s)
    scatter_levels(grads.geo_grid, n_levels, trace.xc[s], dgeo_x.data() + size_t(s) * geo_in);

  if (!coarse && !trace.und_rows.empty()) {
    const int n_und = static_cast<int>(trace.und_rows.size());
    const int und_in = cfg.und_in();
    std::vector<T> dund_x(size_t(n_und) * und_in);
    if (!sg.du.empty()) {
      mlp_backward(params.sem, cfg.act, und_in, cfg.sem.hidden, cfg.n_classes, cfg.sem.depth,
                   trace.sem, sg.du.data(), grads.sem, dund_x.data());
      for (int r = 0; r < n_und; ++r)
        scatter_levels(grads.und_grid, 1, trace.xc[trace.und_rows[r]],
                       dund_x.data() + size_t(r) * und_in);
    }
    if (!sg.dv.empty()) {
      mlp_backward(params.inst, cfg.act, und_in, cfg.inst.hidden, cfg.n_instance_channels,
                   cfg.inst.depth, trace.inst, sg.dv.data(), grads.inst, dund_x.data());
      for (int r = 0; r < n_und; ++r)
        scatter_levels(grads.und_grid, 1, trace.xc[trace.und_rows[r]],
                       dund_x.data() + size_t(r) * und_in);
    }
  }
}

// ---------------------------------------------------------------------------
// spec-level wrappers

template <class T>
std::vector<FieldSample> field_eval_batch(const ParamStore<T>& store, const std::vector<Vec3>& xs,
                                          const std::vector<Vec3>& ds, Cascade cascade) {
  if (xs.size() != ds.size()) fail_domain("field_eval_batch: xs/ds size mismatch");
  for (const Vec3& d : ds)
    if (std::fabs(norm(d) - 1.0) > 1e-6) fail_domain("field_eval_batch: directions must be unit");
  EvalTrace<T> trace;
  field_forward(store.cfg, store.params, cascade, xs.data(), ds.data(), xs.size(), nullptr,
                nullptr, trace);
  std::vector<FieldSample> out(xs.size());
  const int U = store.cfg.n_classes, V = store.cfg.n_instance_channels;
  for (size_t i = 0; i < xs.size(); ++i) {
    out[i].sigma = double(trace.sigma[i]);
    for (int k = 0; k < 3; ++k) out[i].c[k] = double(trace.rgb[i * 3 + k]);
    if (cascade == Cascade::kFine) {
      out[i].u.resize(U);
      out[i].v.resize(V);
      for (int k = 0; k < U; ++k) out[i].u[k] = double(trace.sem.out[i * U + k]);
      for (int k = 0; k < V; ++k) out[i].v[k] = double(trace.inst.out[i * V + k]);
    }
  }
  return out;
}

template <class T>
FieldSample field_eval(const ParamStore<T>& store, const Vec3& x, const Vec3& d, Cascade cascade) {
  return field_eval_batch(store, {x}, {d}, cascade)[0];
}

template <class T>
std::pair<std::vector<FieldSample>, std::vector<FieldSample>> cascade_pair_eval(
    const ParamStore<T>& store, const std::vector<Vec3>& xs, const std::vector<Vec3>& ds) {
  if (!store.cfg.cascade) fail_usage("cascade_pair_eval: cascade branch not configured");
  // fine outputs are distillation teachers: callers must not seed gradients
  // through them (the trainer detaches them by construction)
  return {field_eval_batch(store, xs, ds, Cascade::kCoarse),
          field_eval_batch(store, xs, ds, Cascade::kFine)};
}

// ---------------------------------------------------------------------------
// instantiations

template float softplus<float>(float);
template double softplus<double>(double);
template void apply_activation<float>(Activation, float*, size_t);
template void apply_activation<double>(Activation, double*, size_t);
template float activation_derivative_from_output<float>(Activation, float);
template double activation_derivative_from_output<double>(Activation, double);
template void linear_forward<float>(const float*, int, int, const float*, const float*, int, float*);
template void linear_forward<double>(const double*, int, int, const double*, const double*, int, double*);

template struct ParamStore<float>;
template struct ParamStore<double>;
template ParamStore<double> ParamStore<float>::cast<double>() const;
template ParamStore<float> ParamStore<double>::cast<float>() const;
template ParamStore<float> ParamStore<float>::cast<float>() const;
template ParamStore<double> ParamStore<double>::cast<double>() const;

template FieldParams<float> make_zero_params<float>(const FieldConfig&);
template FieldParams<double> make_zero_params<double>(const FieldConfig&);
template void add_params<float>(FieldParams<float>&, const FieldParams<float>&);
template void add_params<double>(FieldParams<double>&, const FieldParams<double>&);

template void field_forward<float>(const FieldConfig&, const FieldParams<float>&, Cascade,
                                   const Vec3*, const Vec3*, size_t, const uint8_t*,
                                   const uint8_t*, EvalTrace<float>&);
template void field_forward<double>(const FieldConfig&, const FieldParams<double>&, Cascade,
                                    const Vec3*, const Vec3*, size_t, const uint8_t*,
                                    const uint8_t*, EvalTrace<double>&);
template void field_forward_geo<float>(const FieldConfig&, const FieldParams<float>&, Cascade,
                                       const Vec3*, const Vec3*, size_t, EvalTrace<float>&);
template void field_forward_geo<double>(const FieldConfig&, const FieldParams<double>&, Cascade,
                                        const Vec3*, const Vec3*, size_t, EvalTrace<double>&);
template void field_forward_shading<float>(const FieldConfig&, const FieldParams<float>&,
                                           const uint8_t*, const uint8_t*, EvalTrace<float>&);
template void field_forward_shading<double>(const FieldConfig&, const FieldParams<double>&,
                                            const uint8_t*, const uint8_t*, EvalTrace<double>&);
template void field_backward<float>(const FieldConfig&, const FieldParams<float>&,
                                    const EvalTrace<float>&, const SampleGrads<float>&,
                                    FieldParams<float>&);
template void field_backward<double>(const FieldConfig&, const FieldParams<double>&,
                                     const EvalTrace<double>&, const SampleGrads<double>&,
                                     FieldParams<double>&);

template FieldSample field_eval<float>(const ParamStore<float>&, const Vec3&, const Vec3&, Cascade);
template FieldSample field_eval<double>(const ParamStore<double>&, const Vec3&, const Vec3&, Cascade);
template std::vector<FieldSample> field_eval_batch<float>(const ParamStore<float>&,
                                                          const std::vector<Vec3>&,
                                                          const std::vector<Vec3>&, Cascade);
template std::vector<FieldSample> field_eval_batch<double>(const ParamStore<double>&,
                                                           const std::vector<Vec3>&,
                                                           const std::vector<Vec3>&, Cascade);
template std::pair<std::vector<FieldSample>, std::vector<FieldSample>> cascade_pair_eval<float>(
    const ParamStore<float>&, const std::vector<Vec3>&, const std::vector<Vec3>&);
template std::pair<std::vector<FieldSample>, std::vector<FieldSample>> cascade_pair_eval<double>(
    const ParamStore<double>&, const std::vector<Vec3>&, const std::vector<Vec3>&);

}  // namespace panfield::field

