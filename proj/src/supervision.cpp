#include "panfield/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace panfield::supervision {

// ---------------------------------------------------------------------------
// patches

PatchBatch sample_patches(const dataset::SceneDataset& ds, const std::vector<int>& frame_ids,
                          int patch_side, int n_patches, Rng& rng) {
  if (frame_ids.empty()) fail_usage("sample_patches: no frames to sample from");
  for (int f : frame_ids) {
    const auto& cam = ds.frames.at(f).camera;
    if (patch_side > cam.width || patch_side > cam.height)
      fail_domain(strf("sample_patches: patch side %d exceeds frame %d size %dx%d", patch_side, f,
                       cam.width, cam.height));
  }
  PatchBatch batch;
  batch.patch_side = patch_side;
  const size_t rays_per_patch = size_t(patch_side) * patch_side;
  batch.rays.reserve(rays_per_patch * n_patches);
  for (int p = 0; p < n_patches; ++p) {
    int frame = frame_ids[rng.uniform_int(static_cast<uint32_t>(frame_ids.size()))];
    const dataset::Frame& fr = ds.frames[frame];
    int max_x = fr.camera.width - patch_side;
    int max_y = fr.camera.height - patch_side;
    int x0 = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(max_x + 1)));
    int y0 = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(max_y + 1)));
    Patch patch{frame, x0, y0, patch_side, batch.rays.size()};
    batch.patches.push_back(patch);
    for (int dy = 0; dy < patch_side; ++dy) {
      for (int dx = 0; dx < patch_side; ++dx) {
        int px = x0 + dx, py = y0 + dy;
        uint32_t pix = uint32_t(py) * fr.camera.width + px;
        batch.rays.push_back(dataset::ray_for_pixel(fr.camera, px + 0.5, py + 0.5));
        batch.frame_of_ray.push_back(frame);
        batch.pixel_of_ray.push_back(pix);
        batch.t_near_of_ray.push_back(fr.camera.t_near);
        batch.t_far_of_ray.push_back(fr.camera.t_far);
        for (int c = 0; c < 3; ++c) batch.target_rgb.push_back(fr.color[pix * 3 + c]);
        batch.sem.push_back(fr.sem[pix]);
        batch.inst.push_back(fr.inst[pix]);
        batch.lambda.push_back(fr.conf[pix]);
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// clusters

std::vector<ClusterGroup> cluster_same_label(const PatchBatch& batch, int max_groups) {
  if (batch.rays.empty()) fail_usage("cluster_same_label: empty batch");
  std::vector<ClusterGroup> groups;
  const size_t rays_per_patch = size_t(batch.patch_side) * batch.patch_side;
  for (size_t p = 0; p < batch.patches.size(); ++p) {
    std::map<int, ClusterGroup> by_label;
    size_t begin = batch.patches[p].ray_offset;
    for (size_t r = begin; r < begin + rays_per_patch; ++r) {
      auto& g = by_label[batch.sem[r]];
      g.label = batch.sem[r];
      g.ray_indices.push_back(static_cast<int>(r));
    }
    for (auto& [label, g] : by_label)
      if (g.ray_indices.size() >= 2) groups.push_back(std::move(g));
  }
  if (max_groups > 0 && static_cast<int>(groups.size()) > max_groups) {
    std::stable_sort(groups.begin(), groups.end(), [](const ClusterGroup& a, const ClusterGroup& b) {
      if (a.ray_indices.size() != b.ray_indices.size())
        return a.ray_indices.size() > b.ray_indices.size();
      return a.label < b.label;
    });
    groups.resize(max_groups);
  }
  return groups;
}

// ---------------------------------------------------------------------------
// assignment

int InstanceAssignment::channel_for_local(int local_id) const {
  if (local_id < 0 || local_id >= static_cast<int>(local_to_channel.size()))
    fail(strf("instance assignment: frame %d has no mapping for local id %d", frame, local_id));
  return local_to_channel[local_id];
}

InstanceAssignment assign_instances(int frame, const std::vector<int>& local_ids,
                                    const std::vector<float>& v_prob, int n_channels) {
  if (local_ids.empty()) fail_usage("assign_instances: no thing pixels given");
  if (v_prob.size() != local_ids.size() * size_t(n_channels))
    fail_domain("assign_instances: v_prob shape mismatch");
  int n_ids = 0;
  for (int id : local_ids) {
    if (id < 0) fail_domain("assign_instances: negative local id");
    n_ids = std::max(n_ids, id + 1);
  }
  if (n_ids > n_channels - 1)
    fail(strf("assign_instances: capacity error, %d frame ids > %d global channels", n_ids,
              n_channels - 1));

  InstanceAssignment out;
  out.frame = frame;
  out.cost.assign(n_ids, std::vector<double>(n_channels - 1, 0.0));
  std::vector<int64_t> counts(n_ids, 0);
  for (size_t i = 0; i < local_ids.size(); ++i) {
    int j = local_ids[i];
    ++counts[j];
    for (int k = 1; k < n_channels; ++k) {
      double p = std::max(double(v_prob[i * n_channels + k]), 1e-12);
      out.cost[j][k - 1] += -std::log(p);
    }
  }
  for (int j = 0; j < n_ids; ++j) {
    if (counts[j] == 0)
      fail(strf("assign_instances: frame %d local id %d has no sampled pixels", frame, j));
    for (double& c : out.cost[j]) c /= double(counts[j]);
  }
  metrics::Assignment sol = metrics::hungarian(out.cost);
  out.local_to_channel.resize(n_ids);
  for (int j = 0; j < n_ids; ++j) out.local_to_channel[j] = sol.row_to_col[j] + 1;
  out.total_cost = sol.total_cost;
  return out;
}

// ---------------------------------------------------------------------------
// extractor

template <class T>
FeatureExtractor<T> FeatureExtractor<T>::identity() {
  FeatureExtractor<T> e;
  e.identity_ = true;
  return e;
}

template <class T>
FeatureExtractor<T> FeatureExtractor<T>::seeded_conv(uint64_t seed, int out_channels) {
  FeatureExtractor<T> e;
  e.identity_ = false;
  e.chans_ = {3, 16, 32, out_channels};
  Rng rng(seed, 0xfea7ull);
  for (int l = 0; l < 3; ++l) {
    int ic = e.chans_[l], oc = e.chans_[l + 1];
    double scale = std::sqrt(2.0 / (ic * 9.0));
    std::vector<T> w(size_t(oc) * ic * 9);
    for (T& v : w) v = static_cast<T>(rng.normal() * scale);
    e.weights_.push_back(std::move(w));
  }
  return e;
}

template <class T>
FeatureExtractor<T> FeatureExtractor<T>::create(const ExtractorConfig& cfg) {
  if (cfg.tag == "identity") return identity();
  if (cfg.tag == "seeded-random-conv") return seeded_conv(cfg.seed, cfg.channels);
  if (cfg.tag == "precomputed-file")
    fail_usage(
        "extractor 'precomputed-file' supplies observed-side features from feat/ files and cannot "
        "embed rendered patches; use 'seeded-random-conv' for training");
  fail_usage(strf("unknown extractor tag '%s'", cfg.tag.c_str()));
}

template <class T>
size_t FeatureExtractor<T>::out_dim(int side) const {
  if (identity_) return size_t(side) * side * 3;
  int s = side;
  for (int l = 0; l < 3; ++l) s = (s + 1) / 2;
  return size_t(chans_.back()) * s * s;
}

namespace {

// stride-2, pad-1, 3x3 convolution on channel-planar data
template <class T>
void conv_forward(const T* in, int ic, int is, const T* w, int oc, T* out) {
  int os = (is + 1) / 2;
  std::fill(out, out + size_t(oc) * os * os, T(0));
  for (int o = 0; o < oc; ++o) {
    for (int c = 0; c < ic; ++c) {
      const T* wk = w + (size_t(o) * ic + c) * 9;
      const T* inp = in + size_t(c) * is * is;
      T* outp = out + size_t(o) * os * os;
      for (int oy = 0; oy < os; ++oy) {
        for (int ox = 0; ox < os; ++ox) {
          T acc = T(0);
          for (int ky = 0; ky < 3; ++ky) {
            int iy = oy * 2 + ky - 1;
            if (iy < 0 || iy >= is) continue;
            for (int kx = 0; kx < 3; ++kx) {
              int ix = ox * 2 + kx - 1;
              if (ix < 0 || ix >= is) continue;
              acc += wk[ky * 3 + kx] * inp[iy * is + ix];
            }
          }
          outp[oy * os + ox] += acc;
        }
      }
    }
  }
}

template <class T>
void conv_backward_input(const T* dout, int oc, int os, const T* w, int ic, int is, T* din) {
  for (int o = 0; o < oc; ++o) {
    for (int c = 0; c < ic; ++c) {
      const T* wk = w + (size_t(o) * ic + c) * 9;
      const T* doutp = dout + size_t(o) * os * os;
      T* dinp = din + size_t(c) * is * is;
      for (int oy = 0; oy < os; ++oy) {
        for (int ox = 0; ox < os; ++ox) {
          T g = doutp[oy * os + ox];
          if (g == T(0)) continue;
          for (int ky = 0; ky < 3; ++ky) {
            int iy = oy * 2 + ky - 1;
            if (iy < 0 || iy >= is) continue;
            for (int kx = 0; kx < 3; ++kx) {
              int ix = ox * 2 + kx - 1;
              if (ix < 0 || ix >= is) continue;
              dinp[iy * is + ix] += wk[ky * 3 + kx] * g;
            }
          }
        }
      }
    }
  }
}

template <class T>
void interleaved_to_planar(const T* rgb, int side, T* planar) {
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < side * side; ++p) planar[c * side * side + p] = rgb[p * 3 + c];
}

}  // namespace

template <class T>
std::vector<T> FeatureExtractor<T>::forward(const T* rgb, int side, Trace* trace) const {
  if (side < min_patch())
    fail_domain(strf("extractor: patch side %d below receptive minimum %d", side, min_patch()));
  if (identity_) {
    if (trace) *trace = {};
    return std::vector<T>(rgb, rgb + size_t(side) * side * 3);
  }
  std::vector<T> cur(size_t(3) * side * side);
  interleaved_to_planar(rgb, side, cur.data());
  int s = side;
  if (trace) {
    trace->pre.clear();
    trace->sides.clear();
  }
  for (int l = 0; l < 3; ++l) {
    int os = (s + 1) / 2;
    std::vector<T> next(size_t(chans_[l + 1]) * os * os);
    conv_forward(cur.data(), chans_[l], s, weights_[l].data(), chans_[l + 1], next.data());
    if (trace) {
      trace->pre.push_back(next);  // pre-|x| activations
      trace->sides.push_back(os);
    }
    for (T& v : next) v = std::fabs(v);
    cur = std::move(next);
    s = os;
  }
  return cur;
}

template <class T>
void FeatureExtractor<T>::backward(const Trace& trace, const T* rgb, int side, const T* dfeat,
                                   double scale, T* drgb) const {
  if (identity_) {
    for (size_t i = 0; i < size_t(side) * side * 3; ++i)
      drgb[i] += static_cast<T>(scale * double(dfeat[i]));
    return;
  }
  int s3 = trace.sides[2];
  std::vector<T> dcur(dfeat, dfeat + size_t(chans_[3]) * s3 * s3);
  for (int l = 2; l >= 0; --l) {
    int os = trace.sides[l];
    int is = l == 0 ? side : trace.sides[l - 1];
    // through |x|
    const std::vector<T>& pre = trace.pre[l];
    for (size_t i = 0; i < dcur.size(); ++i) {
      T sgn = pre[i] > T(0) ? T(1) : (pre[i] < T(0) ? T(-1) : T(0));
      dcur[i] *= sgn;
    }
    std::vector<T> din(size_t(chans_[l]) * is * is, T(0));
    conv_backward_input(dcur.data(), chans_[l + 1], os, weights_[l].data(), chans_[l], is,
                        din.data());
    dcur = std::move(din);
  }
  // planar back to interleaved
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < side * side; ++p)
      drgb[p * 3 + c] += static_cast<T>(scale * double(dcur[size_t(c) * side * side + p]));
}

// ---------------------------------------------------------------------------
// losses

template <class T>
double charbonnier_loss(const T* a, const T* b, size_t n, double eps) {
  if (n == 0) fail_domain("charbonnier_loss: empty input");
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double d = double(a[i]) - double(b[i]);
    acc += std::sqrt(d * d + eps * eps);
  }
  return acc / double(n);
}

template <class T>
void charbonnier_backward(const T* a, const T* b, size_t n, double eps, double scale, T* da) {
  for (size_t i = 0; i < n; ++i) {
    double d = double(a[i]) - double(b[i]);
    da[i] += static_cast<T>(scale * d / (std::sqrt(d * d + eps * eps) * double(n)));
  }
}

template <class T>
double weighted_ce_loss(const T* prob, int dim, const uint16_t* targets, const float* lambda,
                        size_t n) {
  if (n == 0) fail_domain("weighted cross-entropy: zero rays");
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double p = std::max(double(prob[i * dim + targets[i]]), 1e-300);
    acc += double(lambda ? lambda[i] : 1.0f) * -std::log(p);
  }
  return acc / double(n);
}

template <class T>
void weighted_ce_backward(const T* prob, int dim, const uint16_t* targets, const float* lambda,
                          size_t n, double scale, T* dagg) {
  // d(-log softmax(z)_t)/dz_k = p_k - [k==t]
  for (size_t i = 0; i < n; ++i) {
    double w = scale * double(lambda ? lambda[i] : 1.0f) / double(n);
    for (int k = 0; k < dim; ++k) {
      double g = w * (double(prob[i * dim + k]) - (k == targets[i] ? 1.0 : 0.0));
      dagg[i * dim + k] += static_cast<T>(g);
    }
  }
}

template <class T>
double semantic_loss(const T* u_prob, int n_classes, const uint16_t* targets, const float* lambda,
                     size_t n_rays) {
  return weighted_ce_loss(u_prob, n_classes, targets, lambda, n_rays);
}

std::vector<uint16_t> instance_targets(const PatchBatch& batch, const dataset::SceneDataset& ds,
                                       const std::vector<InstanceAssignment>& per_frame) {
  std::vector<uint16_t> targets(batch.n_rays(), 0);
  for (size_t r = 0; r < batch.n_rays(); ++r) {
    if (batch.inst[r] == dataset::kNoInstance) continue;  // stuff/void supervise channel 0
    int local = batch.inst[r] - 1;
    const InstanceAssignment& as = per_frame.at(batch.frame_of_ray[r]);
    if (as.frame < 0)
      fail(strf("instance_loss: frame %d has no assignment", batch.frame_of_ray[r]));
    targets[r] = static_cast<uint16_t>(as.channel_for_local(local));
  }
  (void)ds;
  return targets;
}

template <class T>
double instance_loss(const T* v_prob, int n_channels, const uint16_t* targets, const float* lambda,
                     size_t n_rays) {
  return weighted_ce_loss(v_prob, n_channels, targets, lambda, n_rays);
}

template <class T>
double seg_consistency_loss(const std::vector<ClusterGroup>& groups, const T* u_prob,
                            int n_classes, const float* lambda) {
  size_t total = 0;
  for (const auto& g : groups) total += g.ray_indices.size();
  if (total == 0) return 0.0;  // no groups: no-op
  double acc = 0;
  for (const auto& g : groups) {
    for (int r : g.ray_indices) {
      double p = std::max(double(u_prob[size_t(r) * n_classes + g.label]), 1e-300);
      acc += double(lambda ? lambda[r] : 1.0f) * -std::log(p);
    }
  }
  return acc / double(total);
}

template <class T>
void seg_consistency_backward(const std::vector<ClusterGroup>& groups, const T* u_prob,
                              int n_classes, const float* lambda, double scale, T* du_agg) {
  size_t total = 0;
  for (const auto& g : groups) total += g.ray_indices.size();
  if (total == 0) return;
  for (const auto& g : groups) {
    for (int r : g.ray_indices) {
      double w = scale * double(lambda ? lambda[r] : 1.0f) / double(total);
      for (int k = 0; k < n_classes; ++k) {
        double gk = w * (double(u_prob[size_t(r) * n_classes + k]) - (k == g.label ? 1.0 : 0.0));
        du_agg[size_t(r) * n_classes + k] += static_cast<T>(gk);
      }
    }
  }
}

template <class T>
double perceptual_loss(const FeatureExtractor<T>& extractor, const T* rendered, const T* observed,
                       int n_patches, int side) {
  if (n_patches == 0) return 0.0;
  const size_t patch_elems = size_t(side) * side * 3;
  double acc = 0;
  for (int p = 0; p < n_patches; ++p) {
    std::vector<T> fa = extractor.forward(rendered + p * patch_elems, side);
    std::vector<T> fb = extractor.forward(observed + p * patch_elems, side);
    double norm2 = 0;
    for (size_t i = 0; i < fa.size(); ++i) {
      double d = double(fa[i]) - double(fb[i]);
      norm2 += d * d;
    }
    acc += std::sqrt(norm2);
  }
  return acc / double(n_patches);
}

template <class T>
double perceptual_loss_backward(const FeatureExtractor<T>& extractor, const T* rendered,
                                const T* observed, int n_patches, int side, double scale,
                                T* drendered) {
  if (n_patches == 0) return 0.0;
  const size_t patch_elems = size_t(side) * side * 3;
  double acc = 0;
  for (int p = 0; p < n_patches; ++p) {
    typename FeatureExtractor<T>::Trace trace;
    std::vector<T> fa = extractor.forward(rendered + p * patch_elems, side, &trace);
    std::vector<T> fb = extractor.forward(observed + p * patch_elems, side);
    double norm2 = 0;
    for (size_t i = 0; i < fa.size(); ++i) {
      double d = double(fa[i]) - double(fb[i]);
      norm2 += d * d;
    }
    double nrm = std::sqrt(norm2);
    acc += nrm;
    if (nrm < 1e-15) continue;  // flat at identical features
    std::vector<T> dfeat(fa.size());
    for (size_t i = 0; i < fa.size(); ++i)
      dfeat[i] = static_cast<T>((double(fa[i]) - double(fb[i])) / nrm);
    extractor.backward(trace, rendered + p * patch_elems, side, dfeat.data(),
                       scale / double(n_patches), drendered + p * patch_elems);
  }
  return acc / double(n_patches);
}

template <class T>
double tv_loss(const encoding::GridPyramid<T>& grid) {
  double acc = 0;
  size_t pairs = 0;
  for (const auto& level : grid.levels) {
    const int f = level.fdim;
    auto pair_norm = [&](size_t ia, size_t ib) {
      double n2 = 0;
      for (int k = 0; k < f; ++k) {
        double d = double(level.data[ia * f + k]) - double(level.data[ib * f + k]);
        n2 += d * d;
      }
      return std::sqrt(n2);
    };
    for (int x = 0; x < level.nx; ++x)
      for (int y = 0; y < level.ny; ++y)
        for (int z = 0; z < level.nz; ++z) {
          size_t i = level.node_index(x, y, z);
          if (x + 1 < level.nx) { acc += pair_norm(i, level.node_index(x + 1, y, z)); ++pairs; }
          if (y + 1 < level.ny) { acc += pair_norm(i, level.node_index(x, y + 1, z)); ++pairs; }
          if (z + 1 < level.nz) { acc += pair_norm(i, level.node_index(x, y, z + 1)); ++pairs; }
        }
  }
  return pairs == 0 ? 0.0 : acc / double(pairs);
}

template <class T>
void tv_backward(const encoding::GridPyramid<T>& grid, double scale,
                 encoding::GridPyramid<T>& grads) {
  size_t pairs = 0;
  for (const auto& level : grid.levels) {
    pairs += size_t(std::max(level.nx - 1, 0)) * level.ny * level.nz;
    pairs += size_t(level.nx) * std::max(level.ny - 1, 0) * level.nz;
    pairs += size_t(level.nx) * level.ny * std::max(level.nz - 1, 0);
  }
  if (pairs == 0) return;
  const double s = scale / double(pairs);
  for (size_t l = 0; l < grid.levels.size(); ++l) {
    const auto& level = grid.levels[l];
    auto& glevel = grads.levels[l];
    const int f = level.fdim;
    auto add_pair = [&](size_t ia, size_t ib) {
      double n2 = 0;
      for (int k = 0; k < f; ++k) {
        double d = double(level.data[ia * f + k]) - double(level.data[ib * f + k]);
        n2 += d * d;
      }
      double nrm = std::sqrt(n2);
      if (nrm < 1e-15) return;  // subgradient 0 at equal features
      for (int k = 0; k < f; ++k) {
        double g = s * (double(level.data[ia * f + k]) - double(level.data[ib * f + k])) / nrm;
        glevel.data[ia * f + k] += static_cast<T>(g);
        glevel.data[ib * f + k] -= static_cast<T>(g);
      }
    };
    for (int x = 0; x < level.nx; ++x)
      for (int y = 0; y < level.ny; ++y)
        for (int z = 0; z < level.nz; ++z) {
          size_t i = level.node_index(x, y, z);
          if (x + 1 < level.nx) add_pair(i, level.node_index(x + 1, y, z));
          if (y + 1 < level.ny) add_pair(i, level.node_index(x, y + 1, z));
          if (z + 1 < level.nz) add_pair(i, level.node_index(x, y, z + 1));
        }
  }
}

template <class T>
double disparity_loss(const T* weights, const double* ts, int n_rays, int n_samples) {
  if (n_rays == 0) fail_domain("disparity_loss: zero rays");
  double acc = 0;
  for (int r = 0; r < n_rays; ++r) {
    for (int i = 0; i < n_samples; ++i) {
      size_t s = size_t(r) * n_samples + i;
      if (ts[s] <= 0) fail_domain("disparity_loss: t <= 0");
      acc += double(weights[s]) / ts[s];
    }
  }
  return acc / double(n_rays);
}

// ---------------------------------------------------------------------------
// instantiations

template class FeatureExtractor<float>;
template class FeatureExtractor<double>;

#define PANFIELD_INSTANTIATE_LOSSES(T)                                                            \
  template double charbonnier_loss<T>(const T*, const T*, size_t, double);                        \
  template void charbonnier_backward<T>(const T*, const T*, size_t, double, double, T*);          \
  template double weighted_ce_loss<T>(const T*, int, const uint16_t*, const float*, size_t);      \
  template void weighted_ce_backward<T>(const T*, int, const uint16_t*, const float*, size_t,     \
                                        double, T*);                                              \
  template double semantic_loss<T>(const T*, int, const uint16_t*, const float*, size_t);         \
  template double instance_loss<T>(const T*, int, const uint16_t*, const float*, size_t);         \
  template double seg_consistency_loss<T>(const std::vector<ClusterGroup>&, const T*, int,        \
                                          const float*);                                          \
  template void seg_consistency_backward<T>(const std::vector<ClusterGroup>&, const T*, int,      \
                                            const float*, double, T*);                            \
  template double perceptual_loss<T>(const FeatureExtractor<T>&, const T*, const T*, int, int);   \
  template double perceptual_loss_backward<T>(const FeatureExtractor<T>&, const T*, const T*,     \
                                              int, int, double, T*);                              \
  template double tv_loss<T>(const encoding::GridPyramid<T>&);                                    \
  template void tv_backward<T>(const encoding::GridPyramid<T>&, double,                           \
                               encoding::GridPyramid<T>&);                                        \
  template double disparity_loss<T>(const T*, const double*, int, int);

PANFIELD_INSTANTIATE_LOSSES(float)
PANFIELD_INSTANTIATE_LOSSES(double)

}  // namespace panfield::supervision
