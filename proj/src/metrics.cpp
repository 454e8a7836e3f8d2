#include "panfield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace panfield::metrics {

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (n > m) fail(strf("hungarian: capacity error, %d rows > %d columns", n, m));
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m) fail_domain("hungarian: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) fail_domain("hungarian: non-finite cost entry");
  }

  const double inf = std::numeric_limits<double>::infinity();
  // potentials over rows/columns; p[j] = row matched to column j (1-based)
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = 0;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) { minv[j] = cur; way[j] = j0; }
        if (minv[j] < delta) { delta = minv[j]; j1 = j; }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) { u[p[j]] += delta; v[j] -= delta; }
        else minv[j] -= delta;
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  Assignment out;
  out.row_to_col.assign(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) out.row_to_col[p[j] - 1] = j - 1;
  out.total_cost = 0;
  for (int i = 0; i < n; ++i) out.total_cost += cost[i][out.row_to_col[i]];
  return out;
}

double psnr(const std::vector<float>& img, const std::vector<float>& ref) {
  if (img.size() != ref.size() || img.empty()) fail_domain("psnr: shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < img.size(); ++i) {
    double d = double(img[i]) - double(ref[i]);
    mse += d * d;
  }
  mse /= double(img.size());
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

IouReport miou(const std::vector<const uint16_t*>& pred_maps,
               const std::vector<const uint16_t*>& gt_maps,
               size_t pixels_per_map, int n_classes, int void_class) {
  if (pred_maps.size() != gt_maps.size()) fail_domain("miou: view count mismatch");
  std::vector<int64_t> inter(n_classes, 0), pred_n(n_classes, 0), gt_n(n_classes, 0);
  for (size_t v = 0; v < pred_maps.size(); ++v) {
    for (size_t px = 0; px < pixels_per_map; ++px) {
      int pc = pred_maps[v][px], gc = gt_maps[v][px];
      if (pc >= n_classes || gc >= n_classes)
        fail_domain(strf("miou: label %d >= n_classes %d", std::max(pc, gc), n_classes));
      ++pred_n[pc];
      ++gt_n[gc];
      if (pc == gc) ++inter[pc];
    }
  }
  IouReport rep;
  rep.class_iou.assign(n_classes, -1.0);
  rep.in_mean.assign(n_classes, 0);
  double sum = 0;
  int count = 0;
  for (int c = 0; c < n_classes; ++c) {
    int64_t uni = pred_n[c] + gt_n[c] - inter[c];
    if (uni > 0) rep.class_iou[c] = double(inter[c]) / double(uni);
    if (c != void_class && gt_n[c] > 0) {
      rep.in_mean[c] = 1;
      sum += rep.class_iou[c];
      ++count;
    }
  }
  rep.miou = count > 0 ? sum / count : 0.0;
  return rep;
}

SegmentSet SegmentSet::from_label_maps(const std::vector<const uint16_t*>& sem_maps,
                                       const std::vector<const uint16_t*>& inst_maps,
                                       size_t pixels_per_map,
                                       const std::vector<uint8_t>& thing_mask,
                                       int void_class,
                                       const std::vector<const uint16_t*>& gt_void_sem) {
  std::map<std::pair<int, int>, std::vector<int64_t>> acc;
  for (size_t v = 0; v < sem_maps.size(); ++v) {
    for (size_t px = 0; px < pixels_per_map; ++px) {
      int sc = sem_maps[v][px];
      if (sc == void_class) continue;
      if (!gt_void_sem.empty() && gt_void_sem[v][px] == void_class) continue;
      bool thing = sc < static_cast<int>(thing_mask.size()) && thing_mask[sc];
      int id = thing ? inst_maps[v][px] : 0;
      acc[{sc, id}].push_back(int64_t(v) * int64_t(pixels_per_map) + int64_t(px));
    }
  }
  SegmentSet out;
  for (auto& [key, pixels] : acc) {
    Segment s;
    s.sem_class = key.first;
    s.instance_id = key.second;
    s.pixels = std::move(pixels);
    out.segments.push_back(std::move(s));
  }
  return out;
}

void SegmentSet::validate_partition() const {
  std::vector<int64_t> all;
  for (const auto& s : segments) all.insert(all.end(), s.pixels.begin(), s.pixels.end());
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end())
    fail("SegmentSet: segments overlap, label maps must partition pixels");
}

namespace {

double segment_iou(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) ++i;
    else if (a[i] > b[j]) ++j;
    else { ++inter; ++i; ++j; }
  }
  size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

}  // namespace

PQReport panoptic_quality(const SegmentSet& pred, const SegmentSet& gt, double iou_threshold) {
  pred.validate_partition();
  gt.validate_partition();

  struct ClassAcc {
    int tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
  };
  std::map<int, ClassAcc> per_class;

  std::vector<char> gt_matched(gt.segments.size(), 0);
  std::vector<char> pred_matched(pred.segments.size(), 0);

  for (size_t pi = 0; pi < pred.segments.size(); ++pi) {
    const auto& ps = pred.segments[pi];
    for (size_t gi = 0; gi < gt.segments.size(); ++gi) {
      if (gt_matched[gi]) continue;
      const auto& gs = gt.segments[gi];
      if (gs.sem_class != ps.sem_class) continue;
      double iou = segment_iou(ps.pixels, gs.pixels);
      if (iou > iou_threshold) {
        gt_matched[gi] = 1;
        pred_matched[pi] = 1;
        auto& acc = per_class[ps.sem_class];
        ++acc.tp;
        acc.iou_sum += iou;
        break;  // IoU > 0.5 matches are unique
      }
    }
  }
  for (size_t pi = 0; pi < pred.segments.size(); ++pi)
    if (!pred_matched[pi]) ++per_class[pred.segments[pi].sem_class].fp;
  for (size_t gi = 0; gi < gt.segments.size(); ++gi)
    if (!gt_matched[gi]) ++per_class[gt.segments[gi].sem_class].fn;

  PQReport rep;
  for (auto& [cls, acc] : per_class) {
    rep.tp += acc.tp;
    rep.fp += acc.fp;
    rep.fn += acc.fn;
    rep.iou_sum += acc.iou_sum;
    PQReport::ClassRow row;
    row.sem_class = cls;
    row.tp = acc.tp;
    row.fp = acc.fp;
    row.fn = acc.fn;
    double denom = acc.tp + 0.5 * acc.fp + 0.5 * acc.fn;
    row.pq = denom > 0 ? acc.iou_sum / denom : 0.0;
    row.sq = acc.tp > 0 ? acc.iou_sum / acc.tp : 1.0;
    row.rq = denom > 0 ? acc.tp / denom : 0.0;
    rep.per_class.push_back(row);
  }
  double denom = rep.tp + 0.5 * rep.fp + 0.5 * rep.fn;
  rep.pq = denom > 0 ? rep.iou_sum / denom : 0.0;
  rep.rq = denom > 0 ? rep.tp / denom : 0.0;
  rep.sq_vacuous = rep.tp == 0;
  rep.sq = rep.tp > 0 ? rep.iou_sum / rep.tp : 1.0;
  return rep;
}

}  // namespace panfield::metrics
