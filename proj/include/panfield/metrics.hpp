// Evaluation metrics: PSNR, mIoU, scene-level panoptic quality with
// cross-view segment aggregation, and the minimum-cost assignment solver
// shared with instance lifting.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "panfield/common.hpp"

namespace panfield::metrics {

// ---------------------------------------------------------------------------
// linear assignment

struct Assignment {
  std::vector<int> row_to_col;  // injective, size n
  double total_cost = 0;
};

// Minimum-cost assignment of n rows to m>=n columns (Jonker-Volgenant style
// shortest augmenting paths, O(n^2 m)). Throws on n>m or non-finite entries.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

// ---------------------------------------------------------------------------
// image metrics

// 10*log10(1/MSE) over same-shape [0,1] images; MSE==0 is reported as the
// 99.0 dB sentinel.
double psnr(const std::vector<float>& img, const std::vector<float>& ref);

struct IouReport {
  double miou = 0;                 // mean over non-void classes present in GT
  std::vector<double> class_iou;   // per class; -1 when class absent in both
  std::vector<uint8_t> in_mean;    // 1 when the class entered the mean
};

// Aggregates intersection/union over all views. Labels must be < n_classes.
// Class `void_class` is reported but never enters the mean.
IouReport miou(const std::vector<const uint16_t*>& pred_maps,
               const std::vector<const uint16_t*>& gt_maps,
               size_t pixels_per_map, int n_classes, int void_class = 0);

// ---------------------------------------------------------------------------
// panoptic quality

// Scene segments pooled across views, keyed by (semantic class, instance id).
// Instance id 0 marks stuff segments. Void pixels are excluded when building
// from label maps.
struct SegmentSet {
  struct Segment {
    int sem_class = 0;
    int instance_id = 0;
    std::vector<int64_t> pixels;  // global pixel keys (view_index * pixels_per_view + offset), sorted
  };
  std::vector<Segment> segments;

  // Folds per-view (semantic, instance) label maps. gt_void_mask, when given,
  // removes pixels that are void in the ground truth from the set.
  static SegmentSet from_label_maps(const std::vector<const uint16_t*>& sem_maps,
                                    const std::vector<const uint16_t*>& inst_maps,
                                    size_t pixels_per_map,
                                    const std::vector<uint8_t>& thing_mask,
                                    int void_class = 0,
                                    const std::vector<const uint16_t*>& gt_void_sem = {});
  void validate_partition() const;  // throws if segments overlap
};

struct PQReport {
  double pq = 0, sq = 0, rq = 0;
  int tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
  bool sq_vacuous = false;  // no TPs; SQ reported as 1
  struct ClassRow {
    int sem_class = 0;
    double pq = 0, sq = 0, rq = 0;
    int tp = 0, fp = 0, fn = 0;
  };
  std::vector<ClassRow> per_class;
};

// Matches segments of equal semantic class at IoU > threshold (unique for
// threshold >= 0.5). PQ = sum(IoU)/(TP + FP/2 + FN/2), SQ = sum(IoU)/TP,
// RQ = TP/(TP + FP/2 + FN/2); PQ == SQ*RQ holds by construction.
PQReport panoptic_quality(const SegmentSet& pred, const SegmentSet& gt,
                          double iou_threshold = 0.5);

}  // namespace panfield::metrics
