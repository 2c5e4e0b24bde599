#pragma once

#include <vector>

#include "crpn/box.hpp"

namespace crpn {

enum class Label : unsigned char { kNegative = 0, kPositive = 1, kIgnore = 2 };

enum class StageMetric { kAnchorFree, kAnchorBased };

struct AssignmentConfig {
  double sigma_ctr = 0.2;
  double sigma_ign = 0.5;
  double iou_pos = 0.7;
  double iou_neg = 0.3;
  StageMetric stage_metric = StageMetric::kAnchorFree;
};

// Per-anchor labels, matched ground-truth index (-1 when not positive) and
// the encoded regression target for positives. Targets come out raw; the
// training loop normalizes them against the stage statistics.
struct AssignmentResult {
  std::vector<Label> labels;
  std::vector<int> matched_gt;
  std::vector<Delta> targets;
};

// Componentwise mean / standard deviation of regression targets, used to
// normalize them per stage. Stds are floored at 1e-3.
struct TargetStats {
  Delta mean;
  Delta std{1, 1, 1, 1};
};

inline constexpr double kStdFloor = 1e-3;

// Stage-1 metric: an anchor is positive when its center lies inside the
// center region of some gt (gt scaled by sigma_ctr about its own center,
// boundary inclusive), matched to the smallest-area such gt. Anchors inside
// an ignore region (sigma_ign) but not positive are ignored.
AssignmentResult assign_anchor_free(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                    const AssignmentConfig& cfg);

// Later-stage metric: positive when max IoU over gts exceeds iou_pos
// (matched to the argmax), negative when below iou_neg, ignore between.
// Each gt additionally forces its best-overlap anchor positive (if that
// overlap is nonzero), processed in gt index order.
AssignmentResult assign_anchor_based(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                     const AssignmentConfig& cfg);

TargetStats compute_target_stats(const std::vector<Delta>& samples);

Delta normalize_targets(const Delta& t, const TargetStats& stats);
Delta denormalize_prediction(const Delta& d, const TargetStats& stats);

}  // namespace crpn
