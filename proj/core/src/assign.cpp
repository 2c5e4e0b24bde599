#include "crpn/assign.hpp"

#include <algorithm>
#include <cmath>

namespace crpn {

namespace {

bool center_in_region(const Box& anchor, const Box& gt, double sigma) {
  const double hw = sigma * gt.w / 2;
  const double hh = sigma * gt.h / 2;
  return std::abs(anchor.x - gt.x) <= hw && std::abs(anchor.y - gt.y) <= hh;
}

void fill_targets(AssignmentResult& r, const std::vector<Box>& anchors,
                  const std::vector<Box>& gts) {
  r.targets.assign(anchors.size(), Delta{});
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (r.labels[i] == Label::kPositive) {
      r.targets[i] = encode(anchors[i], gts[static_cast<std::size_t>(r.matched_gt[i])]);
    }
  }
}

}  // namespace

AssignmentResult assign_anchor_free(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                    const AssignmentConfig& cfg) {
  AssignmentResult r;
  r.labels.assign(anchors.size(), Label::kNegative);
  r.matched_gt.assign(anchors.size(), -1);
  if (gts.empty()) {
    r.targets.assign(anchors.size(), Delta{});
    return r;
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best_area = 0;
    int best_gt = -1;
    bool ignored = false;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (center_in_region(anchors[i], gts[g], cfg.sigma_ctr)) {
        const double area = gts[g].w * gts[g].h;
        if (best_gt < 0 || area < best_area) {
          best_gt = static_cast<int>(g);
          best_area = area;
        }
      } else if (center_in_region(anchors[i], gts[g], cfg.sigma_ign)) {
        ignored = true;
      }
    }
    if (best_gt >= 0) {
      r.labels[i] = Label::kPositive;
      r.matched_gt[i] = best_gt;
    } else if (ignored) {
      r.labels[i] = Label::kIgnore;
    }
  }
  fill_targets(r, anchors, gts);
  return r;
}

AssignmentResult assign_anchor_based(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                     const AssignmentConfig& cfg) {
  AssignmentResult r;
  r.labels.assign(anchors.size(), Label::kNegative);
  r.matched_gt.assign(anchors.size(), -1);
  if (gts.empty()) {
    r.targets.assign(anchors.size(), Delta{});
    return r;
  }
  std::vector<double> gt_best_iou(gts.size(), 0);
  std::vector<int> gt_best_anchor(gts.size(), -1);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best = 0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = static_cast<int>(i);
      }
    }
    if (best > cfg.iou_pos) {
      r.labels[i] = Label::kPositive;
      r.matched_gt[i] = best_gt;
    } else if (best >= cfg.iou_neg) {
      r.labels[i] = Label::kIgnore;
    }
  }
  // Every gt claims its best-overlap anchor so no object is left without a
  // positive sample; zero-overlap bests stay unclaimed.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best_anchor[g] >= 0 && gt_best_iou[g] > 0) {
      r.labels[static_cast<std::size_t>(gt_best_anchor[g])] = Label::kPositive;
      r.matched_gt[static_cast<std::size_t>(gt_best_anchor[g])] = static_cast<int>(g);
    }
  }
  fill_targets(r, anchors, gts);
  return r;
}

TargetStats compute_target_stats(const std::vector<Delta>& samples) {
  if (samples.size() < 2) {
    throw StatsError("compute_target_stats: need at least 2 samples, got " +
                     std::to_string(samples.size()));
  }
  const double n = static_cast<double>(samples.size());
  Delta mean;
  for (const auto& s : samples) {
    mean.dx += s.dx;
    mean.dy += s.dy;
    mean.dw += s.dw;
    mean.dh += s.dh;
  }
  mean.dx /= n;
  mean.dy /= n;
  mean.dw /= n;
  mean.dh /= n;
  Delta var;
  for (const auto& s : samples) {
    var.dx += (s.dx - mean.dx) * (s.dx - mean.dx);
    var.dy += (s.dy - mean.dy) * (s.dy - mean.dy);
    var.dw += (s.dw - mean.dw) * (s.dw - mean.dw);
    var.dh += (s.dh - mean.dh) * (s.dh - mean.dh);
  }
  TargetStats stats;
  stats.mean = mean;
  stats.std.dx = std::max(std::sqrt(var.dx / n), kStdFloor);
  stats.std.dy = std::max(std::sqrt(var.dy / n), kStdFloor);
  stats.std.dw = std::max(std::sqrt(var.dw / n), kStdFloor);
  stats.std.dh = std::max(std::sqrt(var.dh / n), kStdFloor);
  return stats;
}

Delta normalize_targets(const Delta& t, const TargetStats& stats) {
  return Delta{(t.dx - stats.mean.dx) / stats.std.dx, (t.dy - stats.mean.dy) / stats.std.dy,
               (t.dw - stats.mean.dw) / stats.std.dw, (t.dh - stats.mean.dh) / stats.std.dh};
}

Delta denormalize_prediction(const Delta& d, const TargetStats& stats) {
  return Delta{d.dx * stats.std.dx + stats.mean.dx, d.dy * stats.std.dy + stats.mean.dy,
               d.dw * stats.std.dw + stats.mean.dw, d.dh * stats.std.dh + stats.mean.dh};
}

}  // namespace crpn
