#include "crpn/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace crpn {

namespace {

// Proposal order within an image: score descending, then box fields, so equal
// scores cannot make results depend on caller ordering.
std::vector<int> ranked(const std::vector<ScoredBox>& props) {
  std::vector<int> idx(props.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const auto& pa = props[static_cast<std::size_t>(a)];
    const auto& pb = props[static_cast<std::size_t>(b)];
    if (pa.score != pb.score) return pa.score > pb.score;
    if (pa.box.x != pb.box.x) return pa.box.x < pb.box.x;
    if (pa.box.y != pb.box.y) return pa.box.y < pb.box.y;
    if (pa.box.w != pb.box.w) return pa.box.w < pb.box.w;
    return pa.box.h < pb.box.h;
  });
  return idx;
}

struct MatchCount {
  std::size_t matched = 0;
  std::size_t total = 0;
};

// Each gt takes its highest-IoU still-unmatched proposal; the match stands
// only if that IoU clears the threshold, otherwise the proposal stays free.
MatchCount match_image(const std::vector<ScoredBox>& props, const std::vector<int>& order,
                       const std::vector<Box>& gts, int k, double iou_thr) {
  MatchCount mc;
  mc.total = gts.size();
  const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
  std::vector<bool> used(top, false);
  for (const auto& gt : gts) {
    double best = -1;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < top; ++i) {
      if (used[i]) continue;
      const double v = iou(props[static_cast<std::size_t>(order[i])].box, gt);
      if (v > best) {
        best = v;
        best_i = i;
      }
    }
    if (best >= iou_thr && best >= 0) {
      used[best_i] = true;
      ++mc.matched;
    }
  }
  return mc;
}

double recall_over(const std::vector<std::vector<ScoredBox>>& proposals,
                   const std::vector<std::vector<int>>& orders,
                   const std::vector<std::vector<Box>>& gts, int k, double iou_thr) {
  std::size_t matched = 0, total = 0;
  for (std::size_t img = 0; img < proposals.size(); ++img) {
    const auto mc = match_image(proposals[img], orders[img], gts[img], k, iou_thr);
    matched += mc.matched;
    total += mc.total;
  }
  if (total == 0) throw StatsError("recall undefined: no ground-truth boxes in the set");
  return static_cast<double>(matched) / static_cast<double>(total);
}

std::vector<std::vector<int>> rank_all(const std::vector<std::vector<ScoredBox>>& proposals) {
  std::vector<std::vector<int>> orders(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) orders[i] = ranked(proposals[i]);
  return orders;
}

void check_shapes(const std::vector<std::vector<ScoredBox>>& proposals,
                  const std::vector<std::vector<Box>>& gts, int k) {
  if (proposals.size() != gts.size()) {
    throw ShapeError("evaluation: " + std::to_string(proposals.size()) + " proposal sets vs " +
                     std::to_string(gts.size()) + " gt sets");
  }
  if (k < 1) throw ConfigError("evaluation: k must be >= 1");
}

}  // namespace

RecallBuckets default_buckets(double max_size) {
  return RecallBuckets{max_size * max_size / 9.0, max_size * max_size / 3.0};
}

const std::vector<double>& ar_thresholds() {
  static const std::vector<double> thrs = [] {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
    return t;
  }();
  return thrs;
}

double recall_at(const std::vector<std::vector<ScoredBox>>& proposals,
                 const std::vector<std::vector<Box>>& gts, int k, double iou_thr) {
  check_shapes(proposals, gts, k);
  return recall_over(proposals, rank_all(proposals), gts, k, iou_thr);
}

double average_recall(const std::vector<std::vector<ScoredBox>>& proposals,
                      const std::vector<std::vector<Box>>& gts, int k) {
  check_shapes(proposals, gts, k);
  const auto orders = rank_all(proposals);
  double sum = 0;
  for (double thr : ar_thresholds()) sum += recall_over(proposals, orders, gts, k, thr);
  return sum / static_cast<double>(ar_thresholds().size());
}

RecallReport build_report(const std::vector<std::vector<ScoredBox>>& proposals,
                          const std::vector<std::vector<Box>>& gts, const std::vector<int>& ks,
                          const RecallBuckets& buckets) {
  RecallReport report;
  const auto orders = rank_all(proposals);
  double prev_ar = -1;
  std::vector<int> ks_sorted = ks;
  std::sort(ks_sorted.begin(), ks_sorted.end());
  for (int k : ks_sorted) {
    check_shapes(proposals, gts, k);
    double sum = 0;
    double prev_recall = 2;
    for (double thr : ar_thresholds()) {
      const double r = recall_over(proposals, orders, gts, k, thr);
      if (r > prev_recall + 1e-12) {
        throw NumericError("recall increased with IoU threshold, matching is broken");
      }
      prev_recall = r;
      report.cells.push_back(RecallCell{k, thr, r});
      sum += r;
    }
    const double ar = sum / static_cast<double>(ar_thresholds().size());
    if (ar < prev_ar - 1e-12) {
      throw NumericError("AR decreased with proposal budget, matching is broken");
    }
    prev_ar = ar;
    report.ar_at_k[k] = ar;
  }

  const char* names[3] = {"small", "medium", "large"};
  for (int k : ks_sorted) {
    for (int b = 0; b < 3; ++b) {
      std::vector<std::vector<Box>> sub(gts.size());
      std::size_t count = 0;
      for (std::size_t img = 0; img < gts.size(); ++img) {
        for (const auto& g : gts[img]) {
          const double area = g.w * g.h;
          const bool in_bucket = (b == 0 && area < buckets.small_max) ||
                                 (b == 1 && area >= buckets.small_max && area < buckets.medium_max) ||
                                 (b == 2 && area >= buckets.medium_max);
          if (in_bucket) {
            sub[img].push_back(g);
            ++count;
          }
        }
      }
      if (count == 0) continue;
      double sum = 0;
      for (double thr : ar_thresholds()) sum += recall_over(proposals, orders, sub, k, thr);
      report.buckets.push_back(
          BucketRecall{k, names[b], sum / static_cast<double>(ar_thresholds().size()), count});
    }
  }
  return report;
}

void write_report_csv(const RecallReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << "k,iou_threshold,recall\n";
  char buf[64];
  for (const auto& c : report.cells) {
    std::snprintf(buf, sizeof(buf), "%d,%.2f,%.6f\n", c.k, c.iou_thr, c.recall);
    out << buf;
  }
  out << "\nk,AR\n";
  for (const auto& [k, ar] : report.ar_at_k) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f\n", k, ar);
    out << buf;
  }
  out << "\nk,bucket,AR,gt_count\n";
  for (const auto& b : report.buckets) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%zu\n", b.k, b.bucket.c_str(), b.ar, b.gt_count);
    out << buf;
  }
  if (!out) throw ConfigError("write failed for " + path);
}

}  // namespace crpn
