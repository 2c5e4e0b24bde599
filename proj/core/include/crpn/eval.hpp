#pragma once

#include <map>
#include <string>
#include <vector>

#include "crpn/box.hpp"
#include "crpn/errors.hpp"

namespace crpn {

// Gt-area cut points. A gt is small if area < small_max, medium if
// area < medium_max, large otherwise.
struct RecallBuckets {
  double small_max = 0;
  double medium_max = 0;
};

// max_size^2 / 9 and / 3: area thirds of the largest configured object.
RecallBuckets default_buckets(double max_size);

struct RecallCell {
  int k = 0;
  double iou_thr = 0;
  double recall = 0;
};

struct BucketRecall {
  int k = 0;
  std::string bucket;
  double ar = 0;
  std::size_t gt_count = 0;
};

struct RecallReport {
  std::vector<RecallCell> cells;
  std::map<int, double> ar_at_k;
  std::vector<BucketRecall> buckets;  // empty buckets omitted
};

// IoU thresholds 0.50 to 0.95, step 0.05.
const std::vector<double>& ar_thresholds();

// Fraction of gts matched one-to-one by their best unmatched top-k proposal,
// gated at iou_thr. Throws StatsError when there are no gts at all.
double recall_at(const std::vector<std::vector<ScoredBox>>& proposals,
                 const std::vector<std::vector<Box>>& gts, int k, double iou_thr);

double average_recall(const std::vector<std::vector<ScoredBox>>& proposals,
                      const std::vector<std::vector<Box>>& gts, int k);

RecallReport build_report(const std::vector<std::vector<ScoredBox>>& proposals,
                          const std::vector<std::vector<Box>>& gts, const std::vector<int>& ks,
                          const RecallBuckets& buckets);

void write_report_csv(const RecallReport& report, const std::string& path);

}  // namespace crpn
