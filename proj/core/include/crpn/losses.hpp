#pragma once

#include <vector>

#include "crpn/box.hpp"
#include "crpn/errors.hpp"

namespace crpn {

struct LossWeights {
  double lambda = 10.0;
  std::vector<double> alpha = {1.0, 1.0};
};

// Loss values paired with the gradient w.r.t. the prediction.
struct DeltaLoss {
  double value = 0;
  Delta grad;
};

struct BoxLoss {
  double value = 0;
  Box grad{0, 0, 0, 0};
};

struct ScalarLoss {
  double value = 0;
  double grad = 0;
};

// Sum over the four components of 0.5 z^2 for |z| < 1, |z| - 0.5 otherwise.
DeltaLoss smooth_l1(const Delta& pred, const Delta& target);

// -ln(max(IoU, 1e-6)); gradient is identically zero on disjoint boxes.
BoxLoss iou_loss(const Box& pred, const Box& gt);

// Binary cross entropy on a raw logit, log-sum-exp form. label is 0 or 1.
ScalarLoss bce(double logit, double label);

double total_loss(const std::vector<double>& stage_reg_losses, double cls_loss,
                  const LossWeights& w);

}  // namespace crpn
