#include "crpn/losses.hpp"

#include <algorithm>
#include <cmath>

namespace crpn {

namespace {

constexpr double kIouEps = 1e-6;

void smooth_l1_term(double pred, double target, double& value, double& grad) {
  const double z = pred - target;
  if (std::abs(z) < 1.0) {
    value += 0.5 * z * z;
    grad = z;
  } else {
    value += std::abs(z) - 0.5;
    grad = z > 0 ? 1.0 : -1.0;
  }
}

}  // namespace

DeltaLoss smooth_l1(const Delta& pred, const Delta& target) {
  DeltaLoss out;
  smooth_l1_term(pred.dx, target.dx, out.value, out.grad.dx);
  smooth_l1_term(pred.dy, target.dy, out.value, out.grad.dy);
  smooth_l1_term(pred.dw, target.dw, out.value, out.grad.dw);
  smooth_l1_term(pred.dh, target.dh, out.value, out.grad.dh);
  return out;
}

BoxLoss iou_loss(const Box& pred, const Box& gt) {
  BoxLoss out;
  const double px1 = pred.x - pred.w / 2, px2 = pred.x + pred.w / 2;
  const double py1 = pred.y - pred.h / 2, py2 = pred.y + pred.h / 2;
  const double gx1 = gt.x - gt.w / 2, gx2 = gt.x + gt.w / 2;
  const double gy1 = gt.y - gt.h / 2, gy2 = gt.y + gt.h / 2;
  const double iw = std::min(px2, gx2) - std::max(px1, gx1);
  const double ih = std::min(py2, gy2) - std::max(py1, gy1);
  if (iw <= 0 || ih <= 0) {
    out.value = -std::log(kIouEps);
    return out;
  }
  const double inter = iw * ih;
  const double uni = pred.w * pred.h + gt.w * gt.h - inter;
  const double v = inter / uni;
  if (v <= kIouEps) {
    out.value = -std::log(kIouEps);
    return out;
  }
  out.value = -std::log(v);

  // Active-edge indicators: which interval endpoints the prediction owns.
  const double sx1 = px1 >= gx1 ? 1.0 : 0.0;
  const double sx2 = px2 <= gx2 ? 1.0 : 0.0;
  const double sy1 = py1 >= gy1 ? 1.0 : 0.0;
  const double sy2 = py2 <= gy2 ? 1.0 : 0.0;
  // d iw / d (x, w), d ih / d (y, h)
  const double diw_dx = sx2 - sx1;
  const double diw_dw = 0.5 * (sx2 + sx1);
  const double dih_dy = sy2 - sy1;
  const double dih_dh = 0.5 * (sy2 + sy1);
  const double dI_dx = ih * diw_dx;
  const double dI_dw = ih * diw_dw;
  const double dI_dy = iw * dih_dy;
  const double dI_dh = iw * dih_dh;
  const double dA_dw = pred.h;
  const double dA_dh = pred.w;
  // iou = I / (A_p + A_g - I); d iou = (dI (U + I) - I dA) / U^2 per parameter.
  const double u2 = uni * uni;
  const double div_dx = dI_dx * (uni + inter) / u2;
  const double div_dy = dI_dy * (uni + inter) / u2;
  const double div_dw = (dI_dw * (uni + inter) - inter * dA_dw) / u2;
  const double div_dh = (dI_dh * (uni + inter) - inter * dA_dh) / u2;
  const double scale = -1.0 / v;
  out.grad = Box{scale * div_dx, scale * div_dy, scale * div_dw, scale * div_dh};
  return out;
}

ScalarLoss bce(double logit, double label) {
  ScalarLoss out;
  out.value = std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
  const double sig =
      logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
  out.grad = sig - label;
  return out;
}

double total_loss(const std::vector<double>& stage_reg_losses, double cls_loss,
                  const LossWeights& w) {
  if (w.alpha.size() != stage_reg_losses.size()) {
    throw ConfigError("total_loss: " + std::to_string(stage_reg_losses.size()) +
                      " stage losses but " + std::to_string(w.alpha.size()) + " alpha weights");
  }
  if (w.lambda <= 0) throw ConfigError("total_loss: lambda must be positive");
  double reg = 0;
  for (std::size_t i = 0; i < stage_reg_losses.size(); ++i) {
    if (w.alpha[i] <= 0) throw ConfigError("total_loss: alpha weights must be positive");
    reg += w.alpha[i] * stage_reg_losses[i];
  }
  return w.lambda * reg + cls_loss;
}

}  // namespace crpn
