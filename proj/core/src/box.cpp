#include "crpn/box.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace crpn {

Delta encode(const Box& anchor, const Box& target) {
  Delta d;
  d.dx = (target.x - anchor.x) / anchor.w;
  d.dy = (target.y - anchor.y) / anchor.h;
  d.dw = std::log(target.w / anchor.w);
  d.dh = std::log(target.h / anchor.h);
  return d;
}

Box decode(const Box& anchor, const Delta& delta) {
  const double dw = std::clamp(delta.dw, -kDeltaClamp, kDeltaClamp);
  const double dh = std::clamp(delta.dh, -kDeltaClamp, kDeltaClamp);
  Box b;
  b.x = delta.dx * anchor.w + anchor.x;
  b.y = delta.dy * anchor.h + anchor.y;
  b.w = anchor.w * std::exp(dw);
  b.h = anchor.h * std::exp(dh);
  return b;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x + a.w / 2, b.x + b.w / 2) - std::max(a.x - a.w / 2, b.x - b.w / 2);
  if (ix <= 0) return 0.0;
  const double iy = std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2);
  if (iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

std::vector<ScoredBox> nms(const std::vector<ScoredBox>& candidates, double iou_threshold) {
  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return candidates[a].score > candidates[b].score;
  });
  std::vector<ScoredBox> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(candidates[idx].box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(candidates[idx]);
  }
  return kept;
}

AnchorLevel build_anchor_level(int image_w, int image_h, int stride, int base_size) {
  AnchorLevel level;
  level.stride = stride;
  level.base_size = base_size;
  level.grid_h = image_h / stride;
  level.grid_w = image_w / stride;
  if (level.grid_h < 1 || level.grid_w < 1) {
    throw ConfigError("build_anchor_level: stride " + std::to_string(stride) +
                      " leaves no grid cells for image " + std::to_string(image_w) + "x" +
                      std::to_string(image_h));
  }
  level.anchors.reserve(static_cast<std::size_t>(level.grid_h) * level.grid_w);
  for (int row = 0; row < level.grid_h; ++row) {
    for (int col = 0; col < level.grid_w; ++col) {
      Box a;
      a.x = (col + 0.5) * stride;
      a.y = (row + 0.5) * stride;
      a.w = base_size;
      a.h = base_size;
      level.anchors.push_back(a);
    }
  }
  return level;
}

Box clip_to_image(const Box& b, double image_w, double image_h) {
  const double x1 = std::clamp(b.x - b.w / 2, 0.0, image_w);
  const double y1 = std::clamp(b.y - b.h / 2, 0.0, image_h);
  const double x2 = std::clamp(b.x + b.w / 2, 0.0, image_w);
  const double y2 = std::clamp(b.y + b.h / 2, 0.0, image_h);
  Box out;
  out.x = (x1 + x2) / 2;
  out.y = (y1 + y2) / 2;
  out.w = x2 - x1;
  out.h = y2 - y1;
  return out;
}

template <typename T>
OffsetFieldT<T> anchor_offsets(const std::vector<Box>& anchors, int grid_h, int grid_w,
                               int kh, int kw, double stride, int dilation) {
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("anchor_offsets: kernel sides must be odd, got " + std::to_string(kh) +
                     "x" + std::to_string(kw));
  }
  if (static_cast<int>(anchors.size()) != grid_h * grid_w) {
    throw ShapeError("anchor_offsets: " + std::to_string(anchors.size()) + " anchors vs grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  const int taps = kh * kw;
  const int cy = (kh - 1) / 2;
  const int cx = (kw - 1) / 2;
  OffsetFieldT<T> o(grid_h, grid_w, taps);
  for (int row = 0; row < grid_h; ++row) {
    for (int col = 0; col < grid_w; ++col) {
      const Box& a = anchors[static_cast<std::size_t>(row) * grid_w + col];
      const double ctr_dy = a.y / stride - 0.5 - row;
      const double ctr_dx = a.x / stride - 0.5 - col;
      const double span_y = kh > 1 ? (a.h / stride) / (kh - 1) : 0.0;
      const double span_x = kw > 1 ? (a.w / stride) / (kw - 1) : 0.0;
      for (int k = 0; k < taps; ++k) {
        const int gy = k / kw - cy;
        const int gx = k % kw - cx;
        o.dy(row, col, k) = static_cast<T>(ctr_dy + gy * span_y - gy * dilation);
        o.dx(row, col, k) = static_cast<T>(ctr_dx + gx * span_x - gx * dilation);
      }
    }
  }
  return o;
}

template OffsetFieldT<float> anchor_offsets<float>(const std::vector<Box>&, int, int, int, int,
                                                   double, int);
template OffsetFieldT<double> anchor_offsets<double>(const std::vector<Box>&, int, int, int, int,
                                                     double, int);

}  // namespace crpn
