#pragma once

#include <vector>

#include "crpn/tensor.hpp"

namespace crpn {

// Axis-aligned box in image pixels, center + dimensions. Box math runs in
// double throughout; only bulk tensors are single precision.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
};

// Dimensionless regression offsets between an anchor and a target box.
struct Delta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

struct ScoredBox {
  Box box;
  double score = 0;
};

// Uniform grid of square anchors for one pyramid level. Row-major: the anchor
// for grid cell (row, col) is anchors[row * grid_w + col], centered at
// ((col + 1/2) * stride, (row + 1/2) * stride).
struct AnchorLevel {
  int stride = 0;
  int base_size = 0;
  int grid_h = 0, grid_w = 0;
  std::vector<Box> anchors;
};

// Largest |dw| / |dh| decode will exponentiate; larger values are clamped.
inline constexpr double kDeltaClamp = 4.0;

Delta encode(const Box& anchor, const Box& target);
Box decode(const Box& anchor, const Delta& delta);

double iou(const Box& a, const Box& b);

// Greedy descending-score suppression: a candidate is dropped when its IoU
// with an already-kept box exceeds the threshold. Score ties keep the lower
// original index first.
std::vector<ScoredBox> nms(const std::vector<ScoredBox>& candidates, double iou_threshold);

AnchorLevel build_anchor_level(int image_w, int image_h, int stride, int base_size);

// Clamp the box corners into [0, image_w] x [0, image_h]. A box entirely
// outside collapses to zero extent on the touched axis.
Box clip_to_image(const Box& b, double image_w, double image_h);

// Offset field for adaptive convolution, derived from per-cell anchors.
// Each anchor is projected onto the feature map (centers shift by half a
// cell so an unregressed anchor lands exactly on its grid point), the kernel
// taps are spread uniformly over the projected extent, and the regular
// dilated grid is subtracted since adaptive_conv adds it back.
template <typename T>
OffsetFieldT<T> anchor_offsets(const std::vector<Box>& anchors, int grid_h, int grid_w,
                               int kh, int kw, double stride, int dilation);

template <typename T>
OffsetFieldT<T> anchor_offsets(const AnchorLevel& level, int kh, int kw, int dilation) {
  return anchor_offsets<T>(level.anchors, level.grid_h, level.grid_w, kh, kw,
                           static_cast<double>(level.stride), dilation);
}

}  // namespace crpn
