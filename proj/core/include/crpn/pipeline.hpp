#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crpn/assign.hpp"
#include "crpn/box.hpp"
#include "crpn/checkpoint.hpp"
#include "crpn/losses.hpp"
#include "crpn/rng.hpp"
#include "crpn/synth.hpp"
#include "crpn/tensor.hpp"

namespace crpn {

enum class MetricMode { kAnchorFreeOnly, kAnchorBasedOnly, kMixed };

MetricMode parse_metric_mode(const std::string& s);
std::string metric_mode_name(MetricMode m);

// One feature pyramid level: which backbone block feeds it and the anchor size
// it carries. The stride is the cumulative downsampling at that block.
struct LevelSpec {
  int block = 0;
  int base_size = 0;
  int stride = 0;  // filled by PipelineConfig::validate
};

struct PipelineConfig {
  int num_stages = 2;
  bool align = true;
  MetricMode metric = MetricMode::kMixed;
  bool use_stats = true;
  bool use_iou_loss = true;
  double nms_threshold = 0.8;
  int max_proposals = 1000;

  int image_channels = 3;
  std::vector<int> backbone_widths = {16, 32, 32};
  std::vector<int> backbone_downsamples = {2, 2, 2};
  std::vector<LevelSpec> levels = {{1, 16, 0}, {2, 32, 0}};

  int head_channels = 64;
  int head_kernel = 3;
  int head_dilation = 2;

  double sigma_ctr = 0.2;
  double sigma_ign = 0.5;
  double iou_pos = 0.7;
  double iou_neg = 0.3;
  double iou_pos_late = 0.75;  // stages 3 and up

  LossWeights loss_weights;
  int cls_samples_cap = 256;

  // Fills level strides, checks invariants; throws ConfigError.
  void validate();
  AssignmentConfig stage_assign(int stage) const;
};

template <typename T>
struct StageHeadT {
  ConvParamsT<T> adapt;   // head_kernel x head_kernel, offset-driven
  ConvParamsT<T> reg;     // 1x1 -> 4 channels (dx, dy, dw, dh)
  ConvParamsT<T> bridge;  // 1x1 from stage-1 representation, stages >= 2
  ConvParamsT<T> cls;     // 1x1 -> 1 channel, final stage
  bool has_bridge = false;
  bool has_cls = false;
};

template <typename T>
struct PipelineWeightsT {
  std::vector<ConvParamsT<T>> backbone;  // block i downsamples by its stride
  std::vector<StageHeadT<T>> stages;

  template <typename U>
  PipelineWeightsT<U> cast() const;
};

using StageHead = StageHeadT<float>;
using PipelineWeights = PipelineWeightsT<float>;

// Ordered registry of every learnable tensor; the order defines the
// checkpoint manifest and the SGD update sequence.
template <typename T>
std::vector<std::pair<std::string, Tensor4T<T>*>> param_list(PipelineWeightsT<T>& w);
template <typename T>
std::vector<std::pair<std::string, const Tensor4T<T>*>> param_list(const PipelineWeightsT<T>& w);

PipelineWeights init_weights(const PipelineConfig& cfg, std::uint64_t seed);
PipelineWeights zero_like(const PipelineConfig& cfg);

// Identity statistics (mean 0, std 1) for every stage.
std::vector<TargetStats> identity_stats(int num_stages);

template <typename T>
struct StageLevelTraceT {
  OffsetFieldT<T> offs;
  Tensor4T<T> pre;  // adaptive conv (+ bridge) output before the ReLU
  Tensor4T<T> h;    // shared representation
  Tensor4T<T> reg;  // (1, 4, gh, gw) normalized delta predictions
  Tensor4T<T> cls;  // (1, 1, gh, gw), final stage only
};

template <typename T>
struct StageTraceT {
  std::vector<StageLevelTraceT<T>> levels;
  std::vector<Box> anchors_in;  // pooled level-major, row-major inside a level
  std::vector<Delta> deltas;    // denormalized
  std::vector<Box> refined;
};

template <typename T>
struct ForwardTraceT {
  std::vector<Tensor4T<T>> block_pre;
  std::vector<Tensor4T<T>> block_out;
  std::vector<StageTraceT<T>> stages;
  std::vector<AnchorLevel> base_levels;
  std::vector<int> level_start;  // index of each level in the pooled anchor list
  int image_w = 0, image_h = 0;
};

using ForwardTrace = ForwardTraceT<float>;

// Per-stage frozen inputs for gradient checking: anchors (and hence offsets)
// are held at the base point while weights move, matching the backward pass,
// which treats anchor geometry as constant.
struct FrozenGeometry {
  std::vector<std::vector<Box>> stage_anchors;  // pooled, per stage
};

template <typename T>
struct StageLevelOutT {
  StageLevelTraceT<T> trace;
  std::vector<Delta> deltas;
  std::vector<Box> refined;
};

template <typename T>
StageLevelOutT<T> run_stage(const Tensor4T<T>& feat, const Tensor4T<T>* bridged,
                            const AnchorLevel& anchors, const StageHeadT<T>& head,
                            const TargetStats& stats, bool align, int dilation);

template <typename T>
ForwardTraceT<T> run_cascade(const Tensor4T<T>& image, const PipelineConfig& cfg,
                             const PipelineWeightsT<T>& w, const std::vector<TargetStats>& stats,
                             const FrozenGeometry* frozen = nullptr);

std::vector<ScoredBox> derive_proposals(const ForwardTrace& trace, const PipelineConfig& cfg);

// Assignment, targets, and classification sampling for one image, computed
// once per forward pass and held fixed while gradients flow.
struct StagePlan {
  std::vector<Label> labels;
  std::vector<int> matched_gt;
  std::vector<Delta> targets_norm;  // valid at positives
  std::vector<Box> anchors_in;      // decode bases, frozen
};

struct LossPlan {
  std::vector<StagePlan> stages;
  std::vector<int> cls_indices;
  std::vector<double> cls_labels;
  std::vector<Box> gts;
};

template <typename T>
LossPlan make_plan(const ForwardTraceT<T>& trace, const std::vector<Box>& gts,
                   const PipelineConfig& cfg, const std::vector<TargetStats>& stats, Rng& rng);

struct LossBreakdown {
  double total = 0;
  std::vector<double> stage_reg;
  double cls = 0;
};

// Loss value plus gradients w.r.t. the regression / classification maps.
// grad_reg is indexed [stage][level]; grad_cls [level].
template <typename T>
LossBreakdown compute_losses(const ForwardTraceT<T>& trace, const LossPlan& plan,
                             const PipelineConfig& cfg, const std::vector<TargetStats>& stats,
                             std::vector<std::vector<Tensor4T<T>>>* grad_reg,
                             std::vector<Tensor4T<T>>* grad_cls);

template <typename T>
void backward_cascade(const ForwardTraceT<T>& trace, const Tensor4T<T>& image,
                      const PipelineConfig& cfg, const PipelineWeightsT<T>& w,
                      const std::vector<std::vector<Tensor4T<T>>>& grad_reg,
                      const std::vector<Tensor4T<T>>& grad_cls, PipelineWeightsT<T>& grads);

// Forward + plan + losses + full backward for one image. Gradients accumulate
// into `grads`.
template <typename T>
LossBreakdown image_step(const Tensor4T<T>& image, const std::vector<Box>& gts,
                         const PipelineConfig& cfg, const PipelineWeightsT<T>& w,
                         const std::vector<TargetStats>& stats, Rng& rng,
                         PipelineWeightsT<T>& grads);

// Mean over gts of the best IoU achieved by any refined box, one value per
// stage. Empty when there are no gts.
std::vector<double> stage_best_iou(const ForwardTrace& trace, const std::vector<Box>& gts);

extern template struct PipelineWeightsT<float>;
extern template struct PipelineWeightsT<double>;

}  // namespace crpn
