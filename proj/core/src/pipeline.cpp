#include "crpn/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace crpn {

namespace {

constexpr std::uint64_t kPurposeInit = 0x494e4954ull;  // "INIT"

template <typename T>
ConvParamsT<T> make_conv(int out_c, int in_c, int k, int dilation, int stride) {
  ConvParamsT<T> p;
  p.weights = Tensor4T<T>(out_c, in_c, k, k);
  p.bias = Tensor4T<T>(1, out_c, 1, 1);
  p.dilation = dilation;
  p.stride = stride;
  return p;
}

template <typename T>
void axpy(Tensor4T<T>& dst, const Tensor4T<T>& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("grad accumulate: " + dst.shape_str() + " vs " + src.shape_str());
  }
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

Delta reg_at(const Tensor4T<float>& reg, int row, int col) {
  return Delta{reg.at(0, 0, row, col), reg.at(0, 1, row, col), reg.at(0, 2, row, col),
               reg.at(0, 3, row, col)};
}
Delta reg_at(const Tensor4T<double>& reg, int row, int col) {
  return Delta{reg.at(0, 0, row, col), reg.at(0, 1, row, col), reg.at(0, 2, row, col),
               reg.at(0, 3, row, col)};
}

}  // namespace

MetricMode parse_metric_mode(const std::string& s) {
  if (s == "af") return MetricMode::kAnchorFreeOnly;
  if (s == "ab") return MetricMode::kAnchorBasedOnly;
  if (s == "afab") return MetricMode::kMixed;
  throw ConfigError("metric must be one of af, ab, afab; got '" + s + "'");
}

std::string metric_mode_name(MetricMode m) {
  switch (m) {
    case MetricMode::kAnchorFreeOnly: return "af";
    case MetricMode::kAnchorBasedOnly: return "ab";
    case MetricMode::kMixed: return "afab";
  }
  return "afab";
}

void PipelineConfig::validate() {
  if (num_stages < 1) throw ConfigError("pipeline.stages must be >= 1");
  if (nms_threshold <= 0 || nms_threshold >= 1) {
    throw ConfigError("pipeline.nms_threshold must be in (0, 1)");
  }
  if (max_proposals < 1) throw ConfigError("pipeline.max_proposals must be >= 1");
  if (backbone_widths.empty() || backbone_widths.size() != backbone_downsamples.size()) {
    throw ConfigError("pipeline.backbone widths and downsamples must be non-empty and equal length");
  }
  for (int w : backbone_widths) {
    if (w < 1) throw ConfigError("pipeline.backbone widths must be positive");
  }
  for (int d : backbone_downsamples) {
    if (d < 1) throw ConfigError("pipeline.backbone downsample factors must be >= 1");
  }
  if (levels.empty()) throw ConfigError("pipeline.levels must be non-empty");
  if (head_kernel < 1 || head_kernel % 2 == 0) throw ConfigError("pipeline.head_kernel must be odd");
  if (head_channels < 1) throw ConfigError("pipeline.head_channels must be >= 1");
  if (head_dilation < 1) throw ConfigError("pipeline.head_dilation must be >= 1");
  int prev_stride = 0;
  for (auto& lv : levels) {
    if (lv.block < 0 || lv.block >= static_cast<int>(backbone_widths.size())) {
      throw ConfigError("pipeline.level block index out of range");
    }
    if (lv.base_size < 1) throw ConfigError("pipeline.level base_size must be >= 1");
    int stride = 1;
    for (int b = 0; b <= lv.block; ++b) stride *= backbone_downsamples[static_cast<std::size_t>(b)];
    lv.stride = stride;
    if (stride <= prev_stride) throw ConfigError("pipeline.level strides must be strictly increasing");
    prev_stride = stride;
    if (backbone_widths[static_cast<std::size_t>(lv.block)] !=
        backbone_widths[static_cast<std::size_t>(levels[0].block)]) {
      throw ConfigError("pipeline.levels must expose equal channel widths (heads are shared)");
    }
  }
  if (loss_weights.alpha.size() != static_cast<std::size_t>(num_stages)) {
    throw ConfigError("pipeline.alpha must list one weight per stage (" +
                      std::to_string(loss_weights.alpha.size()) + " given, " +
                      std::to_string(num_stages) + " stages)");
  }
  if (loss_weights.lambda <= 0) throw ConfigError("pipeline.lambda must be positive");
  if (!(sigma_ctr > 0 && sigma_ctr <= sigma_ign && sigma_ign <= 1)) {
    throw ConfigError("pipeline sigma values must satisfy 0 < sigma_ctr <= sigma_ign <= 1");
  }
  if (!(iou_neg > 0 && iou_neg <= iou_pos && iou_pos < 1)) {
    throw ConfigError("pipeline IoU thresholds must satisfy 0 < iou_neg <= iou_pos < 1");
  }
  if (cls_samples_cap < 1) throw ConfigError("pipeline.cls_samples_cap must be >= 1");
}

AssignmentConfig PipelineConfig::stage_assign(int stage) const {
  AssignmentConfig a;
  a.sigma_ctr = sigma_ctr;
  a.sigma_ign = sigma_ign;
  a.iou_pos = stage >= 2 ? iou_pos_late : iou_pos;
  a.iou_neg = iou_neg;
  switch (metric) {
    case MetricMode::kAnchorFreeOnly: a.stage_metric = StageMetric::kAnchorFree; break;
    case MetricMode::kAnchorBasedOnly: a.stage_metric = StageMetric::kAnchorBased; break;
    case MetricMode::kMixed:
      a.stage_metric = stage == 0 ? StageMetric::kAnchorFree : StageMetric::kAnchorBased;
      break;
  }
  return a;
}

template <typename T>
template <typename U>
PipelineWeightsT<U> PipelineWeightsT<T>::cast() const {
  PipelineWeightsT<U> out;
  auto conv_cast = [](const ConvParamsT<T>& p) {
    ConvParamsT<U> q;
    q.weights = p.weights.template cast<U>();
    q.bias = p.bias.template cast<U>();
    q.dilation = p.dilation;
    q.stride = p.stride;
    return q;
  };
  for (const auto& b : backbone) out.backbone.push_back(conv_cast(b));
  for (const auto& s : stages) {
    StageHeadT<U> h;
    h.adapt = conv_cast(s.adapt);
    h.reg = conv_cast(s.reg);
    h.has_bridge = s.has_bridge;
    h.has_cls = s.has_cls;
    if (s.has_bridge) h.bridge = conv_cast(s.bridge);
    if (s.has_cls) h.cls = conv_cast(s.cls);
    out.stages.push_back(std::move(h));
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor4T<T>*>> param_list(PipelineWeightsT<T>& w) {
  std::vector<std::pair<std::string, Tensor4T<T>*>> out;
  for (std::size_t i = 0; i < w.backbone.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i);
    out.emplace_back(base + ".w", &w.backbone[i].weights);
    out.emplace_back(base + ".b", &w.backbone[i].bias);
  }
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    const std::string base = "stage" + std::to_string(s);
    auto& head = w.stages[s];
    out.emplace_back(base + ".adapt.w", &head.adapt.weights);
    out.emplace_back(base + ".adapt.b", &head.adapt.bias);
    if (head.has_bridge) {
      out.emplace_back(base + ".bridge.w", &head.bridge.weights);
      out.emplace_back(base + ".bridge.b", &head.bridge.bias);
    }
    out.emplace_back(base + ".reg.w", &head.reg.weights);
    out.emplace_back(base + ".reg.b", &head.reg.bias);
    if (head.has_cls) {
      out.emplace_back(base + ".cls.w", &head.cls.weights);
      out.emplace_back(base + ".cls.b", &head.cls.bias);
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor4T<T>*>> param_list(const PipelineWeightsT<T>& w) {
  auto mut = param_list(const_cast<PipelineWeightsT<T>&>(w));
  std::vector<std::pair<std::string, const Tensor4T<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

PipelineWeights zero_like(const PipelineConfig& cfg) {
  PipelineWeights w;
  int in_c = cfg.image_channels;
  for (std::size_t b = 0; b < cfg.backbone_widths.size(); ++b) {
    w.backbone.push_back(
        make_conv<float>(cfg.backbone_widths[b], in_c, 3, 1, cfg.backbone_downsamples[b]));
    in_c = cfg.backbone_widths[b];
  }
  const int feat_c = cfg.backbone_widths[static_cast<std::size_t>(cfg.levels[0].block)];
  for (int s = 0; s < cfg.num_stages; ++s) {
    StageHead head;
    head.adapt = make_conv<float>(cfg.head_channels, feat_c, cfg.head_kernel, cfg.head_dilation, 1);
    head.reg = make_conv<float>(4, cfg.head_channels, 1, 1, 1);
    head.has_bridge = s > 0;
    if (head.has_bridge) head.bridge = make_conv<float>(cfg.head_channels, cfg.head_channels, 1, 1, 1);
    head.has_cls = s == cfg.num_stages - 1;
    if (head.has_cls) head.cls = make_conv<float>(1, cfg.head_channels, 1, 1, 1);
    w.stages.push_back(std::move(head));
  }
  return w;
}

PipelineWeights init_weights(const PipelineConfig& cfg, std::uint64_t seed) {
  PipelineWeights w = zero_like(cfg);
  Rng rng(derive_seed(seed, kPurposeInit, 0));
  for (auto& [name, tensor] : param_list(w)) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) continue;
    // fan_in of the conv this tensor belongs to
    const double fan_in = static_cast<double>(tensor->c) * tensor->h * tensor->w;
    const double bound = 1.0 / std::sqrt(fan_in);
    for (auto& v : tensor->data) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return w;
}

std::vector<TargetStats> identity_stats(int num_stages) {
  return std::vector<TargetStats>(static_cast<std::size_t>(num_stages));
}

template <typename T>
StageLevelOutT<T> run_stage(const Tensor4T<T>& feat, const Tensor4T<T>* bridged,
                            const AnchorLevel& anchors, const StageHeadT<T>& head,
                            const TargetStats& stats, bool align, int dilation) {
  if (anchors.grid_h != feat.h || anchors.grid_w != feat.w) {
    throw ShapeError("run_stage: anchor grid (" + std::to_string(anchors.grid_h) + "," +
                     std::to_string(anchors.grid_w) + ") vs feature " + feat.shape_str());
  }
  StageLevelOutT<T> out;
  auto& tr = out.trace;
  const int k = head.adapt.kh();
  if (align) {
    tr.offs = anchor_offsets<T>(anchors.anchors, anchors.grid_h, anchors.grid_w, k, k,
                                static_cast<double>(anchors.stride), dilation);
  } else {
    tr.offs = OffsetFieldT<T>(feat.h, feat.w, k * k);
  }
  tr.pre = adaptive_conv(feat, head.adapt, tr.offs);
  if (bridged) {
    if (!head.has_bridge) throw ShapeError("run_stage: bridged input without a bridge projection");
    axpy(tr.pre, conv2d(*bridged, head.bridge));
  }
  tr.h = relu(tr.pre);
  tr.reg = conv2d(tr.h, head.reg);
  if (head.has_cls) tr.cls = conv2d(tr.h, head.cls);

  const std::size_t count = anchors.anchors.size();
  out.deltas.resize(count);
  out.refined.resize(count);
  for (int row = 0; row < anchors.grid_h; ++row) {
    for (int col = 0; col < anchors.grid_w; ++col) {
      const std::size_t i = static_cast<std::size_t>(row) * anchors.grid_w + col;
      const Delta d = denormalize_prediction(reg_at(tr.reg, row, col), stats);
      out.deltas[i] = d;
      out.refined[i] = decode(anchors.anchors[i], d);
    }
  }
  return out;
}

template <typename T>
ForwardTraceT<T> run_cascade(const Tensor4T<T>& image, const PipelineConfig& cfg,
                             const PipelineWeightsT<T>& w, const std::vector<TargetStats>& stats,
                             const FrozenGeometry* frozen) {
  if (image.n != 1) throw ShapeError("run_cascade: expected a single image, got " + image.shape_str());
  if (stats.size() != static_cast<std::size_t>(cfg.num_stages)) {
    throw ShapeError("run_cascade: " + std::to_string(stats.size()) + " stats for " +
                     std::to_string(cfg.num_stages) + " stages");
  }
  const int max_stride = cfg.levels.back().stride;
  if (max_stride <= 0) throw ConfigError("pipeline config was not validated (level strides unset)");
  if (image.h % max_stride != 0 || image.w % max_stride != 0) {
    throw ConfigError("image dims " + image.shape_str() + " not divisible by stride " +
                      std::to_string(max_stride));
  }

  ForwardTraceT<T> trace;
  trace.image_w = image.w;
  trace.image_h = image.h;
  const Tensor4T<T>* cur = &image;
  for (const auto& block : w.backbone) {
    trace.block_pre.push_back(conv2d(*cur, block));
    trace.block_out.push_back(relu(trace.block_pre.back()));
    cur = &trace.block_out.back();
  }

  int total = 0;
  for (const auto& lv : cfg.levels) {
    trace.base_levels.push_back(build_anchor_level(image.w, image.h, lv.stride, lv.base_size));
    trace.level_start.push_back(total);
    total += trace.base_levels.back().grid_h * trace.base_levels.back().grid_w;
  }

  std::vector<AnchorLevel> cur_levels = trace.base_levels;
  for (int s = 0; s < cfg.num_stages; ++s) {
    StageTraceT<T> st;
    st.anchors_in.reserve(static_cast<std::size_t>(total));
    st.deltas.resize(static_cast<std::size_t>(total));
    st.refined.resize(static_cast<std::size_t>(total));
    if (frozen) {
      const auto& fa = frozen->stage_anchors.at(static_cast<std::size_t>(s));
      if (fa.size() != static_cast<std::size_t>(total)) {
        throw ShapeError("frozen geometry anchor count mismatch at stage " + std::to_string(s));
      }
      for (std::size_t l = 0; l < cur_levels.size(); ++l) {
        const int start = trace.level_start[l];
        const int count = cur_levels[l].grid_h * cur_levels[l].grid_w;
        cur_levels[l].anchors.assign(fa.begin() + start, fa.begin() + start + count);
      }
    }
    for (std::size_t l = 0; l < cfg.levels.size(); ++l) {
      const auto& feat = trace.block_out[static_cast<std::size_t>(cfg.levels[l].block)];
      const Tensor4T<T>* bridged = s > 0 ? &trace.stages[0].levels[l].h : nullptr;
      auto out = run_stage(feat, bridged, cur_levels[l], w.stages[static_cast<std::size_t>(s)],
                           stats[static_cast<std::size_t>(s)], cfg.align, cfg.head_dilation);
      const int start = trace.level_start[l];
      st.anchors_in.insert(st.anchors_in.end(), cur_levels[l].anchors.begin(),
                           cur_levels[l].anchors.end());
      std::copy(out.deltas.begin(), out.deltas.end(), st.deltas.begin() + start);
      std::copy(out.refined.begin(), out.refined.end(), st.refined.begin() + start);
      st.levels.push_back(std::move(out.trace));
      cur_levels[l].anchors.assign(st.refined.begin() + start,
                                   st.refined.begin() + start +
                                       cur_levels[l].grid_h * cur_levels[l].grid_w);
    }
    trace.stages.push_back(std::move(st));
  }
  return trace;
}

std::vector<ScoredBox> derive_proposals(const ForwardTrace& trace, const PipelineConfig& cfg) {
  const auto& last = trace.stages.back();
  std::vector<ScoredBox> cands;
  cands.reserve(last.refined.size());
  for (std::size_t l = 0; l < last.levels.size(); ++l) {
    const auto& cls = last.levels[l].cls;
    const int start = trace.level_start[l];
    for (int row = 0; row < cls.h; ++row) {
      for (int col = 0; col < cls.w; ++col) {
        const double logit = cls.at(0, 0, row, col);
        const double score = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit))
                                        : std::exp(logit) / (1.0 + std::exp(logit));
        const Box b = clip_to_image(last.refined[static_cast<std::size_t>(start + row * cls.w + col)],
                                    trace.image_w, trace.image_h);
        if (b.w <= 1e-6 || b.h <= 1e-6) continue;
        cands.push_back(ScoredBox{b, score});
      }
    }
  }
  auto kept = nms(cands, cfg.nms_threshold);
  if (static_cast<int>(kept.size()) > cfg.max_proposals) {
    kept.resize(static_cast<std::size_t>(cfg.max_proposals));
  }
  return kept;
}

template <typename T>
LossPlan make_plan(const ForwardTraceT<T>& trace, const std::vector<Box>& gts,
                   const PipelineConfig& cfg, const std::vector<TargetStats>& stats, Rng& rng) {
  LossPlan plan;
  plan.gts = gts;
  for (int s = 0; s < cfg.num_stages; ++s) {
    const auto& anchors = trace.stages[static_cast<std::size_t>(s)].anchors_in;
    const AssignmentConfig acfg = cfg.stage_assign(s);
    AssignmentResult r = acfg.stage_metric == StageMetric::kAnchorFree
                             ? assign_anchor_free(anchors, gts, acfg)
                             : assign_anchor_based(anchors, gts, acfg);
    StagePlan sp;
    sp.labels = std::move(r.labels);
    sp.matched_gt = std::move(r.matched_gt);
    sp.anchors_in = anchors;
    sp.targets_norm.resize(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (sp.labels[i] == Label::kPositive) {
        sp.targets_norm[i] = normalize_targets(r.targets[i], stats[static_cast<std::size_t>(s)]);
      }
    }
    plan.stages.push_back(std::move(sp));
  }

  // Objectness samples come from the final stage: every positive plus an
  // equal number of random negatives, capped.
  const auto& last = plan.stages.back();
  std::vector<int> positives, negatives;
  for (std::size_t i = 0; i < last.labels.size(); ++i) {
    if (last.labels[i] == Label::kPositive) positives.push_back(static_cast<int>(i));
    if (last.labels[i] == Label::kNegative) negatives.push_back(static_cast<int>(i));
  }
  std::size_t want_neg = std::min(positives.size(), negatives.size());
  const std::size_t cap = static_cast<std::size_t>(cfg.cls_samples_cap);
  if (positives.size() + want_neg > cap) {
    want_neg = positives.size() >= cap ? 0 : cap - positives.size();
  }
  for (std::size_t i = 0; i < want_neg; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(
                                  static_cast<std::uint64_t>(negatives.size() - i)));
    std::swap(negatives[i], negatives[j]);
  }
  negatives.resize(want_neg);
  std::sort(negatives.begin(), negatives.end());
  for (int i : positives) {
    plan.cls_indices.push_back(i);
    plan.cls_labels.push_back(1.0);
  }
  for (int i : negatives) {
    plan.cls_indices.push_back(i);
    plan.cls_labels.push_back(0.0);
  }
  return plan;
}

namespace {

// Pooled anchor index -> (level, row, col).
struct LevelLoc {
  int level, row, col;
};

LevelLoc locate(const std::vector<AnchorLevel>& levels, const std::vector<int>& starts, int idx) {
  for (std::size_t l = levels.size(); l-- > 0;) {
    if (idx >= starts[l]) {
      const int rel = idx - starts[l];
      return LevelLoc{static_cast<int>(l), rel / levels[l].grid_w, rel % levels[l].grid_w};
    }
  }
  throw ShapeError("anchor index out of range");
}

}  // namespace

template <typename T>
LossBreakdown compute_losses(const ForwardTraceT<T>& trace, const LossPlan& plan,
                             const PipelineConfig& cfg, const std::vector<TargetStats>& stats,
                             std::vector<std::vector<Tensor4T<T>>>* grad_reg,
                             std::vector<Tensor4T<T>>* grad_cls) {
  LossBreakdown out;
  if (grad_reg) {
    grad_reg->assign(static_cast<std::size_t>(cfg.num_stages), {});
    for (int s = 0; s < cfg.num_stages; ++s) {
      for (const auto& lt : trace.stages[static_cast<std::size_t>(s)].levels) {
        (*grad_reg)[static_cast<std::size_t>(s)].push_back(
            Tensor4T<T>(1, 4, lt.reg.h, lt.reg.w));
      }
    }
  }
  if (grad_cls) {
    grad_cls->clear();
    for (const auto& lt : trace.stages.back().levels) {
      grad_cls->push_back(Tensor4T<T>(1, 1, lt.cls.h, lt.cls.w));
    }
  }

  for (int s = 0; s < cfg.num_stages; ++s) {
    const auto& st = trace.stages[static_cast<std::size_t>(s)];
    const auto& sp = plan.stages[static_cast<std::size_t>(s)];
    const TargetStats& sstats = stats[static_cast<std::size_t>(s)];
    const bool final_iou = cfg.use_iou_loss && s == cfg.num_stages - 1;
    // the total applies lambda * alpha to each reg term; gradients carry it too
    const double reg_w =
        cfg.loss_weights.lambda * cfg.loss_weights.alpha[static_cast<std::size_t>(s)];
    int n_pos = 0;
    for (auto lab : sp.labels) n_pos += lab == Label::kPositive ? 1 : 0;
    double loss = 0;
    if (n_pos > 0) {
      for (std::size_t i = 0; i < sp.labels.size(); ++i) {
        if (sp.labels[i] != Label::kPositive) continue;
        const LevelLoc loc = locate(trace.base_levels, trace.level_start, static_cast<int>(i));
        const auto& lt = st.levels[static_cast<std::size_t>(loc.level)];
        const Delta raw = reg_at(lt.reg, loc.row, loc.col);
        double g[4];
        if (final_iou) {
          const Box& a = sp.anchors_in[i];
          const Delta dhat = denormalize_prediction(raw, sstats);
          const Box b = decode(a, dhat);
          const Box& gt = plan.gts[static_cast<std::size_t>(sp.matched_gt[i])];
          const BoxLoss bl = iou_loss(b, gt);
          loss += bl.value;
          // chain: reg -> denormalize (x std) -> decode -> box
          g[0] = bl.grad.x * a.w * sstats.std.dx;
          g[1] = bl.grad.y * a.h * sstats.std.dy;
          g[2] = std::abs(dhat.dw) < kDeltaClamp ? bl.grad.w * b.w * sstats.std.dw : 0.0;
          g[3] = std::abs(dhat.dh) < kDeltaClamp ? bl.grad.h * b.h * sstats.std.dh : 0.0;
        } else {
          const DeltaLoss dl = smooth_l1(raw, sp.targets_norm[i]);
          loss += dl.value;
          g[0] = dl.grad.dx;
          g[1] = dl.grad.dy;
          g[2] = dl.grad.dw;
          g[3] = dl.grad.dh;
        }
        if (grad_reg) {
          auto& gt_reg = (*grad_reg)[static_cast<std::size_t>(s)][static_cast<std::size_t>(loc.level)];
          for (int ch = 0; ch < 4; ++ch) {
            gt_reg.at(0, ch, loc.row, loc.col) += static_cast<T>(reg_w * g[ch] / n_pos);
          }
        }
      }
      loss /= n_pos;
    }
    out.stage_reg.push_back(loss);
  }

  const std::size_t n_cls = plan.cls_indices.size();
  if (n_cls > 0) {
    const auto& st = trace.stages.back();
    double loss = 0;
    for (std::size_t q = 0; q < n_cls; ++q) {
      const LevelLoc loc = locate(trace.base_levels, trace.level_start, plan.cls_indices[q]);
      const auto& lt = st.levels[static_cast<std::size_t>(loc.level)];
      const double logit = lt.cls.at(0, 0, loc.row, loc.col);
      const ScalarLoss sl = bce(logit, plan.cls_labels[q]);
      loss += sl.value;
      if (grad_cls) {
        (*grad_cls)[static_cast<std::size_t>(loc.level)].at(0, 0, loc.row, loc.col) +=
            static_cast<T>(sl.grad / static_cast<double>(n_cls));
      }
    }
    out.cls = loss / static_cast<double>(n_cls);
  }

  out.total = total_loss(out.stage_reg, out.cls, cfg.loss_weights);
  return out;
}

template <typename T>
void backward_cascade(const ForwardTraceT<T>& trace, const Tensor4T<T>& image,
                      const PipelineConfig& cfg, const PipelineWeightsT<T>& w,
                      const std::vector<std::vector<Tensor4T<T>>>& grad_reg,
                      const std::vector<Tensor4T<T>>& grad_cls, PipelineWeightsT<T>& grads) {
  const std::size_t n_levels = cfg.levels.size();
  const int T_stages = cfg.num_stages;

  std::vector<Tensor4T<T>> grad_feat(n_levels);
  for (std::size_t l = 0; l < n_levels; ++l) {
    const auto& feat = trace.block_out[static_cast<std::size_t>(cfg.levels[l].block)];
    grad_feat[l] = Tensor4T<T>(feat.n, feat.c, feat.h, feat.w);
  }

  // grad wrt each stage's representation h, accumulated across consumers
  std::vector<std::vector<Tensor4T<T>>> grad_h(static_cast<std::size_t>(T_stages));
  for (int s = 0; s < T_stages; ++s) {
    for (const auto& lt : trace.stages[static_cast<std::size_t>(s)].levels) {
      grad_h[static_cast<std::size_t>(s)].push_back(Tensor4T<T>(lt.h.n, lt.h.c, lt.h.h, lt.h.w));
    }
  }
  for (int s = 0; s < T_stages; ++s) {
    auto& head = w.stages[static_cast<std::size_t>(s)];
    auto& ghead = grads.stages[static_cast<std::size_t>(s)];
    for (std::size_t l = 0; l < n_levels; ++l) {
      const auto& lt = trace.stages[static_cast<std::size_t>(s)].levels[l];
      auto cg = conv2d_backward(grad_reg[static_cast<std::size_t>(s)][l], lt.h, head.reg);
      axpy(ghead.reg.weights, cg.grad_w);
      axpy(ghead.reg.bias, cg.grad_bias);
      axpy(grad_h[static_cast<std::size_t>(s)][l], cg.grad_x);
      if (head.has_cls) {
        auto cc = conv2d_backward(grad_cls[l], lt.h, head.cls);
        axpy(ghead.cls.weights, cc.grad_w);
        axpy(ghead.cls.bias, cc.grad_bias);
        axpy(grad_h[static_cast<std::size_t>(s)][l], cc.grad_x);
      }
    }
  }

  for (int s = T_stages - 1; s >= 0; --s) {
    auto& head = w.stages[static_cast<std::size_t>(s)];
    auto& ghead = grads.stages[static_cast<std::size_t>(s)];
    for (std::size_t l = 0; l < n_levels; ++l) {
      const auto& lt = trace.stages[static_cast<std::size_t>(s)].levels[l];
      const auto& feat = trace.block_out[static_cast<std::size_t>(cfg.levels[l].block)];
      const Tensor4T<T> gpre = relu_backward(grad_h[static_cast<std::size_t>(s)][l], lt.pre);
      auto ag = adaptive_conv_backward(gpre, feat, head.adapt, lt.offs);
      axpy(ghead.adapt.weights, ag.grad_w);
      axpy(ghead.adapt.bias, ag.grad_bias);
      axpy(grad_feat[l], ag.grad_x);
      if (s > 0) {
        const auto& h1 = trace.stages[0].levels[l].h;
        auto bg = conv2d_backward(gpre, h1, head.bridge);
        axpy(ghead.bridge.weights, bg.grad_w);
        axpy(ghead.bridge.bias, bg.grad_bias);
        axpy(grad_h[0][l], bg.grad_x);
      }
    }
  }

  std::vector<Tensor4T<T>> grad_block(w.backbone.size());
  for (std::size_t b = 0; b < w.backbone.size(); ++b) {
    const auto& bo = trace.block_out[b];
    grad_block[b] = Tensor4T<T>(bo.n, bo.c, bo.h, bo.w);
  }
  for (std::size_t l = 0; l < n_levels; ++l) {
    axpy(grad_block[static_cast<std::size_t>(cfg.levels[l].block)], grad_feat[l]);
  }
  for (std::size_t b = w.backbone.size(); b-- > 0;) {
    const Tensor4T<T> gpre = relu_backward(grad_block[b], trace.block_pre[b]);
    const Tensor4T<T>& input = b == 0 ? image : trace.block_out[b - 1];
    auto cg = conv2d_backward(gpre, input, w.backbone[b]);
    axpy(grads.backbone[b].weights, cg.grad_w);
    axpy(grads.backbone[b].bias, cg.grad_bias);
    if (b > 0) axpy(grad_block[b - 1], cg.grad_x);
  }
}

template <typename T>
LossBreakdown image_step(const Tensor4T<T>& image, const std::vector<Box>& gts,
                         const PipelineConfig& cfg, const PipelineWeightsT<T>& w,
                         const std::vector<TargetStats>& stats, Rng& rng,
                         PipelineWeightsT<T>& grads) {
  const auto trace = run_cascade(image, cfg, w, stats);
  const LossPlan plan = make_plan(trace, gts, cfg, stats, rng);
  std::vector<std::vector<Tensor4T<T>>> grad_reg;
  std::vector<Tensor4T<T>> grad_cls;
  const LossBreakdown losses = compute_losses(trace, plan, cfg, stats, &grad_reg, &grad_cls);
  backward_cascade(trace, image, cfg, w, grad_reg, grad_cls, grads);
  return losses;
}

std::vector<double> stage_best_iou(const ForwardTrace& trace, const std::vector<Box>& gts) {
  std::vector<double> out;
  if (gts.empty()) return out;
  for (const auto& st : trace.stages) {
    double sum = 0;
    for (const auto& gt : gts) {
      double best = 0;
      for (const auto& b : st.refined) best = std::max(best, iou(b, gt));
      sum += best;
    }
    out.push_back(sum / static_cast<double>(gts.size()));
  }
  return out;
}

template struct PipelineWeightsT<float>;
template struct PipelineWeightsT<double>;
template PipelineWeightsT<double> PipelineWeightsT<float>::cast<double>() const;
template PipelineWeightsT<float> PipelineWeightsT<double>::cast<float>() const;

#define CRPN_PIPE_INSTANTIATE(T)                                                                  \
  template std::vector<std::pair<std::string, Tensor4T<T>*>> param_list<T>(PipelineWeightsT<T>&); \
  template std::vector<std::pair<std::string, const Tensor4T<T>*>> param_list<T>(                 \
      const PipelineWeightsT<T>&);                                                                \
  template StageLevelOutT<T> run_stage<T>(const Tensor4T<T>&, const Tensor4T<T>*,                 \
                                          const AnchorLevel&, const StageHeadT<T>&,               \
                                          const TargetStats&, bool, int);                         \
  template ForwardTraceT<T> run_cascade<T>(const Tensor4T<T>&, const PipelineConfig&,             \
                                           const PipelineWeightsT<T>&,                            \
                                           const std::vector<TargetStats>&,                       \
                                           const FrozenGeometry*);                                \
  template LossPlan make_plan<T>(const ForwardTraceT<T>&, const std::vector<Box>&,                \
                                 const PipelineConfig&, const std::vector<TargetStats>&, Rng&);   \
  template LossBreakdown compute_losses<T>(const ForwardTraceT<T>&, const LossPlan&,              \
                                           const PipelineConfig&,                                 \
                                           const std::vector<TargetStats>&,                       \
                                           std::vector<std::vector<Tensor4T<T>>>*,                \
                                           std::vector<Tensor4T<T>>*);                            \
  template void backward_cascade<T>(const ForwardTraceT<T>&, const Tensor4T<T>&,                  \
                                    const PipelineConfig&, const PipelineWeightsT<T>&,            \
                                    const std::vector<std::vector<Tensor4T<T>>>&,                 \
                                    const std::vector<Tensor4T<T>>&, PipelineWeightsT<T>&);       \
  template LossBreakdown image_step<T>(const Tensor4T<T>&, const std::vector<Box>&,               \
                                       const PipelineConfig&, const PipelineWeightsT<T>&,         \
                                       const std::vector<TargetStats>&, Rng&,                     \
                                       PipelineWeightsT<T>&);

CRPN_PIPE_INSTANTIATE(float)
CRPN_PIPE_INSTANTIATE(double)
#undef CRPN_PIPE_INSTANTIATE

}  // namespace crpn
