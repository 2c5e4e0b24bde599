#include "crpn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "crpn/eval.hpp"
#include "crpn/parallel.hpp"

namespace crpn {

namespace {

constexpr std::uint64_t kPurposeShuffle = 0x53485546ull;  // "SHUF"
constexpr std::uint64_t kPurposePlan = 0x504c414eull;     // "PLAN"
constexpr std::uint64_t kPurposeFlip = 0x464c4950ull;     // "FLIP"

std::vector<Box> pooled_base_anchors(const PipelineConfig& cfg, int image_w, int image_h) {
  std::vector<Box> anchors;
  for (const auto& lv : cfg.levels) {
    const AnchorLevel al = build_anchor_level(image_w, image_h, lv.stride, lv.base_size);
    anchors.insert(anchors.end(), al.anchors.begin(), al.anchors.end());
  }
  return anchors;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string(what) + " is not finite, training diverged");
  }
}

}  // namespace

void TrainConfig::validate(int num_scenes) const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (lr < 0) throw ConfigError("train.lr must be >= 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
  if (threads < 1) throw ConfigError("train.threads must be >= 1");
  if (val_scenes < 0 || val_scenes >= num_scenes) {
    throw ConfigError("train.val_scenes must leave at least one training scene (" +
                      std::to_string(val_scenes) + " of " + std::to_string(num_scenes) + ")");
  }
}

std::vector<TargetStats> calibrate_stats(const std::vector<Scene>& train_scenes,
                                         const PipelineConfig& cfg, int threads) {
  // Current anchor geometry per scene; stage by stage, positives snap onto
  // their matched gt before the next stage's targets are measured.
  std::vector<std::vector<Box>> anchors(train_scenes.size());
  parallel_for(static_cast<int>(train_scenes.size()), threads, [&](int i) {
    const auto& img = train_scenes[static_cast<std::size_t>(i)].image;
    anchors[static_cast<std::size_t>(i)] = pooled_base_anchors(cfg, img.w, img.h);
  });

  std::vector<TargetStats> stats;
  for (int s = 0; s < cfg.num_stages; ++s) {
    const AssignmentConfig acfg = cfg.stage_assign(s);
    std::vector<std::vector<Delta>> samples(train_scenes.size());
    parallel_for(static_cast<int>(train_scenes.size()), threads, [&](int i) {
      const auto idx = static_cast<std::size_t>(i);
      const auto& gts = train_scenes[idx].gts;
      AssignmentResult r = acfg.stage_metric == StageMetric::kAnchorFree
                               ? assign_anchor_free(anchors[idx], gts, acfg)
                               : assign_anchor_based(anchors[idx], gts, acfg);
      for (std::size_t a = 0; a < anchors[idx].size(); ++a) {
        if (r.labels[a] != Label::kPositive) continue;
        samples[idx].push_back(r.targets[a]);
        anchors[idx][a] = gts[static_cast<std::size_t>(r.matched_gt[a])];
      }
    });
    std::vector<Delta> pooled;
    for (const auto& sv : samples) pooled.insert(pooled.end(), sv.begin(), sv.end());
    if (pooled.size() < 2) {
      throw StatsError("stage " + std::to_string(s) + " produced " +
                       std::to_string(pooled.size()) +
                       " positive samples during calibration; dataset or assignment too sparse");
    }
    stats.push_back(compute_target_stats(pooled));
  }
  return stats;
}

std::vector<std::vector<ScoredBox>> propose_all(const std::vector<Scene>& scenes,
                                                const PipelineConfig& cfg,
                                                const PipelineWeights& weights,
                                                const std::vector<TargetStats>& stats,
                                                int threads) {
  std::vector<std::vector<ScoredBox>> out(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), threads, [&](int i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto trace = run_cascade(scenes[idx].image, cfg, weights, stats);
    out[idx] = derive_proposals(trace, cfg);
  });
  return out;
}

std::vector<double> mean_stage_iou(const std::vector<Scene>& scenes, const PipelineConfig& cfg,
                                   const PipelineWeights& weights,
                                   const std::vector<TargetStats>& stats, int threads) {
  std::vector<std::vector<double>> per_scene(scenes.size());
  std::vector<std::size_t> gt_counts(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), threads, [&](int i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto trace = run_cascade(scenes[idx].image, cfg, weights, stats);
    per_scene[idx] = stage_best_iou(trace, scenes[idx].gts);
    gt_counts[idx] = scenes[idx].gts.size();
  });
  std::vector<double> sums(static_cast<std::size_t>(cfg.num_stages), 0.0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (gt_counts[i] == 0) continue;
    for (std::size_t s = 0; s < sums.size(); ++s) {
      sums[s] += per_scene[i][s] * static_cast<double>(gt_counts[i]);
    }
    total += gt_counts[i];
  }
  if (total == 0) throw StatsError("mean_stage_iou: no ground-truth boxes");
  for (auto& v : sums) v /= static_cast<double>(total);
  return sums;
}

Checkpoint pack_checkpoint(const PipelineWeights& weights, const std::vector<TargetStats>& stats,
                           const PipelineWeights* momentum, int epochs_done) {
  Checkpoint ckpt;
  for (const auto& [name, t] : param_list(weights)) ckpt.add(name, *t);
  for (std::size_t s = 0; s < stats.size(); ++s) {
    Tensor4 st(1, 1, 2, 4);
    const auto& m = stats[s].mean;
    const auto& d = stats[s].std;
    st.at(0, 0, 0, 0) = static_cast<float>(m.dx);
    st.at(0, 0, 0, 1) = static_cast<float>(m.dy);
    st.at(0, 0, 0, 2) = static_cast<float>(m.dw);
    st.at(0, 0, 0, 3) = static_cast<float>(m.dh);
    st.at(0, 0, 1, 0) = static_cast<float>(d.dx);
    st.at(0, 0, 1, 1) = static_cast<float>(d.dy);
    st.at(0, 0, 1, 2) = static_cast<float>(d.dw);
    st.at(0, 0, 1, 3) = static_cast<float>(d.dh);
    ckpt.add("stats.stage" + std::to_string(s), std::move(st));
  }
  if (momentum) {
    for (const auto& [name, t] : param_list(*momentum)) ckpt.add("momentum." + name, *t);
  }
  Tensor4 ep(1, 1, 1, 1);
  ep.data[0] = static_cast<float>(epochs_done);
  ckpt.add("epoch", std::move(ep));
  return ckpt;
}

void unpack_checkpoint(const Checkpoint& ckpt, const PipelineConfig& cfg, PipelineWeights& weights,
                       std::vector<TargetStats>& stats, PipelineWeights* momentum,
                       int* epochs_done) {
  weights = zero_like(cfg);
  for (auto& [name, t] : param_list(weights)) {
    const Tensor4& src = ckpt.require(name);
    if (!t->same_shape(src)) {
      throw ConfigError("checkpoint tensor " + name + " has shape " + src.shape_str() +
                        " but the config expects " + t->shape_str());
    }
    *t = src;
  }
  stats.clear();
  for (int s = 0; s < cfg.num_stages; ++s) {
    const Tensor4& st = ckpt.require("stats.stage" + std::to_string(s));
    if (st.h != 2 || st.w != 4) {
      throw ConfigError("checkpoint stats.stage" + std::to_string(s) + " has shape " +
                        st.shape_str());
    }
    TargetStats ts;
    ts.mean = Delta{st.at(0, 0, 0, 0), st.at(0, 0, 0, 1), st.at(0, 0, 0, 2), st.at(0, 0, 0, 3)};
    ts.std = Delta{st.at(0, 0, 1, 0), st.at(0, 0, 1, 1), st.at(0, 0, 1, 2), st.at(0, 0, 1, 3)};
    stats.push_back(ts);
  }
  if (momentum) {
    *momentum = zero_like(cfg);
    for (auto& [name, t] : param_list(*momentum)) {
      const Tensor4* src = ckpt.find("momentum." + name);
      if (src) *t = *src;
    }
  }
  if (epochs_done) {
    const Tensor4* ep = ckpt.find("epoch");
    *epochs_done = ep ? static_cast<int>(ep->data[0]) : 0;
  }
}

std::string metrics_csv_header(int num_stages) {
  std::string h = "epoch,loss_total";
  for (int s = 1; s <= num_stages; ++s) h += ",loss_reg" + std::to_string(s);
  h += ",loss_cls,ar10,ar100\n";
  return h;
}

std::string metrics_csv_row(const MetricsRow& row) {
  char buf[64];
  std::string line = std::to_string(row.epoch);
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), ",%.9g", v);
    line += buf;
  };
  put(row.total);
  for (double v : row.stage_reg) put(v);
  put(row.cls);
  put(row.ar10);
  put(row.ar100);
  line += "\n";
  return line;
}

TrainResult train(const std::vector<Scene>& scenes, const PipelineConfig& pcfg,
                  const TrainConfig& tcfg, const std::string& out_dir, const std::string& tag,
                  const EpochCallback& on_epoch) {
  tcfg.validate(static_cast<int>(scenes.size()));
  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics" + tag + ".csv";
  const std::string ckpt_path = out_dir + "/checkpoint" + tag + ".crpnw";

  const int n_train = static_cast<int>(scenes.size()) - tcfg.val_scenes;
  const std::vector<Scene> train_split(scenes.begin(), scenes.begin() + n_train);
  const std::vector<Scene> val_split(scenes.begin() + n_train, scenes.end());
  std::vector<std::vector<Box>> val_gts;
  for (const auto& s : val_split) val_gts.push_back(s.gts);

  TrainResult result;
  result.stats = pcfg.use_stats ? calibrate_stats(train_split, pcfg, tcfg.threads)
                                : identity_stats(pcfg.num_stages);

  int start_epoch = 0;
  PipelineWeights momentum = zero_like(pcfg);
  if (tcfg.resume && std::filesystem::exists(ckpt_path)) {
    std::vector<TargetStats> stored_stats;
    unpack_checkpoint(load_checkpoint(ckpt_path), pcfg, result.weights, stored_stats, &momentum,
                      &start_epoch);
    // stats are data-derived; the fresh recomputation above stays authoritative
  } else {
    result.weights = init_weights(pcfg, tcfg.seed);
  }

  std::ofstream metrics(metrics_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw ConfigError("cannot open " + metrics_path + " for writing");
  if (start_epoch == 0) metrics << metrics_csv_header(pcfg.num_stages);

  const double lr_base = tcfg.lr * static_cast<double>(tcfg.batch_size) / 16.0;
  const int decay1 = tcfg.epochs * 2 / 3;
  const int decay2 = tcfg.epochs * 11 / 12;

  result.epochs_run = start_epoch;
  std::vector<int> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  struct Slot {
    PipelineWeights grads;
    LossBreakdown losses;
  };

  for (int epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
    double lr = lr_base;
    if (epoch >= decay1) lr *= 0.1;
    if (epoch >= decay2) lr *= 0.1;

    // permutation must be a pure function of (seed, epoch) so a resumed run
    // sees the same batches as an uninterrupted one
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(tcfg.seed, kPurposeShuffle, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double ep_total = 0, ep_cls = 0;
    std::vector<double> ep_reg(static_cast<std::size_t>(pcfg.num_stages), 0.0);

    for (int ofs = 0; ofs < n_train; ofs += tcfg.batch_size) {
      const int bsz = std::min(tcfg.batch_size, n_train - ofs);
      std::vector<Slot> slots(static_cast<std::size_t>(bsz));
      parallel_for(bsz, tcfg.threads, [&](int bi) {
        auto& slot = slots[static_cast<std::size_t>(bi)];
        const Scene& base = train_split[static_cast<std::size_t>(order[static_cast<std::size_t>(ofs + bi)])];
        // (epoch, scene_id) key packed into one item; scene_id fits 32 bits
        const std::uint64_t item = (static_cast<std::uint64_t>(epoch) << 32) |
                                   static_cast<std::uint64_t>(base.scene_id);
        const bool flip =
            tcfg.hflip && Rng(derive_seed(tcfg.seed, kPurposeFlip, item)).uniform() < 0.5;
        const Scene scene = flip ? hflip(base) : base;
        Rng plan_rng(derive_seed(tcfg.seed, kPurposePlan, item));
        slot.grads = zero_like(pcfg);
        slot.losses = image_step(scene.image, scene.gts, pcfg, result.weights, result.stats,
                                 plan_rng, slot.grads);
      });

      PipelineWeights batch_grads = zero_like(pcfg);
      auto acc = param_list(batch_grads);
      double batch_total = 0;
      for (auto& slot : slots) {
        auto gl = param_list(slot.grads);
        for (std::size_t p = 0; p < acc.size(); ++p) {
          auto& dst = acc[p].second->data;
          const auto& src = gl[p].second->data;
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
        }
        batch_total += slot.losses.total;
        ep_total += slot.losses.total;
        ep_cls += slot.losses.cls;
        for (std::size_t s = 0; s < ep_reg.size(); ++s) ep_reg[s] += slot.losses.stage_reg[s];
      }
      check_finite(batch_total, "batch loss");
      const float inv = 1.0f / static_cast<float>(bsz);
      for (auto& [name, t] : acc) {
        for (auto& v : t->data) v *= inv;
      }

      auto params = param_list(result.weights);
      auto moms = param_list(momentum);
      std::vector<Tensor4*> pv;
      std::vector<const Tensor4*> gv;
      std::vector<Tensor4*> vv;
      for (std::size_t p = 0; p < params.size(); ++p) {
        pv.push_back(params[p].second);
        gv.push_back(acc[p].second);
        vv.push_back(moms[p].second);
      }
      sgd_step(pv, gv, static_cast<float>(lr), static_cast<float>(tcfg.momentum), vv);
    }

    MetricsRow row;
    row.epoch = epoch + 1;
    row.total = ep_total / n_train;
    row.cls = ep_cls / n_train;
    for (double v : ep_reg) row.stage_reg.push_back(v / n_train);
    check_finite(row.total, "epoch loss");

    if (!val_split.empty()) {
      const auto proposals = propose_all(val_split, pcfg, result.weights, result.stats, tcfg.threads);
      row.ar10 = average_recall(proposals, val_gts, 10);
      row.ar100 = average_recall(proposals, val_gts, 100);
    }
    metrics << metrics_csv_row(row);
    metrics.flush();
    result.metrics.push_back(row);

    save_checkpoint(pack_checkpoint(result.weights, result.stats, &momentum, epoch + 1), ckpt_path);
    result.epochs_run = epoch + 1;
    if (on_epoch && !on_epoch(row)) break;
  }
  return result;
}

}  // namespace crpn
