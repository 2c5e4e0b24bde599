#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "crpn/pipeline.hpp"
#include "crpn/synth.hpp"

namespace crpn {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 0.01;        // at reference batch 16; scaled by batch_size / 16
  double momentum = 0.9;
  int val_scenes = 128;    // taken from the end of the dataset
  std::uint64_t seed = 7;
  int threads = 1;
  bool hflip = true;
  bool resume = false;

  void validate(int num_scenes) const;
};

struct MetricsRow {
  int epoch = 0;
  double total = 0;
  std::vector<double> stage_reg;
  double cls = 0;
  double ar10 = 0;
  double ar100 = 0;
};

struct TrainResult {
  PipelineWeights weights;
  std::vector<TargetStats> stats;
  std::vector<MetricsRow> metrics;
  int epochs_run = 0;
};

// Regression-target statistics per stage, from assignments on the untrained
// geometry; each pass moves positives onto their matched gts before the next
// stage is measured.
std::vector<TargetStats> calibrate_stats(const std::vector<Scene>& train_scenes,
                                         const PipelineConfig& cfg, int threads);

// Proposals for every scene, read-only weights, parallel across scenes.
std::vector<std::vector<ScoredBox>> propose_all(const std::vector<Scene>& scenes,
                                                const PipelineConfig& cfg,
                                                const PipelineWeights& weights,
                                                const std::vector<TargetStats>& stats, int threads);

// Mean best-IoU per stage over all gts of all scenes.
std::vector<double> mean_stage_iou(const std::vector<Scene>& scenes, const PipelineConfig& cfg,
                                   const PipelineWeights& weights,
                                   const std::vector<TargetStats>& stats, int threads);

// Called after each epoch's checkpoint is on disk; return false to stop the
// run early. A stopped run resumes exactly where it left off.
using EpochCallback = std::function<bool(const MetricsRow&)>;

// SGD with momentum; emits metrics<tag>.csv and checkpoint<tag>.crpnw under
// out_dir. Throws NumericError when the loss stops being finite.
TrainResult train(const std::vector<Scene>& scenes, const PipelineConfig& pcfg,
                  const TrainConfig& tcfg, const std::string& out_dir, const std::string& tag,
                  const EpochCallback& on_epoch = {});

// Checkpoint packing: weights + per-stage stats (+ optimizer state for resume).
Checkpoint pack_checkpoint(const PipelineWeights& weights, const std::vector<TargetStats>& stats,
                           const PipelineWeights* momentum, int epochs_done);
void unpack_checkpoint(const Checkpoint& ckpt, const PipelineConfig& cfg, PipelineWeights& weights,
                       std::vector<TargetStats>& stats, PipelineWeights* momentum,
                       int* epochs_done);

std::string metrics_csv_header(int num_stages);
std::string metrics_csv_row(const MetricsRow& row);

}  // namespace crpn
