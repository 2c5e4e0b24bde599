#include <benchmark/benchmark.h>

#include "crpn/assign.hpp"
#include "crpn/box.hpp"
#include "crpn/pipeline.hpp"
#include "crpn/rng.hpp"
#include "crpn/synth.hpp"
#include "crpn/train.hpp"

using namespace crpn;

namespace {

Tensor4 random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor4 t(n, c, h, w);
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

ConvParams head_params() {
  ConvParams p;
  p.weights = random_tensor(32, 32, 3, 3, 1);
  p.bias = random_tensor(1, 32, 1, 1, 2);
  p.dilation = 2;
  return p;
}

// anchors for a 16x16 stride-4 grid, the larger of the two default levels
std::vector<Box> grid_anchors() {
  return build_anchor_level(64, 64, 4, 16).anchors;
}

std::vector<Box> some_gts() {
  Rng rng(5);
  std::vector<Box> gts;
  for (int i = 0; i < 3; ++i) {
    const double w = rng.uniform(8.0, 24.0), h = rng.uniform(8.0, 24.0);
    gts.push_back({rng.uniform(w / 2, 64 - w / 2), rng.uniform(h / 2, 64 - h / 2), w, h});
  }
  return gts;
}

void BM_Conv2d(benchmark::State& state) {
  const auto x = random_tensor(1, 32, 16, 16, 3);
  const auto p = head_params();
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
}
BENCHMARK(BM_Conv2d);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto x = random_tensor(1, 32, 16, 16, 3);
  const auto p = head_params();
  const auto gy = random_tensor(1, 32, 16, 16, 4);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_backward(gy, x, p));
}
BENCHMARK(BM_Conv2dBackward);

void BM_AdaptiveConv(benchmark::State& state) {
  const auto x = random_tensor(1, 32, 16, 16, 3);
  const auto p = head_params();
  const auto offs = anchor_offsets<float>(grid_anchors(), 16, 16, 3, 3, 4, p.dilation);
  for (auto _ : state) benchmark::DoNotOptimize(adaptive_conv(x, p, offs));
}
BENCHMARK(BM_AdaptiveConv);

void BM_AdaptiveConvBackward(benchmark::State& state) {
  const auto x = random_tensor(1, 32, 16, 16, 3);
  const auto p = head_params();
  const auto offs = anchor_offsets<float>(grid_anchors(), 16, 16, 3, 3, 4, p.dilation);
  const auto gy = random_tensor(1, 32, 16, 16, 4);
  for (auto _ : state) benchmark::DoNotOptimize(adaptive_conv_backward(gy, x, p, offs));
}
BENCHMARK(BM_AdaptiveConvBackward);

void BM_Nms(benchmark::State& state) {
  Rng rng(7);
  std::vector<ScoredBox> cands;
  for (int i = 0; i < 1000; ++i) {
    const double w = rng.uniform(4.0, 32.0), h = rng.uniform(4.0, 32.0);
    cands.push_back({{rng.uniform(w / 2, 64 - w / 2), rng.uniform(h / 2, 64 - h / 2), w, h},
                     rng.uniform()});
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(cands, 0.8));
}
BENCHMARK(BM_Nms);

void BM_AssignAnchorFree(benchmark::State& state) {
  const auto anchors = grid_anchors();
  const auto gts = some_gts();
  const AssignmentConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(assign_anchor_free(anchors, gts, cfg));
}
BENCHMARK(BM_AssignAnchorFree);

void BM_AssignAnchorBased(benchmark::State& state) {
  const auto anchors = grid_anchors();
  const auto gts = some_gts();
  const AssignmentConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(assign_anchor_based(anchors, gts, cfg));
}
BENCHMARK(BM_AssignAnchorBased);

void BM_CascadeForward(benchmark::State& state) {
  PipelineConfig cfg;
  cfg.validate();
  const auto weights = init_weights(cfg, 7);
  const auto stats = identity_stats(cfg.num_stages);
  const auto image = random_tensor(1, 3, 64, 64, 9);
  for (auto _ : state) benchmark::DoNotOptimize(run_cascade(image, cfg, weights, stats));
}
BENCHMARK(BM_CascadeForward);

void BM_ImageStep(benchmark::State& state) {
  PipelineConfig cfg;
  cfg.validate();
  const auto weights = init_weights(cfg, 7);
  const auto stats = identity_stats(cfg.num_stages);
  DatasetSpec spec;
  spec.num_scenes = 1;
  const auto scenes = generate(spec);
  for (auto _ : state) {
    Rng plan_rng(11);
    auto grads = zero_like(cfg);
    benchmark::DoNotOptimize(
        image_step(scenes[0].image, scenes[0].gts, cfg, weights, stats, plan_rng, grads));
  }
}
BENCHMARK(BM_ImageStep);

void BM_Proposals(benchmark::State& state) {
  PipelineConfig cfg;
  cfg.validate();
  const auto weights = init_weights(cfg, 7);
  const auto stats = identity_stats(cfg.num_stages);
  const auto image = random_tensor(1, 3, 64, 64, 13);
  const auto trace = run_cascade(image, cfg, weights, stats);
  for (auto _ : state) benchmark::DoNotOptimize(derive_proposals(trace, cfg));
}
BENCHMARK(BM_Proposals);

}  // namespace

BENCHMARK_MAIN();
