// Acceptance gate: seven criteria, one pass/fail line each, nonzero exit on
// any failure. Thresholds are pinned here on purpose; loosening one is a
// contract change, not a test fix.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crpn/assign.hpp"
#include "crpn/box.hpp"
#include "crpn/commands.hpp"
#include "crpn/eval.hpp"
#include "crpn/gradcheck.hpp"
#include "crpn/rng.hpp"
#include "crpn/synth.hpp"
#include "crpn/tensor.hpp"
#include "crpn/train.hpp"
#include "test_util.hpp"

using namespace crpn;
using crpn::test::fill_uniform;
using crpn::test::max_abs_diff;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int g_failed = 0;

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

void verdict(int idx, const char* name, bool pass, const std::string& detail) {
  std::printf("criterion %d [%s]: %s %s\n", idx, name, pass ? "pass" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failed;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

// ---- criterion 1: every analytic gradient against central differences ----

void criterion_gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck(7, 50);
  const double secs = seconds_since(t0);
  bool pass = secs < 120.0 && results.size() == 6;
  double worst_op = 0, worst_pipe = 0;
  for (const auto& r : results) {
    pass = pass && r.pass && r.instances >= 50;
    if (r.op == "pipeline") {
      pass = pass && r.tolerance == 1e-3;
      worst_pipe = std::max(worst_pipe, r.max_rel_err);
    } else {
      pass = pass && r.tolerance == 1e-4;
      worst_op = std::max(worst_op, r.max_rel_err);
    }
  }
  verdict(1, "gradient suite", pass,
          fmt("(max rel err %.1e single ops vs 1e-4, %.1e pipeline vs 1e-3, 50 instances each, "
              "%.1fs < 120s)",
              worst_op, worst_pipe, secs));
}

// ---- criterion 2: adaptive convolution degenerates to dilated conv2d ----

void criterion_dilated_equivalence() {
  Rng rng(29);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const int cin = 1 + static_cast<int>(rng.uniform_index(3));
    const int cout = 1 + static_cast<int>(rng.uniform_index(3));
    const int h = 5 + static_cast<int>(rng.uniform_index(8));
    const int w = 5 + static_cast<int>(rng.uniform_index(8));
    const int d = 1 + static_cast<int>(rng.uniform_index(3));
    const int s = 1 + static_cast<int>(rng.uniform_index(2));

    Tensor4 x(1, cin, h, w);
    fill_uniform(x, rng, -1.0, 1.0);
    ConvParams p;
    p.weights = Tensor4(cout, cin, 3, 3);
    p.bias = Tensor4(1, cout, 1, 1);
    fill_uniform(p.weights, rng, -1.0, 1.0);
    fill_uniform(p.bias, rng, -0.5, 0.5);
    p.stride = s;
    p.dilation = d;
    const Tensor4 want = conv2d(x, p);

    Tensor4 got;
    if (i % 2 == 0) {
      // zero offsets at the matching dilation
      const OffsetField zeros(want.h, want.w, 9);
      got = adaptive_conv(x, p, zeros);
    } else {
      // unit grid plus shape offsets that land on the dilation-d grid
      ConvParams p1 = p;
      p1.dilation = 1;
      OffsetField o(want.h, want.w, 9);
      for (int oy = 0; oy < want.h; ++oy)
        for (int ox = 0; ox < want.w; ++ox)
          for (int k = 0; k < 9; ++k) {
            o.dy(oy, ox, k) = static_cast<float>((d - 1) * (k / 3 - 1));
            o.dx(oy, ox, k) = static_cast<float>((d - 1) * (k % 3 - 1));
          }
      got = adaptive_conv(x, p1, o);
    }
    worst = std::max(worst, max_abs_diff(got, want));
  }
  verdict(2, "dilated equivalence", worst < 1e-5,
          fmt("(max abs diff %.2e vs 1e-5, 100 instances)", worst));
}

// ---- criterion 3: geometry and matching against brute-force oracles ----

Box random_box(Rng& rng, double extent) {
  Box b;
  b.w = rng.uniform(2.0, extent / 2);
  b.h = rng.uniform(2.0, extent / 2);
  b.x = rng.uniform(b.w / 2, extent - b.w / 2);
  b.y = rng.uniform(b.h / 2, extent - b.h / 2);
  return b;
}

double iou_oracle(const Box& a, const Box& b) {
  const double ax0 = a.x - a.w / 2, ax1 = a.x + a.w / 2;
  const double ay0 = a.y - a.h / 2, ay1 = a.y + a.h / 2;
  const double bx0 = b.x - b.w / 2, bx1 = b.x + b.w / 2;
  const double by0 = b.y - b.h / 2, by1 = b.y + b.h / 2;
  const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
  const double ih = std::min(ay1, by1) - std::max(ay0, by0);
  if (iw <= 0 || ih <= 0) return 0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

std::vector<ScoredBox> nms_oracle(std::vector<ScoredBox> cands, double thr) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<ScoredBox> kept;
  for (const auto& c : cands) {
    bool dead = false;
    for (const auto& k : kept) {
      if (iou_oracle(c.box, k.box) > thr) dead = true;
    }
    if (!dead) kept.push_back(c);
  }
  return kept;
}

struct OracleAssign {
  std::vector<Label> labels;
  std::vector<int> matched;
};

OracleAssign af_oracle(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                       const AssignmentConfig& cfg) {
  OracleAssign out;
  for (const auto& a : anchors) {
    Label lab = Label::kNegative;
    int match = -1;
    double best_area = 0;
    bool ignored = false;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const Box& t = gts[g];
      const double ctr_w = cfg.sigma_ctr * t.w / 2, ctr_h = cfg.sigma_ctr * t.h / 2;
      const double ign_w = cfg.sigma_ign * t.w / 2, ign_h = cfg.sigma_ign * t.h / 2;
      const double dx = std::abs(a.x - t.x), dy = std::abs(a.y - t.y);
      if (dx <= ctr_w && dy <= ctr_h) {
        const double area = t.w * t.h;
        if (match < 0 || area < best_area) {
          match = static_cast<int>(g);
          best_area = area;
        }
      } else if (dx <= ign_w && dy <= ign_h) {
        ignored = true;
      }
    }
    if (match >= 0) {
      lab = Label::kPositive;
    } else if (ignored) {
      lab = Label::kIgnore;
      match = -1;
    }
    out.labels.push_back(lab);
    out.matched.push_back(match);
  }
  return out;
}

OracleAssign ab_oracle(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                       const AssignmentConfig& cfg) {
  OracleAssign out;
  out.labels.assign(anchors.size(), Label::kNegative);
  out.matched.assign(anchors.size(), -1);
  std::vector<std::vector<double>> m(anchors.size(), std::vector<double>(gts.size(), 0.0));
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t g = 0; g < gts.size(); ++g) m[a][g] = iou_oracle(anchors[a], gts[g]);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m[a][g] > best) {
        best = m[a][g];
        arg = static_cast<int>(g);
      }
    }
    if (best > cfg.iou_pos) {
      out.labels[a] = Label::kPositive;
      out.matched[a] = arg;
    } else if (best < cfg.iou_neg) {
      out.labels[a] = Label::kNegative;
    } else {
      out.labels[a] = Label::kIgnore;
    }
  }
  // every gt drags its best-overlap anchor positive, in gt order
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double best = 0;
    int arg = -1;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (m[a][g] > best) {
        best = m[a][g];
        arg = static_cast<int>(a);
      }
    }
    if (arg >= 0) {
      out.labels[static_cast<std::size_t>(arg)] = Label::kPositive;
      out.matched[static_cast<std::size_t>(arg)] = static_cast<int>(g);
    }
  }
  return out;
}

double recall_oracle(const std::vector<std::vector<ScoredBox>>& proposals,
                     const std::vector<std::vector<Box>>& gts, int k, double thr) {
  int matched = 0, total = 0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    auto props = proposals[img];
    std::stable_sort(props.begin(), props.end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
    if (static_cast<int>(props.size()) > k) props.resize(static_cast<std::size_t>(k));
    std::vector<bool> used(props.size(), false);
    for (const auto& g : gts[img]) {
      ++total;
      double best = -1;
      int arg = -1;
      for (std::size_t p = 0; p < props.size(); ++p) {
        if (used[p]) continue;
        const double v = iou_oracle(props[p].box, g);
        if (v > best) {
          best = v;
          arg = static_cast<int>(p);
        }
      }
      if (arg >= 0 && best >= thr) {
        used[static_cast<std::size_t>(arg)] = true;
        ++matched;
      }
    }
  }
  return static_cast<double>(matched) / total;
}

void criterion_oracles() {
  const auto t0 = Clock::now();
  Rng rng(31);
  double worst = 0;
  bool pass = true;

  // IoU: independent corner arithmetic, exact
  for (int i = 0; i < 200 && pass; ++i) {
    const Box a = random_box(rng, 64), b = random_box(rng, 64);
    if (iou(a, b) != iou_oracle(a, b)) pass = false;
    if (iou(a, b) != iou(b, a)) pass = false;
  }

  // encode/decode round trip
  for (int i = 0; i < 200; ++i) {
    const Box a = random_box(rng, 64), t = random_box(rng, 64);
    const Box back = decode(a, encode(a, t));
    worst = std::max({worst, std::abs(back.x - t.x), std::abs(back.y - t.y),
                      std::abs(back.w - t.w), std::abs(back.h - t.h)});
  }
  pass = pass && worst < 1e-6;

  // NMS against mark-and-sweep, exact sequence equality; coarse scores force ties
  for (int trial = 0; trial < 60 && pass; ++trial) {
    std::vector<ScoredBox> cands;
    const int n = 20 + static_cast<int>(rng.uniform_index(80));
    for (int i = 0; i < n; ++i) {
      cands.push_back({random_box(rng, 48), static_cast<double>(rng.uniform_index(8)) / 8.0});
    }
    const double thr = 0.3 + 0.25 * static_cast<double>(rng.uniform_index(3));
    const auto got = nms(cands, thr);
    const auto want = nms_oracle(cands, thr);
    if (got.size() != want.size()) pass = false;
    for (std::size_t i = 0; pass && i < got.size(); ++i) {
      if (got[i].score != want[i].score || got[i].box.x != want[i].box.x ||
          got[i].box.y != want[i].box.y || got[i].box.w != want[i].box.w ||
          got[i].box.h != want[i].box.h) {
        pass = false;
      }
    }
  }

  // both assigners against per-anchor scans, exact labels and matches
  for (int trial = 0; trial < 30 && pass; ++trial) {
    std::vector<Box> anchors, gts;
    const int na = 50 + static_cast<int>(rng.uniform_index(250));
    const int ng = 1 + static_cast<int>(rng.uniform_index(12));
    for (int i = 0; i < na; ++i) anchors.push_back(random_box(rng, 64));
    for (int i = 0; i < ng; ++i) gts.push_back(random_box(rng, 64));
    AssignmentConfig cfg;
    const auto af = assign_anchor_free(anchors, gts, cfg);
    const auto afo = af_oracle(anchors, gts, cfg);
    const auto ab = assign_anchor_based(anchors, gts, cfg);
    const auto abo = ab_oracle(anchors, gts, cfg);
    for (int i = 0; i < na; ++i) {
      const auto s = static_cast<std::size_t>(i);
      if (af.labels[s] != afo.labels[s] || af.matched_gt[s] != afo.matched[s]) pass = false;
      if (ab.labels[s] != abo.labels[s] || ab.matched_gt[s] != abo.matched[s]) pass = false;
      if (pass && af.labels[s] == Label::kPositive) {
        const Delta t = af.targets[s];
        const Box& g = gts[static_cast<std::size_t>(af.matched_gt[s])];
        const Box& a = anchors[s];
        if (t.dx != (g.x - a.x) / a.w || t.dy != (g.y - a.y) / a.h ||
            t.dw != std::log(g.w / a.w) || t.dh != std::log(g.h / a.h)) {
          pass = false;
        }
      }
    }
  }

  // AR against an IoU-matrix greedy matcher
  double ar_diff = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<ScoredBox>> proposals(8);
    std::vector<std::vector<Box>> gts(8);
    for (int img = 0; img < 8; ++img) {
      const int ng = 1 + static_cast<int>(rng.uniform_index(4));
      for (int g = 0; g < ng; ++g) gts[static_cast<std::size_t>(img)].push_back(random_box(rng, 64));
      const int np = static_cast<int>(rng.uniform_index(40));
      for (int p = 0; p < np; ++p) {
        proposals[static_cast<std::size_t>(img)].push_back(
            {random_box(rng, 64), static_cast<double>(rng.uniform_index(16)) / 16.0});
      }
    }
    for (int k : {10, 100}) {
      double oracle_sum = 0;
      for (double thr : ar_thresholds()) oracle_sum += recall_oracle(proposals, gts, k, thr);
      ar_diff = std::max(ar_diff, std::abs(average_recall(proposals, gts, k) - oracle_sum / 10.0));
      ar_diff = std::max(ar_diff,
                         std::abs(recall_at(proposals, gts, k, 0.5) -
                                  recall_oracle(proposals, gts, k, 0.5)));
    }
  }
  pass = pass && ar_diff <= 1e-12;

  const double secs = seconds_since(t0);
  pass = pass && secs < 60.0;
  verdict(3, "oracle suite", pass,
          fmt("(round trip %.1e vs 1e-6, AR diff %.1e vs 1e-12, labels and NMS exact, %.1fs < "
              "60s)",
              worst, ar_diff, secs));
}

// ---- criteria 4-6: the fixed training benchmark ----

struct RunOutcome {
  double ar100 = 0;
  double iou_stage1 = 0;
  double iou_stage2 = 0;
};

RunOutcome run_benchmark(const std::vector<Scene>& scenes, const PipelineConfig& pcfg,
                         std::uint64_t seed, const std::string& name, bool stage_iou) {
  TrainConfig tcfg;  // 20 epochs, batch 8, lr 0.02, 128 validation scenes
  tcfg.seed = seed;
  const fs::path dir = fs::temp_directory_path() / "crpn_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto t0 = Clock::now();
  const auto result = train(scenes, pcfg, tcfg, dir.string(), "");
  RunOutcome out;
  out.ar100 = result.metrics.back().ar100;
  if (stage_iou) {
    const std::vector<Scene> val(scenes.end() - tcfg.val_scenes, scenes.end());
    const auto ious = mean_stage_iou(val, pcfg, result.weights, result.stats, tcfg.threads);
    out.iou_stage1 = ious[0];
    out.iou_stage2 = ious[1];
  }
  std::printf("  run %-10s seed %2llu: AR_100 %.4f  (%.0fs)\n", name.c_str(),
              static_cast<unsigned long long>(seed), out.ar100, seconds_since(t0));
  std::fflush(stdout);
  fs::remove_all(dir);
  return out;
}

void criteria_benchmark() {
  DatasetSpec spec;  // 640 scenes at 64 px, 512 train / 128 val
  spec.seed = 7;
  const auto scenes = generate(spec);

  PipelineConfig base;
  base.validate();
  PipelineConfig noalign = base;
  noalign.align = false;
  PipelineConfig t1 = base;
  t1.num_stages = 1;
  t1.loss_weights.alpha = {1.0};
  t1.validate();
  PipelineConfig af = base;
  af.metric = MetricMode::kAnchorFreeOnly;
  PipelineConfig ab = base;
  ab.metric = MetricMode::kAnchorBasedOnly;

  std::vector<double> ar_base, ar_noalign, ar_t1, ar_af, ar_ab, iou1, iou2;
  for (std::uint64_t seed : {7, 8, 9}) {
    const auto r = run_benchmark(scenes, base, seed, "aligned_s" + std::to_string(seed), true);
    ar_base.push_back(r.ar100);
    iou1.push_back(r.iou_stage1);
    iou2.push_back(r.iou_stage2);
  }
  for (std::uint64_t seed : {7, 8, 9}) {
    ar_noalign.push_back(
        run_benchmark(scenes, noalign, seed, "noalign_s" + std::to_string(seed), false).ar100);
  }
  for (std::uint64_t seed : {7, 8, 9}) {
    ar_t1.push_back(run_benchmark(scenes, t1, seed, "t1_s" + std::to_string(seed), false).ar100);
  }
  for (std::uint64_t seed : {7, 8, 9}) {
    ar_af.push_back(run_benchmark(scenes, af, seed, "af_s" + std::to_string(seed), false).ar100);
  }
  for (std::uint64_t seed : {7, 8, 9}) {
    ar_ab.push_back(run_benchmark(scenes, ab, seed, "ab_s" + std::to_string(seed), false).ar100);
  }

  const double med = median3(ar_base);
  const double med_noalign = median3(ar_noalign);
  const double med_t1 = median3(ar_t1);
  const double med_af = median3(ar_af);
  const double med_ab = median3(ar_ab);
  const double med_iou1 = median3(iou1);
  const double med_iou2 = median3(iou2);

  verdict(4, "refinement trend", med >= med_noalign + 0.03 && med >= med_t1 + 0.03,
          fmt("(median AR_100 aligned %.4f vs no-align %.4f and one-stage %.4f, margin 0.03)",
              med, med_noalign, med_t1));
  verdict(5, "metric incorporation", med >= std::max(med_af, med_ab) - 0.01,
          fmt("(median AR_100 mixed %.4f vs anchor-free %.4f, anchor-based %.4f, margin -0.01)",
              med, med_af, med_ab));
  verdict(6, "stage IoU improvement", med_iou2 >= med_iou1 + 0.05,
          fmt("(median val mean IoU stage 2 %.4f vs stage 1 %.4f, margin 0.05)", med_iou2,
              med_iou1));
}

// ---- criterion 7: byte-level determinism of cmd_train ----

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "crpn_acceptance" / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);

  RunConfig rc;
  rc.dataset.num_scenes = 96;
  rc.dataset.seed = 7;
  rc.train.epochs = 4;
  rc.train.val_scenes = 24;
  const std::string data = (root / "bench.crpnd").string();
  cmd_gen_data(rc, data);

  std::vector<std::pair<std::string, std::string>> outputs;
  int variant = 0;
  for (int threads : {1, 4, 1}) {
    rc.train.threads = threads;
    rc.out_dir = (root / ("out" + std::to_string(variant++))).string();
    cmd_train(rc, data);
    outputs.emplace_back(slurp(rc.out_dir + "/checkpoint.crpnw"),
                         slurp(rc.out_dir + "/metrics.csv"));
  }
  bool pass = !outputs[0].first.empty() && !outputs[0].second.empty();
  for (std::size_t i = 1; i < outputs.size(); ++i) {
    pass = pass && outputs[i] == outputs[0];
  }
  fs::remove_all(root);
  verdict(7, "determinism", pass,
          "(checkpoint and metrics byte-identical across a repeat and --threads 1 vs 4)");
}

}  // namespace

int main() {
  std::printf("acceptance gate\n");
  try {
    criterion_gradients();
    criterion_dilated_equivalence();
    criterion_oracles();
    criteria_benchmark();
    criterion_determinism();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d of 7 criteria passed\n", 7 - g_failed);
  return g_failed == 0 ? 0 : 1;
}
