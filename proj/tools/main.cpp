#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "crpn/commands.hpp"
#include "crpn/config.hpp"
#include "crpn/errors.hpp"

namespace {

struct Shared {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 0;
  int stages = 0;
  bool no_align = false;
  std::string metric;
  bool no_stats = false;
  bool no_iou_loss = false;
  double nms_thr = 0;
  int max_proposals = 0;
};

void add_shared(CLI::App* sub, Shared& sh) {
  sub->add_option("--config", sh.config, "JSON config file (defaults apply when omitted)");
  sub->add_option("--seed", sh.seed, "seed override (dataset generation and training)");
  sub->add_option("--threads", sh.threads, "worker threads; outputs do not depend on it");
  sub->add_option("--stages", sh.stages, "refinement stage count override");
  sub->add_flag("--no-align", sh.no_align, "regular dilated sampling instead of anchor-aligned");
  sub->add_option("--metric", sh.metric, "assignment metric schedule: af, ab, or afab")
      ->check(CLI::IsMember({"af", "ab", "afab"}));
  sub->add_flag("--no-stats", sh.no_stats, "skip target normalization statistics");
  sub->add_flag("--no-iou-loss", sh.no_iou_loss, "smooth L1 at the final stage as well");
  sub->add_option("--nms-thr", sh.nms_thr, "NMS IoU threshold");
  sub->add_option("--max-proposals", sh.max_proposals, "proposal cap after NMS");
}

crpn::RunConfig build_config(CLI::App* sub, const Shared& sh) {
  crpn::RunConfig rc = crpn::load_run_config(sh.config);
  if (sub->count("--seed")) {
    rc.train.seed = sh.seed;
    rc.dataset.seed = sh.seed;
  }
  if (sub->count("--threads")) rc.train.threads = sh.threads;
  if (sub->count("--stages")) rc.set_stages(sh.stages);
  if (sh.no_align) rc.pipeline.align = false;
  if (sub->count("--metric")) rc.pipeline.metric = crpn::parse_metric_mode(sh.metric);
  if (sh.no_stats) rc.pipeline.use_stats = false;
  if (sh.no_iou_loss) rc.pipeline.use_iou_loss = false;
  if (sub->count("--nms-thr")) rc.pipeline.nms_threshold = sh.nms_thr;
  if (sub->count("--max-proposals")) rc.pipeline.max_proposals = sh.max_proposals;
  rc.dataset.validate();
  rc.pipeline.validate();
  return rc;
}

int run(int argc, char** argv) {
  CLI::App app{"multi-stage region proposal pipeline on synthetic scenes"};
  app.require_subcommand(1);
  Shared sh;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  add_shared(gen, sh);
  std::string gen_out;
  gen->add_option("-o,--out", gen_out, "dataset path (default <out_dir>/dataset.crpnd)");
  gen->callback([&] {
    const auto rc = build_config(gen, sh);
    const std::string out = gen_out.empty() ? rc.out_dir + "/dataset.crpnd" : gen_out;
    crpn::cmd_gen_data(rc, out);
    std::printf("wrote %s (%d scenes)\n", out.c_str(), rc.dataset.num_scenes);
  });

  auto* tr = app.add_subcommand("train", "train and write checkpoint + metrics CSV");
  add_shared(tr, sh);
  std::string tr_data, tr_out_dir;
  bool tr_resume = false;
  tr->add_option("--data", tr_data, "dataset file")->required();
  tr->add_option("--out-dir", tr_out_dir, "output directory override");
  tr->add_flag("--resume", tr_resume, "continue from the checkpoint in the output directory");
  tr->callback([&] {
    auto rc = build_config(tr, sh);
    if (!tr_out_dir.empty()) rc.out_dir = tr_out_dir;
    if (tr_resume) rc.train.resume = true;
    const auto result = crpn::cmd_train(rc, tr_data);
    const std::string tag = rc.run_tag();
    std::printf("trained %d epochs", result.epochs_run);
    if (!result.metrics.empty()) {
      std::printf(", final loss %.4f, val AR_100 %.4f", result.metrics.back().total,
                  result.metrics.back().ar100);
    }
    std::printf("\nwrote %s/metrics%s.csv and %s/checkpoint%s.crpnw\n", rc.out_dir.c_str(),
                tag.c_str(), rc.out_dir.c_str(), tag.c_str());
  });

  auto* pr = app.add_subcommand("propose", "write proposals as JSON lines");
  add_shared(pr, sh);
  std::string pr_ckpt, pr_data, pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--data", pr_data, "dataset file")->required();
  pr->add_option("-o,--out", pr_out, "output path (default <out_dir>/proposals.jsonl)");
  pr->callback([&] {
    const auto rc = build_config(pr, sh);
    const std::string out = pr_out.empty() ? rc.out_dir + "/proposals.jsonl" : pr_out;
    crpn::cmd_propose(rc, pr_ckpt, pr_data, out);
    std::printf("wrote %s\n", out.c_str());
  });

  auto* ev = app.add_subcommand("eval", "recall report CSV from proposals and a dataset");
  add_shared(ev, sh);
  std::string ev_props, ev_data, ev_out;
  ev->add_option("--proposals", ev_props, "proposals JSON-lines file")->required();
  ev->add_option("--data", ev_data, "dataset file")->required();
  ev->add_option("-o,--out", ev_out, "output path (default <out_dir>/recall_report.csv)");
  ev->callback([&] {
    const auto rc = build_config(ev, sh);
    const std::string out = ev_out.empty() ? rc.out_dir + "/recall_report.csv" : ev_out;
    crpn::cmd_eval(rc, ev_props, ev_data, out);
    std::printf("wrote %s\n", out.c_str());
  });

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  std::uint64_t gc_seed = 7;
  int gc_instances = 50;
  std::string gc_perturb;
  gc->add_option("--seed", gc_seed, "random seed");
  gc->add_option("--instances", gc_instances, "instances per op")->check(CLI::PositiveNumber);
  gc->add_option("--perturb-op", gc_perturb, "verification hook: corrupt that op's gradient");
  gc->callback([&] { crpn::cmd_gradcheck(gc_seed, gc_instances, gc_perturb, std::cout); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const crpn::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const crpn::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const crpn::StatsError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const crpn::GenerationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const crpn::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
