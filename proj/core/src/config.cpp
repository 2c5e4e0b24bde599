#include "crpn/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

#include "crpn/errors.hpp"

namespace crpn {

namespace {

using json = nlohmann::json;

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  throw ConfigError("config: " + where + ": " + what);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) bad(where, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known =
        std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; });
    if (!known) bad(where, "unknown key \"" + it.key() + "\"");
  }
}

template <typename T>
void take(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    bad(where, "key \"" + std::string(key) + "\" has the wrong type");
  }
}

void parse_dataset(const json& j, DatasetSpec& d) {
  const std::string where = "dataset";
  check_keys(j, where,
             {"num_scenes", "image_size", "channels", "min_objects", "max_objects", "min_size",
              "max_size", "ar_min", "ar_max", "noise", "falloff", "seed"});
  take(j, where, "num_scenes", d.num_scenes);
  take(j, where, "image_size", d.image_size);
  take(j, where, "channels", d.channels);
  take(j, where, "min_objects", d.min_objects);
  take(j, where, "max_objects", d.max_objects);
  take(j, where, "min_size", d.min_size);
  take(j, where, "max_size", d.max_size);
  take(j, where, "ar_min", d.ar_min);
  take(j, where, "ar_max", d.ar_max);
  take(j, where, "noise", d.noise);
  take(j, where, "falloff", d.falloff);
  take(j, where, "seed", d.seed);
}

void parse_levels(const json& j, PipelineConfig& p) {
  if (!j.is_array() || j.empty()) bad("pipeline.levels", "expected a non-empty array");
  p.levels.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string where = "pipeline.levels[" + std::to_string(i) + "]";
    check_keys(j[i], where, {"block", "base_size"});
    LevelSpec lv;
    take(j[i], where, "block", lv.block);
    take(j[i], where, "base_size", lv.base_size);
    p.levels.push_back(lv);
  }
}

void parse_pipeline(const json& j, RunConfig& rc) {
  PipelineConfig& p = rc.pipeline;
  const std::string where = "pipeline";
  check_keys(j, where,
             {"num_stages", "align", "metric", "use_stats", "use_iou_loss", "nms_threshold",
              "max_proposals", "backbone_widths", "backbone_downsamples", "levels",
              "head_channels", "head_kernel", "head_dilation", "sigma_ctr", "sigma_ign",
              "iou_pos", "iou_neg", "iou_pos_late", "lambda", "alpha", "cls_samples_cap"});
  if (j.contains("num_stages")) {
    int n = p.num_stages;
    take(j, where, "num_stages", n);
    rc.set_stages(n);
  }
  take(j, where, "align", p.align);
  if (j.contains("metric")) {
    std::string m;
    take(j, where, "metric", m);
    p.metric = parse_metric_mode(m);
  }
  take(j, where, "use_stats", p.use_stats);
  take(j, where, "use_iou_loss", p.use_iou_loss);
  take(j, where, "nms_threshold", p.nms_threshold);
  take(j, where, "max_proposals", p.max_proposals);
  take(j, where, "backbone_widths", p.backbone_widths);
  take(j, where, "backbone_downsamples", p.backbone_downsamples);
  if (j.contains("levels")) parse_levels(j.at("levels"), p);
  take(j, where, "head_channels", p.head_channels);
  take(j, where, "head_kernel", p.head_kernel);
  take(j, where, "head_dilation", p.head_dilation);
  take(j, where, "sigma_ctr", p.sigma_ctr);
  take(j, where, "sigma_ign", p.sigma_ign);
  take(j, where, "iou_pos", p.iou_pos);
  take(j, where, "iou_neg", p.iou_neg);
  take(j, where, "iou_pos_late", p.iou_pos_late);
  take(j, where, "lambda", p.loss_weights.lambda);
  take(j, where, "alpha", p.loss_weights.alpha);
  take(j, where, "cls_samples_cap", p.cls_samples_cap);
}

void parse_train(const json& j, TrainConfig& t) {
  const std::string where = "train";
  check_keys(j, where,
             {"epochs", "batch_size", "lr", "momentum", "val_scenes", "seed", "threads", "hflip",
              "resume"});
  take(j, where, "epochs", t.epochs);
  take(j, where, "batch_size", t.batch_size);
  take(j, where, "lr", t.lr);
  take(j, where, "momentum", t.momentum);
  take(j, where, "val_scenes", t.val_scenes);
  take(j, where, "seed", t.seed);
  take(j, where, "threads", t.threads);
  take(j, where, "hflip", t.hflip);
  take(j, where, "resume", t.resume);
}

}  // namespace

void RunConfig::set_stages(int n) {
  pipeline.num_stages = n;
  pipeline.loss_weights.alpha.assign(static_cast<std::size_t>(std::max(n, 0)), 1.0);
}

std::string RunConfig::run_tag() const {
  std::string tag;
  if (!pipeline.align) tag += "_noalign";
  if (pipeline.num_stages != 2) tag += "_t" + std::to_string(pipeline.num_stages);
  if (pipeline.metric == MetricMode::kAnchorFreeOnly) tag += "_af";
  if (pipeline.metric == MetricMode::kAnchorBasedOnly) tag += "_ab";
  if (!pipeline.use_stats) tag += "_nostats";
  if (!pipeline.use_iou_loss) tag += "_noiou";
  return tag;
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: not valid JSON at byte " + std::to_string(e.byte));
  }
  RunConfig rc;
  check_keys(j, "top level", {"dataset", "pipeline", "train", "out_dir", "eval_ks"});
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), rc.dataset);
  if (j.contains("pipeline")) parse_pipeline(j.at("pipeline"), rc);
  if (j.contains("train")) parse_train(j.at("train"), rc.train);
  take(j, "top level", "out_dir", rc.out_dir);
  take(j, "top level", "eval_ks", rc.eval_ks);

  // One source of truth for channel count.
  rc.pipeline.image_channels = rc.dataset.channels;

  if (rc.eval_ks.empty()) bad("eval_ks", "must not be empty");
  for (int k : rc.eval_ks) {
    if (k < 1) bad("eval_ks", "entries must be >= 1");
  }
  std::sort(rc.eval_ks.begin(), rc.eval_ks.end());
  rc.eval_ks.erase(std::unique(rc.eval_ks.begin(), rc.eval_ks.end()), rc.eval_ks.end());
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace crpn
