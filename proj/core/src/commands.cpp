#include "crpn/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "crpn/checkpoint.hpp"
#include "crpn/errors.hpp"
#include "crpn/eval.hpp"
#include "crpn/synth.hpp"

namespace crpn {

namespace {

using json = nlohmann::json;

void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::vector<Scene> load_dataset(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("dataset not found: " + path);
  return load_scenes(path);
}

}  // namespace

void cmd_gen_data(const RunConfig& rc, const std::string& out_path) {
  rc.dataset.validate();
  ensure_parent(out_path);
  const auto scenes = generate(rc.dataset, rc.train.threads);
  save_scenes(scenes, out_path);
}

TrainResult cmd_train(const RunConfig& rc, const std::string& data_path) {
  PipelineConfig pcfg = rc.pipeline;
  pcfg.validate();
  const auto scenes = load_dataset(data_path);
  return train(scenes, pcfg, rc.train, rc.out_dir, rc.run_tag());
}

void cmd_propose(const RunConfig& rc, const std::string& ckpt_path, const std::string& data_path,
                 const std::string& out_path) {
  PipelineConfig pcfg = rc.pipeline;
  pcfg.validate();
  if (!std::filesystem::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
  PipelineWeights weights;
  std::vector<TargetStats> stats;
  unpack_checkpoint(load_checkpoint(ckpt_path), pcfg, weights, stats, nullptr, nullptr);

  const auto scenes = load_dataset(data_path);
  const auto proposals = propose_all(scenes, pcfg, weights, stats, rc.train.threads);

  ensure_parent(out_path);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + out_path + " for writing");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    json line;
    line["scene_id"] = scenes[i].scene_id;
    json boxes = json::array();
    json scores = json::array();
    for (const auto& sb : proposals[i]) {
      boxes.push_back({sb.box.x, sb.box.y, sb.box.w, sb.box.h});
      scores.push_back(sb.score);
    }
    line["boxes"] = std::move(boxes);
    line["scores"] = std::move(scores);
    out << line.dump() << "\n";
  }
}

void cmd_eval(const RunConfig& rc, const std::string& proposals_path,
              const std::string& data_path, const std::string& out_path) {
  const auto scenes = load_dataset(data_path);
  std::map<std::uint32_t, std::size_t> index;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (!index.emplace(scenes[i].scene_id, i).second) {
      throw FormatError("dataset has duplicate scene_id " + std::to_string(scenes[i].scene_id),
                        0);
    }
  }

  std::ifstream in(proposals_path, std::ios::binary);
  if (!in) throw ConfigError("proposals not found: " + proposals_path);
  std::vector<std::vector<ScoredBox>> proposals(scenes.size());
  std::vector<bool> seen(scenes.size(), false);
  std::string text;
  std::size_t offset = 0;
  while (std::getline(in, text)) {
    const std::size_t line_start = offset;
    offset += text.size() + 1;
    if (text.empty()) continue;
    json line;
    try {
      line = json::parse(text);
    } catch (const json::parse_error&) {
      throw FormatError("proposals line is not valid JSON", line_start);
    }
    std::uint32_t sid = 0;
    std::vector<std::vector<double>> boxes;
    std::vector<double> scores;
    try {
      sid = line.at("scene_id").get<std::uint32_t>();
      boxes = line.at("boxes").get<std::vector<std::vector<double>>>();
      scores = line.at("scores").get<std::vector<double>>();
    } catch (const json::exception&) {
      throw FormatError("proposals line missing scene_id/boxes/scores", line_start);
    }
    const auto it = index.find(sid);
    if (it == index.end()) {
      throw FormatError("proposals reference unknown scene_id " + std::to_string(sid),
                        line_start);
    }
    if (seen[it->second]) {
      throw FormatError("duplicate proposals for scene_id " + std::to_string(sid), line_start);
    }
    seen[it->second] = true;
    if (boxes.size() != scores.size()) {
      throw FormatError("boxes and scores lengths differ", line_start);
    }
    auto& dst = proposals[it->second];
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (boxes[b].size() != 4) throw FormatError("box entry is not [x, y, w, h]", line_start);
      dst.push_back(ScoredBox{Box{boxes[b][0], boxes[b][1], boxes[b][2], boxes[b][3]},
                              scores[b]});
    }
  }

  std::vector<std::vector<Box>> gts;
  for (const auto& s : scenes) gts.push_back(s.gts);
  const auto report =
      build_report(proposals, gts, rc.eval_ks, default_buckets(rc.dataset.max_size));
  ensure_parent(out_path);
  write_report_csv(report, out_path);
}

void cmd_gradcheck(std::uint64_t seed, int instances, const std::string& perturb_op,
                   std::ostream& out) {
  const auto results = run_gradcheck(seed, instances, perturb_op);
  char buf[128];
  out << "op             instances   max_rel_err     tolerance  status\n";
  std::string failed;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%-14s %9d   %11.3e   %11.1e  %s\n", r.op.c_str(),
                  r.instances, r.max_rel_err, r.tolerance, r.pass ? "pass" : "FAIL");
    out << buf;
    if (!r.pass) {
      if (!failed.empty()) failed += ", ";
      failed += r.op;
    }
  }
  if (!failed.empty()) throw NumericError("gradient check failed for: " + failed);
}

}  // namespace crpn
