#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crpn/commands.hpp"
#include "crpn/errors.hpp"
#include "crpn/synth.hpp"

using namespace crpn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

RunConfig small_run(const TempDir& dir) {
  RunConfig rc = parse_run_config(R"({
    "dataset": {"num_scenes": 14, "image_size": 32, "channels": 1,
                "min_size": 6, "max_size": 14, "seed": 5},
    "pipeline": {"backbone_widths": [6, 8], "backbone_downsamples": [2, 2],
                 "levels": [{"block": 1, "base_size": 8}], "head_channels": 8},
    "train": {"epochs": 2, "batch_size": 4, "val_scenes": 4, "seed": 3},
    "eval_ks": [10, 100]
  })");
  rc.out_dir = dir / "out";
  return rc;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("the four file-level commands chain into a working run") {
  TempDir dir("crpn_cli_chain");
  auto rc = small_run(dir);
  const std::string data = dir / "train.crpnd";

  cmd_gen_data(rc, data);
  const auto scenes = load_scenes(data);
  CHECK(scenes.size() == 14);
  CHECK(scenes[0].image.c == 1);

  const auto result = cmd_train(rc, data);
  CHECK(result.epochs_run == 2);
  CHECK(fs::exists(rc.out_dir + "/checkpoint.crpnw"));
  CHECK(fs::exists(rc.out_dir + "/metrics.csv"));
  const auto metrics = slurp(rc.out_dir + "/metrics.csv");
  CHECK(metrics.rfind("epoch,loss_total,", 0) == 0);
  // header plus one row per epoch
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);

  const std::string props = dir / "proposals.jsonl";
  cmd_propose(rc, rc.out_dir + "/checkpoint.crpnw", data, props);
  std::ifstream in(props);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("scene_id").get<std::uint32_t>() == scenes[lines].scene_id);
    const auto boxes = j.at("boxes").get<std::vector<std::vector<double>>>();
    const auto scores = j.at("scores").get<std::vector<double>>();
    REQUIRE(boxes.size() == scores.size());
    CHECK(!boxes.empty());
    // boxes are center-form [x, y, w, h], clipped into the image
    for (const auto& b : boxes) {
      REQUIRE(b.size() == 4);
      CHECK(b[0] - b[2] / 2 >= -1e-6);
      CHECK(b[1] - b[3] / 2 >= -1e-6);
      CHECK(b[0] + b[2] / 2 <= 32.0 + 1e-6);
      CHECK(b[1] + b[3] / 2 <= 32.0 + 1e-6);
    }
    for (std::size_t i = 1; i < scores.size(); ++i) CHECK(scores[i] <= scores[i - 1]);
    ++lines;
  }
  CHECK(lines == 14);

  const std::string report = dir / "recall.csv";
  cmd_eval(rc, props, data, report);
  const auto csv = slurp(report);
  CHECK(csv.find("k,iou_threshold,recall") != std::string::npos);
  CHECK(csv.find("k,AR") != std::string::npos);
  CHECK(csv.find("k,bucket,AR,gt_count") != std::string::npos);
}

TEST_CASE("ablation switches rename the training outputs") {
  TempDir dir("crpn_cli_tag");
  auto rc = small_run(dir);
  rc.dataset.num_scenes = 8;
  rc.train.val_scenes = 2;
  rc.train.epochs = 1;
  rc.pipeline.align = false;
  const std::string data = dir / "train.crpnd";
  cmd_gen_data(rc, data);
  cmd_train(rc, data);
  CHECK(fs::exists(rc.out_dir + "/checkpoint_noalign.crpnw"));
  CHECK(fs::exists(rc.out_dir + "/metrics_noalign.csv"));
  CHECK_FALSE(fs::exists(rc.out_dir + "/checkpoint.crpnw"));
}

TEST_CASE("repeating a run reproduces its outputs byte for byte") {
  TempDir dir("crpn_cli_repeat");
  auto rc = small_run(dir);
  rc.dataset.num_scenes = 10;
  rc.train.val_scenes = 2;
  const std::string data = dir / "train.crpnd";
  cmd_gen_data(rc, data);

  cmd_train(rc, data);
  const auto ckpt1 = slurp(rc.out_dir + "/checkpoint.crpnw");
  const auto metrics1 = slurp(rc.out_dir + "/metrics.csv");

  rc.out_dir = dir / "out2";
  cmd_train(rc, data);
  CHECK(slurp(rc.out_dir + "/checkpoint.crpnw") == ckpt1);
  CHECK(slurp(rc.out_dir + "/metrics.csv") == metrics1);
}

TEST_CASE("missing inputs are configuration errors") {
  TempDir dir("crpn_cli_missing");
  auto rc = small_run(dir);
  CHECK_THROWS_AS(cmd_train(rc, dir / "nope.crpnd"), ConfigError);
  CHECK_THROWS_AS(cmd_propose(rc, dir / "nope.crpnw", dir / "nope.crpnd", dir / "p.jsonl"),
                  ConfigError);
  CHECK_THROWS_AS(cmd_eval(rc, dir / "nope.jsonl", dir / "nope.crpnd", dir / "r.csv"),
                  ConfigError);
  rc.dataset.max_size = 64.0;  // larger than the 32 px image
  CHECK_THROWS_AS(cmd_gen_data(rc, dir / "bad.crpnd"), ConfigError);
}

TEST_CASE("malformed proposal files are rejected with a location") {
  TempDir dir("crpn_cli_badprops");
  auto rc = small_run(dir);
  rc.dataset.num_scenes = 3;
  const std::string data = dir / "train.crpnd";
  cmd_gen_data(rc, data);

  auto write_props = [&](const std::string& text) {
    std::ofstream out(dir / "p.jsonl", std::ios::trunc);
    out << text;
  };

  write_props("this is not json\n");
  CHECK_THROWS_AS(cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv"), FormatError);

  write_props(R"({"scene_id": 999, "boxes": [], "scores": []})" "\n");
  CHECK_THROWS_AS(cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv"), FormatError);

  write_props(R"({"scene_id": 0, "boxes": [[1,1,2,2]], "scores": []})" "\n");
  CHECK_THROWS_AS(cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv"), FormatError);

  write_props(R"({"scene_id": 0, "boxes": [[1,1,2]], "scores": [0.5]})" "\n");
  CHECK_THROWS_AS(cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv"), FormatError);

  write_props(R"({"scene_id": 0, "boxes": [], "scores": []})" "\n"
              R"({"scene_id": 0, "boxes": [], "scores": []})" "\n");
  try {
    cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv");
    FAIL("duplicate scene line should have thrown");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    CHECK(e.offset > 0);
  }
}

TEST_CASE("scenes without proposal lines count as missed, not as errors") {
  TempDir dir("crpn_cli_sparse");
  auto rc = small_run(dir);
  rc.dataset.num_scenes = 3;
  const std::string data = dir / "train.crpnd";
  cmd_gen_data(rc, data);
  const auto scenes = load_scenes(data);
  // one perfect line for scene 0 only
  nlohmann::json line;
  line["scene_id"] = scenes[0].scene_id;
  auto boxes = nlohmann::json::array();
  for (const auto& g : scenes[0].gts) boxes.push_back({g.x, g.y, g.w, g.h});
  auto scores = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes[0].gts.size(); ++i) scores.push_back(1.0 - 0.01 * i);
  line["boxes"] = boxes;
  line["scores"] = scores;
  {
    std::ofstream out(dir / "p.jsonl", std::ios::trunc);
    out << line.dump() << "\n";
  }
  cmd_eval(rc, dir / "p.jsonl", data, dir / "r.csv");
  const auto csv = slurp(dir / "r.csv");
  CHECK(csv.find("k,AR") != std::string::npos);
}
