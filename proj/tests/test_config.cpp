#include <doctest.h>

#include <string>

#include "crpn/config.hpp"
#include "crpn/errors.hpp"

using namespace crpn;

TEST_CASE("an empty document keeps every default") {
  const auto rc = parse_run_config("{}");
  CHECK(rc.dataset.num_scenes == 640);
  CHECK(rc.dataset.image_size == 64);
  CHECK(rc.pipeline.num_stages == 2);
  CHECK(rc.pipeline.align);
  CHECK(rc.pipeline.metric == MetricMode::kMixed);
  CHECK(rc.pipeline.nms_threshold == doctest::Approx(0.8));
  CHECK(rc.pipeline.max_proposals == 1000);
  CHECK(rc.train.epochs == 20);
  CHECK(rc.train.batch_size == 8);
  CHECK(rc.out_dir == "out");
  CHECK(rc.eval_ks == std::vector<int>{10, 100, 1000});
  CHECK(rc.run_tag().empty());
}

TEST_CASE("load with an empty path equals the defaults") {
  const auto rc = load_run_config("");
  CHECK(rc.pipeline.num_stages == 2);
  CHECK(rc.dataset.channels == rc.pipeline.image_channels);
}

TEST_CASE("fields land in their sections") {
  const std::string text = R"({
    "dataset": {"num_scenes": 24, "image_size": 48, "channels": 2, "noise": 0.01},
    "pipeline": {"num_stages": 3, "align": false, "metric": "ab",
                 "nms_threshold": 0.6, "head_channels": 32,
                 "levels": [{"block": 1, "base_size": 12}]},
    "train": {"epochs": 5, "lr": 0.005, "threads": 2},
    "out_dir": "elsewhere",
    "eval_ks": [100, 10]
  })";
  const auto rc = parse_run_config(text);
  CHECK(rc.dataset.num_scenes == 24);
  CHECK(rc.dataset.image_size == 48);
  CHECK(rc.dataset.noise == doctest::Approx(0.01));
  CHECK(rc.pipeline.num_stages == 3);
  CHECK_FALSE(rc.pipeline.align);
  CHECK(rc.pipeline.metric == MetricMode::kAnchorBasedOnly);
  CHECK(rc.pipeline.nms_threshold == doctest::Approx(0.6));
  CHECK(rc.pipeline.head_channels == 32);
  REQUIRE(rc.pipeline.levels.size() == 1);
  CHECK(rc.pipeline.levels[0].block == 1);
  CHECK(rc.pipeline.levels[0].base_size == doctest::Approx(12.0));
  CHECK(rc.train.epochs == 5);
  CHECK(rc.train.lr == doctest::Approx(0.005));
  CHECK(rc.train.threads == 2);
  CHECK(rc.out_dir == "elsewhere");
  // channel count flows from the dataset into the pipeline
  CHECK(rc.pipeline.image_channels == 2);
  // eval_ks come back sorted
  CHECK(rc.eval_ks == std::vector<int>{10, 100});
}

TEST_CASE("unknown keys are rejected by section and name") {
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"pipeline": {"frobnicate": 1}})"),
                       "config: pipeline: unknown key \"frobnicate\"", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"dataset": {"sizes": [1]}})"),
                       "config: dataset: unknown key \"sizes\"", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"train": {"optimizer": "sgd"}})"),
                       "config: train: unknown key \"optimizer\"", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"mystery": {}})"),
                       "config: top level: unknown key \"mystery\"", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"pipeline": {"levels": [{"stride": 4}]}})"),
                       "config: pipeline.levels[0]: unknown key \"stride\"", ConfigError);
}

TEST_CASE("malformed input is a config error, not a crash") {
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[1,2,3]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": "five"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"pipeline": {"metric": "bogus"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"pipeline": {"levels": []}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"eval_ks": []})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"eval_ks": [0]})"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/no/such/file.json"), ConfigError);
}

TEST_CASE("changing the stage count resets alpha unless given explicitly") {
  const auto three = parse_run_config(R"({"pipeline": {"num_stages": 3}})");
  CHECK(three.pipeline.loss_weights.alpha == std::vector<double>{1.0, 1.0, 1.0});
  // an explicit alpha wins regardless of key order in the file
  const auto custom =
      parse_run_config(R"({"pipeline": {"alpha": [0.5, 2.0, 1.5], "num_stages": 3}})");
  CHECK(custom.pipeline.loss_weights.alpha == std::vector<double>{0.5, 2.0, 1.5});
}

TEST_CASE("the run tag names every ablation") {
  RunConfig rc;
  CHECK(rc.run_tag() == "");
  rc.pipeline.align = false;
  CHECK(rc.run_tag() == "_noalign");
  rc.set_stages(1);
  CHECK(rc.run_tag() == "_noalign_t1");
  rc.pipeline.metric = MetricMode::kAnchorFreeOnly;
  CHECK(rc.run_tag() == "_noalign_t1_af");
  rc.pipeline.metric = MetricMode::kAnchorBasedOnly;
  rc.pipeline.use_stats = false;
  CHECK(rc.run_tag() == "_noalign_t1_ab_nostats");
  rc.pipeline.use_iou_loss = false;
  CHECK(rc.run_tag() == "_noalign_t1_ab_nostats_noiou");

  RunConfig plain;
  plain.set_stages(3);
  CHECK(plain.run_tag() == "_t3");
}
