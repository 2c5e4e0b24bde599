#pragma once

#include <string>
#include <vector>

#include "crpn/pipeline.hpp"
#include "crpn/synth.hpp"
#include "crpn/train.hpp"

namespace crpn {

// Everything a run needs, with defaults that work out of the box.
// JSON keys mirror the field names; unknown keys are rejected by name.
struct RunConfig {
  DatasetSpec dataset;
  PipelineConfig pipeline;
  TrainConfig train;
  std::string out_dir = "out";
  std::vector<int> eval_ks = {10, 100, 1000};

  // Changing the stage count resets per-stage loss weights to 1; an explicit
  // "alpha" in the config (parsed afterwards) still wins.
  void set_stages(int n);

  // Suffix encoding the ablation switches, e.g. "_noalign_t1". Empty for the
  // default configuration, so metrics.csv / checkpoint.crpnw keep their names.
  std::string run_tag() const;
};

RunConfig parse_run_config(const std::string& json_text);

// Empty path yields the defaults.
RunConfig load_run_config(const std::string& path);

}  // namespace crpn
