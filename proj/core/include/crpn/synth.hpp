#pragma once

#include <string>
#include <vector>

#include "crpn/box.hpp"
#include "crpn/errors.hpp"
#include "crpn/tensor.hpp"

namespace crpn {

struct Scene {
  int scene_id = 0;
  Tensor4 image;  // n = 1
  std::vector<Box> gts;
};

struct DatasetSpec {
  int num_scenes = 640;
  int image_size = 64;
  int channels = 3;
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 6.0;
  double max_size = 24.0;
  double ar_min = 0.5;   // aspect = w / h
  double ar_max = 2.0;
  double noise = 0.05;
  double falloff = 1.0;  // soft-edge width in pixels, straddles the box edge
  std::uint64_t seed = 7;

  void validate() const;
};

// Deterministic given the spec; scene i depends only on (seed, i).
std::vector<Scene> generate(const DatasetSpec& spec, int threads = 1);
Scene generate_scene(const DatasetSpec& spec, int scene_id);

Scene hflip(const Scene& s);

void save_scenes(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_scenes(const std::string& path);

}  // namespace crpn
