#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "crpn/errors.hpp"
#include "crpn/synth.hpp"

using namespace crpn;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id || a.gts.size() != b.gts.size()) return false;
  for (std::size_t g = 0; g < a.gts.size(); ++g) {
    if (a.gts[g].x != b.gts[g].x || a.gts[g].y != b.gts[g].y || a.gts[g].w != b.gts[g].w ||
        a.gts[g].h != b.gts[g].h) {
      return false;
    }
  }
  return a.image.same_shape(b.image) && a.image.data == b.image.data;
}

}  // namespace

TEST_CASE("zero-noise support equals the gt extent plus the falloff margin") {
  DatasetSpec spec;
  spec.num_scenes = 4;
  spec.image_size = 48;
  spec.channels = 2;
  spec.min_objects = 1;
  spec.max_objects = 1;
  spec.noise = 0.0;
  spec.falloff = 1.0;
  const auto scenes = generate(spec);
  for (const auto& s : scenes) {
    REQUIRE(s.gts.size() == 1);
    const Box& b = s.gts[0];
    for (int r = 0; r < spec.image_size; ++r) {
      for (int c = 0; c < spec.image_size; ++c) {
        const double d = std::max(std::abs(c + 0.5 - b.x) - b.w / 2,
                                  std::abs(r + 0.5 - b.y) - b.h / 2);
        const float v = s.image.at(0, 0, r, c);
        if (d < 0.5 * spec.falloff - 1e-6) {
          CHECK(v > 0.0f);
        } else if (d > 0.5 * spec.falloff + 1e-6) {
          CHECK(v == 0.0f);
        }
        // deep interior is the flat rendered intensity
        if (d < -0.5 * spec.falloff - 1e-6) CHECK(v >= 0.3f);
      }
    }
  }
}

TEST_CASE("same seed reproduces the dataset bitwise, any thread count") {
  DatasetSpec spec;
  spec.num_scenes = 24;
  spec.image_size = 32;
  spec.min_size = 6;
  spec.max_size = 12;
  const auto a = generate(spec, 1);
  const auto b = generate(spec, 1);
  const auto c = generate(spec, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_scene(a[i], b[i]));
    CHECK(same_scene(a[i], c[i]));
  }
}

TEST_CASE("scene invariants: bounds, ranges, pixel domain, overlap cap") {
  DatasetSpec spec;
  spec.num_scenes = 60;
  spec.image_size = 64;
  spec.seed = 11;
  const auto scenes = generate(spec);
  for (const auto& s : scenes) {
    CHECK(!s.gts.empty());
    CHECK(s.gts.size() <= static_cast<std::size_t>(spec.max_objects));
    for (const auto& g : s.gts) {
      CHECK(g.x - g.w / 2 >= -1e-4);
      CHECK(g.x + g.w / 2 <= spec.image_size + 1e-4);
      CHECK(g.y - g.h / 2 >= -1e-4);
      CHECK(g.y + g.h / 2 <= spec.image_size + 1e-4);
      CHECK(g.w >= spec.min_size - 1e-4);
      CHECK(g.w <= spec.max_size + 1e-4);
      CHECK(g.h >= spec.min_size - 1e-4);
      CHECK(g.h <= spec.max_size + 1e-4);
      const double ar = g.w / g.h;
      CHECK(ar >= spec.ar_min - 1e-4);
      CHECK(ar <= spec.ar_max + 1e-4);
    }
    for (std::size_t i = 0; i < s.gts.size(); ++i) {
      for (std::size_t j = i + 1; j < s.gts.size(); ++j) {
        CHECK(iou(s.gts[i], s.gts[j]) <= 0.3 + 1e-9);
      }
    }
    for (float v : s.image.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("gt widths are uniform over the configured range") {
  DatasetSpec spec;
  spec.num_scenes = 1000;
  spec.image_size = 64;
  spec.seed = 13;
  const auto scenes = generate(spec, 4);
  std::vector<int> bins(10, 0);
  int n = 0;
  for (const auto& s : scenes) {
    for (const auto& g : s.gts) {
      const double u = (g.w - spec.min_size) / (spec.max_size - spec.min_size);
      int b = static_cast<int>(u * 10);
      if (b == 10) b = 9;
      ++bins[static_cast<std::size_t>(b)];
      ++n;
    }
  }
  const double expect = n / 10.0;
  double chi2 = 0;
  for (int b : bins) chi2 += (b - expect) * (b - expect) / expect;
  // df = 9, upper 1% point
  CHECK(chi2 < 21.666);
}

TEST_CASE("hflip mirrors the image and is its own inverse") {
  DatasetSpec spec;
  spec.num_scenes = 3;
  spec.image_size = 32;
  spec.min_size = 6;
  spec.max_size = 12;
  spec.seed = 17;
  for (const auto& s : generate(spec)) {
    const Scene f = hflip(s);
    REQUIRE(f.gts.size() == s.gts.size());
    for (std::size_t g = 0; g < s.gts.size(); ++g) {
      CHECK(f.gts[g].x == doctest::Approx(spec.image_size - s.gts[g].x).epsilon(1e-6));
      CHECK(f.gts[g].y == s.gts[g].y);
      CHECK(f.gts[g].w == s.gts[g].w);
      CHECK(f.gts[g].h == s.gts[g].h);
    }
    for (int r = 0; r < s.image.h; ++r) {
      for (int c = 0; c < s.image.w; ++c) {
        CHECK(f.image.at(0, 0, r, c) == s.image.at(0, 0, r, s.image.w - 1 - c));
      }
    }
    const Scene ff = hflip(f);
    CHECK(ff.image.data == s.image.data);
    for (std::size_t g = 0; g < s.gts.size(); ++g) {
      CHECK(ff.gts[g].x == doctest::Approx(s.gts[g].x).epsilon(1e-4));
    }
  }
}

TEST_CASE("save then load returns the scenes bitwise") {
  DatasetSpec spec;
  spec.num_scenes = 10;
  spec.image_size = 24;
  spec.min_size = 6;
  spec.max_size = 10;
  spec.seed = 19;
  const auto scenes = generate(spec);
  const std::string path = "synth_roundtrip_test.crpnd";
  save_scenes(scenes, path);
  const auto back = load_scenes(path);
  REQUIRE(back.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) CHECK(same_scene(scenes[i], back[i]));
  std::remove(path.c_str());
}

TEST_CASE("corrupt or truncated files raise format errors with an offset") {
  DatasetSpec spec;
  spec.num_scenes = 2;
  spec.image_size = 16;
  spec.min_size = 6;
  spec.max_size = 10;
  const auto scenes = generate(spec);
  const std::string path = "synth_damage_test.crpnd";
  save_scenes(scenes, path);

  const auto whole = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, whole / 2);
  CHECK_THROWS_AS(load_scenes(path), FormatError);
  try {
    load_scenes(path);
  } catch (const FormatError& e) {
    CHECK(e.offset > 0);
    CHECK(e.offset <= whole / 2);
  }

  save_scenes(scenes, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  CHECK_THROWS_AS(load_scenes(path), FormatError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_scenes(path), ConfigError);
}

TEST_CASE("impossible placement reports a generation error") {
  DatasetSpec spec;
  spec.num_scenes = 1;
  spec.image_size = 8;
  spec.min_size = 8;
  spec.max_size = 8;
  spec.min_objects = 4;
  spec.max_objects = 4;
  CHECK_THROWS_AS(generate(spec), GenerationError);
}

TEST_CASE("spec validation names the broken field") {
  DatasetSpec spec;
  spec.max_size = 80.0;  // exceeds the 64-pixel default image
  try {
    spec.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("max_size") != std::string::npos);
  }
  DatasetSpec neg;
  neg.noise = -0.1;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}
