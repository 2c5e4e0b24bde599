#include "crpn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "crpn/parallel.hpp"
#include "crpn/rng.hpp"

namespace crpn {

namespace {

constexpr std::uint64_t kPurposeScene = 0x5343454e45ull;  // "SCENE"
constexpr char kMagic[6] = {'C', 'R', 'P', 'N', 'D', '1'};
constexpr int kPlacementRetries = 100;

// Coordinates are stored as f32 on disk; generate at that precision so a
// save/load round trip is bitwise exact.
double snap(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Writer {
  std::ofstream out;
  explicit Writer(const std::string& path) : out(path, std::ios::binary) {}
  void u32(std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
  void f32(float v) { out.write(reinterpret_cast<const char*>(&v), 4); }
};

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  explicit Reader(const std::string& path) : in(path, std::ios::binary) {}
  bool eof_next() {
    return in.peek() == std::ifstream::traits_type::eof();
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
      throw FormatError(std::string("truncated while reading ") + what, offset);
    }
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v = 0;
    bytes(&v, 4, what);
    return v;
  }
  float f32(const char* what) {
    float v = 0;
    bytes(&v, 4, what);
    return v;
  }
};

}  // namespace

void DatasetSpec::validate() const {
  if (num_scenes <= 0) throw ConfigError("dataset.num_scenes must be positive");
  if (image_size <= 0) throw ConfigError("dataset.image_size must be positive");
  if (channels <= 0) throw ConfigError("dataset.channels must be positive");
  if (min_objects < 0 || max_objects < min_objects) {
    throw ConfigError("dataset object count range [" + std::to_string(min_objects) + ", " +
                      std::to_string(max_objects) + "] is empty");
  }
  if (min_size <= 0 || max_size < min_size) throw ConfigError("dataset size range is empty");
  if (max_size > image_size) throw ConfigError("dataset.max_size exceeds image_size");
  if (ar_min > 1.0 || ar_max < 1.0 || ar_min <= 0) {
    throw ConfigError("dataset aspect-ratio range must contain 1");
  }
  if (noise < 0 || noise > 1) throw ConfigError("dataset.noise must be in [0, 1]");
  if (falloff <= 0) throw ConfigError("dataset.falloff must be positive");
}

Scene generate_scene(const DatasetSpec& spec, int scene_id) {
  Rng rng(derive_seed(spec.seed, kPurposeScene, static_cast<std::uint64_t>(scene_id)));
  const int size = spec.image_size;
  const int count =
      spec.min_objects +
      static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));

  Scene scene;
  scene.scene_id = scene_id;
  scene.image = Tensor4(1, spec.channels, size, size);

  std::vector<std::vector<double>> intensities;
  for (int obj = 0; obj < count; ++obj) {
    const double w = snap(rng.uniform(spec.min_size, spec.max_size));
    const double h_lo = std::max(spec.min_size, w / spec.ar_max);
    const double h_hi = std::min(spec.max_size, w / spec.ar_min);
    const double h = snap(rng.uniform(h_lo, h_hi));
    std::vector<double> inten(static_cast<std::size_t>(spec.channels));
    for (auto& v : inten) v = snap(rng.uniform(0.35, 1.0));

    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
      const double cx = snap(rng.uniform(w / 2, size - w / 2));
      const double cy = snap(rng.uniform(h / 2, size - h / 2));
      const Box cand{cx, cy, w, h};
      bool ok = true;
      for (const auto& g : scene.gts) {
        if (iou(cand, g) > 0.3) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.gts.push_back(cand);
        intensities.push_back(std::move(inten));
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw GenerationError("scene " + std::to_string(scene_id) + ": object " +
                            std::to_string(obj) + " unplaceable after " +
                            std::to_string(kPlacementRetries) + " retries");
    }
  }

  for (int r = 0; r < size; ++r) {
    for (int col = 0; col < size; ++col) {
      const double py = r + 0.5;
      const double px = col + 0.5;
      for (std::size_t g = 0; g < scene.gts.size(); ++g) {
        const Box& b = scene.gts[g];
        const double d = std::max(std::abs(px - b.x) - b.w / 2, std::abs(py - b.y) - b.h / 2);
        const double cov = std::clamp(0.5 - d / spec.falloff, 0.0, 1.0);
        if (cov <= 0) continue;
        for (int c = 0; c < spec.channels; ++c) {
          float& px_val = scene.image.at(0, c, r, col);
          px_val = std::max(px_val, static_cast<float>(cov * intensities[g][static_cast<std::size_t>(c)]));
        }
      }
    }
  }
  if (spec.noise > 0) {
    for (int c = 0; c < spec.channels; ++c) {
      for (int r = 0; r < size; ++r) {
        for (int col = 0; col < size; ++col) {
          float& v = scene.image.at(0, c, r, col);
          v = std::clamp(v + static_cast<float>(rng.uniform(0.0, spec.noise)), 0.0f, 1.0f);
        }
      }
    }
  }
  return scene;
}

std::vector<Scene> generate(const DatasetSpec& spec, int threads) {
  spec.validate();
  std::vector<Scene> scenes(static_cast<std::size_t>(spec.num_scenes));
  parallel_for(spec.num_scenes, threads,
               [&](int i) { scenes[static_cast<std::size_t>(i)] = generate_scene(spec, i); });
  return scenes;
}

Scene hflip(const Scene& s) {
  Scene out;
  out.scene_id = s.scene_id;
  out.image = Tensor4(s.image.n, s.image.c, s.image.h, s.image.w);
  for (int c = 0; c < s.image.c; ++c) {
    for (int r = 0; r < s.image.h; ++r) {
      for (int col = 0; col < s.image.w; ++col) {
        out.image.at(0, c, r, col) = s.image.at(0, c, r, s.image.w - 1 - col);
      }
    }
  }
  out.gts.reserve(s.gts.size());
  for (const auto& g : s.gts) {
    out.gts.push_back(Box{snap(s.image.w - g.x), g.y, g.w, g.h});
  }
  return out;
}

void save_scenes(const std::vector<Scene>& scenes, const std::string& path) {
  Writer w(path);
  if (!w.out) throw ConfigError("cannot open " + path + " for writing");
  w.out.write(kMagic, sizeof(kMagic));
  for (const auto& s : scenes) {
    w.u32(static_cast<std::uint32_t>(s.scene_id));
    w.u32(static_cast<std::uint32_t>(s.gts.size()));
    for (const auto& g : s.gts) {
      w.f32(static_cast<float>(g.x));
      w.f32(static_cast<float>(g.y));
      w.f32(static_cast<float>(g.w));
      w.f32(static_cast<float>(g.h));
    }
    w.u32(static_cast<std::uint32_t>(s.image.c));
    w.u32(static_cast<std::uint32_t>(s.image.h));
    w.u32(static_cast<std::uint32_t>(s.image.w));
    w.out.write(reinterpret_cast<const char*>(s.image.data.data()),
                static_cast<std::streamsize>(s.image.data.size() * 4));
  }
  if (!w.out) throw ConfigError("write failed for " + path);
}

std::vector<Scene> load_scenes(const std::string& path) {
  Reader r(path);
  if (!r.in) throw ConfigError("cannot open " + path);
  char magic[6];
  r.bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("bad magic, not a CRPND1 dataset", 0);
  }
  constexpr std::uint32_t kSane = 1u << 24;
  std::vector<Scene> scenes;
  while (!r.eof_next()) {
    Scene s;
    s.scene_id = static_cast<int>(r.u32("scene_id"));
    const std::uint32_t gt_count = r.u32("gt count");
    if (gt_count > kSane) throw FormatError("implausible gt count", r.offset - 4);
    for (std::uint32_t i = 0; i < gt_count; ++i) {
      Box b;
      b.x = r.f32("gt x");
      b.y = r.f32("gt y");
      b.w = r.f32("gt w");
      b.h = r.f32("gt h");
      s.gts.push_back(b);
    }
    const std::uint32_t c = r.u32("channels");
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    if (c == 0 || h == 0 || w == 0 || c > kSane || h > kSane || w > kSane ||
        static_cast<std::uint64_t>(c) * h * w > (1ull << 31)) {
      throw FormatError("implausible image dims", r.offset - 12);
    }
    s.image = Tensor4(1, static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
    r.bytes(s.image.data.data(), s.image.data.size() * 4, "image data");
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace crpn
