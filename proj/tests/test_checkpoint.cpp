#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "crpn/checkpoint.hpp"
#include "crpn/errors.hpp"
#include "crpn/rng.hpp"

#include "test_util.hpp"

using namespace crpn;
using namespace crpn::test;

namespace {

Checkpoint sample_checkpoint() {
  Rng rng(101);
  Checkpoint ckpt;
  Tensor4 a(2, 3, 4, 5), b(1, 1, 1, 7), c(1, 4, 1, 1);
  fill_uniform(a, rng, -2.0, 2.0);
  fill_uniform(b, rng, -2.0, 2.0);
  fill_uniform(c, rng, -2.0, 2.0);
  ckpt.add("alpha.weights", std::move(a));
  ckpt.add("beta", std::move(b));
  ckpt.add("gamma.bias", std::move(c));
  return ckpt;
}

}  // namespace

TEST_CASE("checkpoint round-trip preserves names, shapes, and bits") {
  const auto ckpt = sample_checkpoint();
  const std::string path = "ckpt_roundtrip_test.crpnw";
  save_checkpoint(ckpt, path);
  const auto back = load_checkpoint(path);
  REQUIRE(back.tensors.size() == ckpt.tensors.size());
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == ckpt.tensors[i].first);
    CHECK(back.tensors[i].second.same_shape(ckpt.tensors[i].second));
    CHECK(back.tensors[i].second.data == ckpt.tensors[i].second.data);
  }
  std::remove(path.c_str());
}

TEST_CASE("duplicate tensor names are rejected") {
  Checkpoint ckpt;
  ckpt.add("weights", Tensor4(1, 1, 1, 1));
  CHECK_THROWS_AS(ckpt.add("weights", Tensor4(1, 1, 2, 2)), ConfigError);
}

TEST_CASE("find tolerates misses, require does not") {
  const auto ckpt = sample_checkpoint();
  CHECK(ckpt.find("beta") != nullptr);
  CHECK(ckpt.find("delta") == nullptr);
  CHECK_THROWS_AS(ckpt.require("delta"), FormatError);
  CHECK(ckpt.require("beta").w == 7);
}

TEST_CASE("truncated checkpoint names the failing byte") {
  const auto ckpt = sample_checkpoint();
  const std::string path = "ckpt_damage_test.crpnw";
  save_checkpoint(ckpt, path);
  const auto whole = std::filesystem::file_size(path);
  for (const auto frac : {whole / 4, whole / 2, whole - 3}) {
    save_checkpoint(ckpt, path);
    std::filesystem::resize_file(path, frac);
    try {
      load_checkpoint(path);
      FAIL("expected FormatError at size " << frac);
    } catch (const FormatError& e) {
      CHECK(e.offset <= frac);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("foreign magic is rejected up front") {
  const std::string path = "ckpt_magic_test.crpnw";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTAMODEL___";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
}

TEST_CASE("implausible headers fail instead of allocating") {
  const std::string path = "ckpt_header_test.crpnw";
  {
    std::ofstream out(path, std::ios::binary);
    out.write("CRPNW1", 6);
    const std::uint32_t count = 0xffffffffu;
    out.write(reinterpret_cast<const char*>(&count), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
}
