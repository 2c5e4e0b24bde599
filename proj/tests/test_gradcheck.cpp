#include <doctest.h>

#include <sstream>

#include "crpn/commands.hpp"
#include "crpn/errors.hpp"
#include "crpn/gradcheck.hpp"

using namespace crpn;

TEST_CASE("every analytic gradient agrees with finite differences") {
  const auto results = run_gradcheck(7, 10);
  REQUIRE(results.size() == 6);
  const char* expected[] = {"conv2d", "adaptive_conv", "smooth_l1",
                            "iou_loss", "bce", "pipeline"};
  for (std::size_t i = 0; i < results.size(); ++i) {
    CAPTURE(results[i].op);
    CHECK(results[i].op == expected[i]);
    CHECK(results[i].instances == 10);
    CHECK(results[i].pass);
    CHECK(results[i].max_rel_err <= results[i].tolerance);
  }
  // the composite check runs at a looser tolerance than the single ops
  CHECK(results[5].tolerance == doctest::Approx(1e-3));
  for (int i = 0; i < 5; ++i) CHECK(results[i].tolerance == doctest::Approx(1e-4));
}

TEST_CASE("deliberately corrupting one gradient trips only that op") {
  const auto results = run_gradcheck(7, 4, "iou_loss");
  for (const auto& r : results) {
    CAPTURE(r.op);
    CHECK(r.pass == (r.op != "iou_loss"));
  }
}

TEST_CASE("the command prints a table and names failed ops") {
  std::ostringstream ok;
  cmd_gradcheck(7, 4, "", ok);
  CHECK(ok.str().find("conv2d") != std::string::npos);
  CHECK(ok.str().find("pipeline") != std::string::npos);
  CHECK(ok.str().find("pass") != std::string::npos);
  CHECK(ok.str().find("FAIL") == std::string::npos);

  std::ostringstream bad;
  CHECK_THROWS_WITH_AS(cmd_gradcheck(7, 4, "bce", bad),
                       "gradient check failed for: bce", NumericError);
  CHECK(bad.str().find("FAIL") != std::string::npos);
}

TEST_CASE("results are reproducible for a fixed seed") {
  const auto a = run_gradcheck(11, 4);
  const auto b = run_gradcheck(11, 4);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].max_rel_err == b[i].max_rel_err);
  }
}
