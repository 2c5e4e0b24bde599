#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace crpn {

struct GradCheckResult {
  std::string op;
  int instances = 0;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = false;
};

// Central finite differences against the analytic gradients, all in double.
// `perturb_op` is a test hook: that op's analytic gradient gets a deliberate
// error so the failure path stays exercised. Empty means no perturbation.
std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, int instances = 50,
                                           const std::string& perturb_op = "");

}  // namespace crpn
