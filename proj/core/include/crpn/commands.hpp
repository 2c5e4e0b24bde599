#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include "crpn/config.hpp"
#include "crpn/gradcheck.hpp"
#include "crpn/train.hpp"

namespace crpn {

// In-process command bodies. The CLI binary is a thin shell around these;
// errors travel as exceptions and are mapped to exit codes at the entry point.

void cmd_gen_data(const RunConfig& rc, const std::string& out_path);

TrainResult cmd_train(const RunConfig& rc, const std::string& data_path);

void cmd_propose(const RunConfig& rc, const std::string& ckpt_path, const std::string& data_path,
                 const std::string& out_path);

void cmd_eval(const RunConfig& rc, const std::string& proposals_path,
              const std::string& data_path, const std::string& out_path);

// Prints the per-op table to `out`; throws NumericError naming the failed ops
// when any check is out of tolerance.
void cmd_gradcheck(std::uint64_t seed, int instances, const std::string& perturb_op,
                   std::ostream& out);

}  // namespace crpn
