#pragma once

// The `romae` command line, callable in-process so tests can drive it.

#include <iosfwd>
#include <string>
#include <vector>

#include "romae/checkpoint.hpp"
#include "romae/model.hpp"

namespace romae {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct EncoderTransfer {
  std::size_t loaded = 0;
  std::vector<std::string> dropped;  // decoder-side names left behind
};

/// Copies a pretrained encoder into `target` (whose task head stays fresh).
/// Throws CheckpointError listing every incompatibility.
EncoderTransfer transfer_encoder(Romae& target, const Checkpoint& ckpt);

}  // namespace romae
