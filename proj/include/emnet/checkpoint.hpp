// SPDX-License-Identifier: Apache-2.0
//
// Versioned text checkpoints:
//
//   emnet-checkpoint 1
//   step <n>
//   config <line count>
//   <key> = <value>            (canonical run configuration)
//   params <tensor count>
//   param <name> <theta|rho> <rank> <extents...>
//   <row-major values, shortest round-trip decimal, space separated>
//   end
//
// Loading then saving reproduces the file byte for byte.
#pragma once

#include <iosfwd>
#include <string>

#include "emnet/config.hpp"
#include "emnet/models.hpp"

namespace emnet {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int step = 0;
  RunConfig config;
  EmNetwork network;
};

void write_checkpoint(std::ostream& out, const RunConfig& config, const EmNetwork& net, int step);
/// Throws FormatError (naming the version when it is the problem).
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const RunConfig& config, const EmNetwork& net, int step);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace emnet
