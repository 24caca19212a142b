// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "localist/partition.hpp"
#include "localist/taskgen.hpp"
#include "localist/trainer.hpp"

namespace localist::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitInputError = 2,
  kExitDiverged = 3,
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool has_partition = false;
  bool has_task = false;
  PartitionSpec partition;
  TaskConfig task;

  std::size_t heads = 4;
  TrainerConfig trainer;
  RegimePreset preset = RegimePreset::kLocalist;
  double intermediate_alpha = 1.0;
  double beta = 1e-4;
  // Only read for the custom preset.
  double alpha = 1.0;
  double tau = 1.0;
  double delta = 1.0;

  std::vector<double> sweep_alphas;
  std::vector<double> sweep_taus;

  double premise_delta = 0.0;
  double target_rate = 0.95;
  double safety_factor = 10.0;
  std::optional<double> floor;  // defaults to the preset alpha
};

/// Throws Error(kInvalidInput) with a diagnostic naming the bad key.
RunConfig parse_config(const std::string& toml_text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

DialSettings dial_for(const RunConfig& config, std::size_t blocks, std::optional<RegimePreset> preset = {});

/// Streams derived from the run seed.
enum class Stream : std::uint64_t { kPartition = 1, kTask = 2, kTrain = 3, kSweep = 4 };
std::uint64_t stream_seed(std::uint64_t seed, Stream stream);

/// Output directory, honouring LOCALIST_OUT.
std::filesystem::path resolve_out_dir(const std::string& flag_value);

/// Entry point used by main() and the tests.
int run(int argc, const char* const* argv);

}  // namespace localist::cli
