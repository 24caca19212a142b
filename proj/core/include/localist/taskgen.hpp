// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "localist/numerics.hpp"
#include "localist/partition.hpp"

namespace localist {

/// One block-pointer retrieval query. The trigger at query_index belongs to
/// governing_block; the answer is the anchor of that block present in the
/// sequence, found at every position of target_span.
struct PointerSample {
  std::vector<TokenId> tokens;
  std::size_t query_index = 0;
  std::size_t governing_block = 0;
  std::vector<std::size_t> target_span;
  TokenId label = 0;

  friend bool operator==(const PointerSample&, const PointerSample&) = default;
};

struct TaskConfig {
  std::size_t sequence_length = 8;
  std::size_t blocks_present = 2;
  // Copies of each placed anchor.
  std::size_t redundancy = 1;
  // Minimum number of filler distractors; free slots are filled with more.
  std::size_t distractors = 0;
  std::size_t samples = 100;
  std::uint64_t seed = 0;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

struct Dataset {
  TaskConfig config;
  std::string partition_checksum;
  std::vector<PointerSample> samples;
};

/// Each sample: a uniformly drawn governing block, its trigger as the query,
/// one anchor (repeated `redundancy` times) from each present block, and
/// fillers from non-governing blocks as distractors. Positions are shuffled.
std::vector<PointerSample> generate(const TaskConfig& config, const BlockPartition& partition, Rng& rng);

struct DatasetStats {
  std::vector<std::size_t> block_frequency;
  double mean_target_size = 0.0;
  std::map<TokenId, std::size_t> label_counts;
};

DatasetStats dataset_stats(std::span<const PointerSample> samples, const BlockPartition& partition);

inline constexpr const char* kDatasetSchema = "localist.dataset";
inline constexpr int kDatasetSchemaVersion = 1;

/// JSON lines: a header with the task config and partition checksum, then one
/// sample per line.
std::string dataset_to_jsonl(const Dataset& dataset);
Dataset dataset_from_jsonl(const std::string& text);

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace localist
