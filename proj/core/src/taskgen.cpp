// SPDX-License-Identifier: Apache-2.0
#include "localist/taskgen.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/serialization.hpp"

namespace localist {

namespace {

void check_feasible(const TaskConfig& config, const BlockPartition& partition) {
  const std::size_t p = partition.block_count();
  if (p < 2) throw Error(ErrorKind::kInvalidInput, "the pointer task needs at least two blocks");
  if (config.redundancy == 0) throw Error(ErrorKind::kInvalidParameter, "redundancy must be at least 1");
  if (config.blocks_present == 0 || config.blocks_present > p)
    throw Error(ErrorKind::kInfeasible, "blocks_present must be in [1, p]");
  if (config.sequence_length < config.blocks_present)
    throw Error(ErrorKind::kInfeasible, "sequence_length must be at least blocks_present");
  const std::size_t mandatory = 1 + config.blocks_present * config.redundancy;
  if (mandatory + config.distractors > config.sequence_length)
    throw Error(ErrorKind::kInfeasible,
                "sequence of length " + std::to_string(config.sequence_length) + " cannot hold " +
                    std::to_string(mandatory) + " required tokens and " +
                    std::to_string(config.distractors) + " distractors");
  if (config.sequence_length > mandatory) {
    for (std::size_t b = 0; b < p; ++b) {
      std::size_t pool = 0;
      for (std::size_t o = 0; o < p; ++o)
        if (o != b) pool += partition.blocks[o].fillers.size();
      if (pool == 0)
        throw Error(ErrorKind::kInfeasible, "no filler tokens outside block " + partition.blocks[b].id +
                                                " to use as distractors");
    }
  }
}

nlohmann::json config_to_json(const TaskConfig& c) {
  return {{"sequence_length", c.sequence_length}, {"blocks_present", c.blocks_present},
          {"redundancy", c.redundancy},           {"distractors", c.distractors},
          {"samples", c.samples},                 {"seed", c.seed}};
}

TaskConfig config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  c.sequence_length = j.at("sequence_length").get<std::size_t>();
  c.blocks_present = j.at("blocks_present").get<std::size_t>();
  c.redundancy = j.at("redundancy").get<std::size_t>();
  c.distractors = j.at("distractors").get<std::size_t>();
  c.samples = j.at("samples").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::vector<PointerSample> generate(const TaskConfig& config, const BlockPartition& partition, Rng& rng) {
  partition.validate();
  check_feasible(config, partition);
  const std::size_t p = partition.block_count();

  std::vector<PointerSample> out;
  out.reserve(config.samples);
  for (std::size_t s = 0; s < config.samples; ++s) {
    PointerSample sample;
    sample.governing_block = rng.index(p);
    const auto& governing = partition.blocks[sample.governing_block];

    std::vector<std::size_t> others;
    for (std::size_t b = 0; b < p; ++b)
      if (b != sample.governing_block) others.push_back(b);
    // partial Fisher-Yates: first blocks_present - 1 entries are the picks
    for (std::size_t i = 0; i + 1 < config.blocks_present; ++i)
      std::swap(others[i], others[i + rng.index(others.size() - i)]);

    std::vector<TokenId> items;
    items.push_back(governing.trigger);
    sample.label = governing.anchors[rng.index(governing.anchors.size())];
    for (std::size_t c = 0; c < config.redundancy; ++c) items.push_back(sample.label);
    for (std::size_t i = 0; i + 1 < config.blocks_present; ++i) {
      const auto& block = partition.blocks[others[i]];
      const TokenId anchor = block.anchors[rng.index(block.anchors.size())];
      for (std::size_t c = 0; c < config.redundancy; ++c) items.push_back(anchor);
    }

    std::vector<TokenId> pool;
    for (std::size_t b : others) {
      const auto& fillers = partition.blocks[b].fillers;
      pool.insert(pool.end(), fillers.begin(), fillers.end());
    }
    while (items.size() < config.sequence_length) items.push_back(pool[rng.index(pool.size())]);

    // The trigger is item 0 and the governing anchor copies are items
    // 1..redundancy; track them through the shuffle.
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);

    sample.tokens.resize(items.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::size_t item = order[pos];
      sample.tokens[pos] = items[item];
      if (item == 0) sample.query_index = pos;
      else if (item <= config.redundancy) sample.target_span.push_back(pos);
    }
    out.push_back(std::move(sample));
  }
  return out;
}

DatasetStats dataset_stats(std::span<const PointerSample> samples, const BlockPartition& partition) {
  if (samples.empty()) throw Error(ErrorKind::kInvalidInput, "dataset is empty");
  DatasetStats stats;
  stats.block_frequency.assign(partition.block_count(), 0);
  double total_span = 0.0;
  for (const auto& s : samples) {
    if (s.governing_block >= partition.block_count())
      throw Error(ErrorKind::kInvalidInput, "sample governing block out of range");
    ++stats.block_frequency[s.governing_block];
    total_span += static_cast<double>(s.target_span.size());
    ++stats.label_counts[s.label];
  }
  stats.mean_target_size = total_span / static_cast<double>(samples.size());
  return stats;
}

std::string dataset_to_jsonl(const Dataset& dataset) {
  std::string out;
  const nlohmann::json header = {{"schema", kDatasetSchema},
                                 {"version", kDatasetSchemaVersion},
                                 {"config", config_to_json(dataset.config)},
                                 {"partition_checksum", dataset.partition_checksum}};
  out += header.dump();
  out += '\n';
  for (const auto& s : dataset.samples) {
    const nlohmann::json line = {{"tokens", s.tokens},
                                 {"query_index", s.query_index},
                                 {"governing_block", s.governing_block},
                                 {"target_span", s.target_span},
                                 {"label", s.label}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Dataset dataset;
  try {
    if (!std::getline(in, line)) throw Error(ErrorKind::kInvalidInput, "dataset file is empty");
    const auto header = nlohmann::json::parse(line);
    if (header.at("schema").get<std::string>() != kDatasetSchema)
      throw Error(ErrorKind::kInvalidInput, "not a dataset file");
    if (header.at("version").get<int>() != kDatasetSchemaVersion)
      throw Error(ErrorKind::kInvalidInput, "unsupported dataset schema version");
    dataset.config = config_from_json(header.at("config"));
    dataset.partition_checksum = header.at("partition_checksum").get<std::string>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      PointerSample s;
      s.tokens = j.at("tokens").get<std::vector<TokenId>>();
      s.query_index = j.at("query_index").get<std::size_t>();
      s.governing_block = j.at("governing_block").get<std::size_t>();
      s.target_span = j.at("target_span").get<std::vector<std::size_t>>();
      s.label = j.at("label").get<TokenId>();
      if (s.query_index >= s.tokens.size() || s.target_span.empty())
        throw Error(ErrorKind::kInvalidInput, "malformed sample");
      dataset.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed dataset: ") + e.what());
  }
  return dataset;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_file_atomic(path, dataset_to_jsonl(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return dataset_from_jsonl(read_file(path)); }

}  // namespace localist
