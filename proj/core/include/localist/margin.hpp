// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "localist/attention.hpp"
#include "localist/partition.hpp"
#include "localist/taskgen.hpp"

namespace localist {

/// Block of each key in a head row.
std::vector<std::size_t> key_blocks(const HeadRow& row, std::span<const TokenId> tokens,
                                    const BlockPartition& partition);

/// Raw q.k of the best correct-block key minus the best other-block key.
double query_margin(const Vector& scores, std::span<const std::size_t> key_blocks,
                    std::size_t correct_block);

struct MarginEstimate {
  std::size_t head = 0;
  double mean_margin = 0.0;
  double min_margin = 0.0;
  std::vector<double> per_query_margins;
};

/// One estimate per head over the dataset's queries.
std::vector<MarginEstimate> estimate_margin(const AttentionModel& model,
                                            std::span<const PointerSample> dataset,
                                            const BlockPartition& partition,
                                            const EmbeddingTable& embeddings);

/// Margins of the (query, head) pairs whose head is homed on the query's
/// governing block. Queries of a block with no home head are skipped.
struct HomeMargins {
  std::vector<double> values;
  double min_margin = 0.0;
  double mean_margin = 0.0;
};

HomeMargins home_margins(const AttentionModel& model, std::span<const PointerSample> dataset,
                         const BlockPartition& partition, const EmbeddingTable& embeddings,
                         std::span<const std::size_t> head_home);

}  // namespace localist
