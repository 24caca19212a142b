// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "localist/attention.hpp"
#include "localist/partition.hpp"
#include "localist/taskgen.hpp"

namespace localist {

/// Concentration, entropy and fidelity bounds for one (query, head) pair,
/// each instantiated with the measured margin of that pair. With
/// u = exp(-margin / tau):
///   cor1_bound        log(|A| * |T|) + (n_off / e) * u
///   cor1_tight_bound  log(n_correct) + n_off * (u + phi(u)),
///                     phi(u) = u log(1/u) for u <= 1/e, else 1/e
///   cor2_bound        1 - n_off * u
///   step4_bound       u, for the per-key ratio and the per-block mass
struct BoundRow {
  std::size_t sample = 0;
  std::size_t head = 0;
  std::size_t governing_block = 0;
  double margin = 0.0;
  bool premise = false;  // margin >= the configured delta
  std::size_t n_off = 0;
  std::size_t n_correct = 0;

  double entropy = 0.0;
  double log_anchor_count = 0.0;
  double cor1_bound = 0.0;
  bool cor1_pass = false;
  double cor1_tight_bound = 0.0;
  bool cor1_tight_pass = false;

  double fidelity = 0.0;
  double cor2_bound = 0.0;
  bool cor2_pass = false;

  double per_key_ratio = 0.0;
  double step4_bound = 0.0;
  bool step4_per_key_pass = false;
  double max_wrong_block_mass = 0.0;
  bool step4_block_sum_pass = false;
};

std::vector<BoundRow> evaluate_bounds(const AttentionModel& model, std::span<const PointerSample> samples,
                                      const BlockPartition& partition, const EmbeddingTable& embeddings,
                                      double premise_delta);

std::string bounds_csv_header();
std::string bounds_csv_line(const BoundRow& row);

}  // namespace localist
