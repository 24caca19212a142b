// SPDX-License-Identifier: Apache-2.0
#include "localist/margin.hpp"

#include <algorithm>
#include <limits>

#include "localist/error.hpp"

namespace localist {

std::vector<std::size_t> key_blocks(const HeadRow& row, std::span<const TokenId> tokens,
                                    const BlockPartition& partition) {
  std::vector<std::size_t> out;
  out.reserve(row.keys.size());
  for (std::size_t pos : row.keys) out.push_back(partition.block_of(tokens[pos]));
  return out;
}

double query_margin(const Vector& scores, std::span<const std::size_t> key_blocks,
                    std::size_t correct_block) {
  if (key_blocks.size() != static_cast<std::size_t>(scores.size()))
    throw Error(ErrorKind::kInvalidInput, "key block labels do not match the scores");
  constexpr double lowest = std::numeric_limits<double>::lowest();
  double best_correct = lowest;
  double best_other = lowest;
  bool has_correct = false;
  bool has_other = false;
  for (std::size_t j = 0; j < key_blocks.size(); ++j) {
    const double s = scores(static_cast<Eigen::Index>(j));
    if (key_blocks[j] == correct_block) {
      has_correct = true;
      best_correct = std::max(best_correct, s);
    } else {
      has_other = true;
      best_other = std::max(best_other, s);
    }
  }
  if (!has_correct || !has_other)
    throw Error(ErrorKind::kInvalidInput, "margin needs keys from the correct block and from another block");
  return best_correct - best_other;
}

std::vector<MarginEstimate> estimate_margin(const AttentionModel& model,
                                            std::span<const PointerSample> dataset,
                                            const BlockPartition& partition,
                                            const EmbeddingTable& embeddings) {
  if (dataset.empty()) throw Error(ErrorKind::kInvalidInput, "dataset is empty");
  std::vector<MarginEstimate> out(model.head_count());
  for (std::size_t h = 0; h < out.size(); ++h) out[h].head = h;
  for (const auto& s : dataset) {
    const auto trace = attend(model, embed(s.tokens, embeddings), s.query_index, SelfMask::kExcludeSelf);
    for (std::size_t h = 0; h < out.size(); ++h) {
      const auto& row = trace.heads[h];
      out[h].per_query_margins.push_back(
          query_margin(row.scores, key_blocks(row, s.tokens, partition), s.governing_block));
    }
  }
  for (auto& e : out) {
    double total = 0.0;
    e.min_margin = std::numeric_limits<double>::infinity();
    for (double m : e.per_query_margins) {
      total += m;
      e.min_margin = std::min(e.min_margin, m);
    }
    // rounding in the sum must not push the mean below the minimum
    e.mean_margin = std::max(e.min_margin, total / static_cast<double>(e.per_query_margins.size()));
  }
  return out;
}

HomeMargins home_margins(const AttentionModel& model, std::span<const PointerSample> dataset,
                         const BlockPartition& partition, const EmbeddingTable& embeddings,
                         std::span<const std::size_t> head_home) {
  if (head_home.size() != model.head_count())
    throw Error(ErrorKind::kInvalidInput, "head_home does not match the model");
  HomeMargins out;
  double total = 0.0;
  out.min_margin = std::numeric_limits<double>::infinity();
  for (const auto& s : dataset) {
    const auto trace = attend(model, embed(s.tokens, embeddings), s.query_index, SelfMask::kExcludeSelf);
    for (std::size_t h = 0; h < head_home.size(); ++h) {
      if (head_home[h] != s.governing_block) continue;
      const auto& row = trace.heads[h];
      const double m = query_margin(row.scores, key_blocks(row, s.tokens, partition), s.governing_block);
      out.values.push_back(m);
      total += m;
      out.min_margin = std::min(out.min_margin, m);
    }
  }
  if (out.values.empty()) throw Error(ErrorKind::kInvalidInput, "no query has a home head");
  out.mean_margin = std::max(out.min_margin, total / static_cast<double>(out.values.size()));
  return out;
}

}  // namespace localist
