// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/numerics.hpp"

namespace localist {

using TokenId = std::size_t;

/// Half-open range of embedding coordinates [begin, end).
struct FeatureSlice {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t coord) const { return coord >= begin && coord < end; }
  friend bool operator==(const FeatureSlice&, const FeatureSlice&) = default;
};

struct Block {
  std::string id;
  FeatureSlice slice;
  std::vector<TokenId> anchors;
  std::vector<TokenId> fillers;
  TokenId trigger = 0;
  // Token-class label of the trigger; rules match on it.
  std::string trigger_class;

  friend bool operator==(const Block&, const Block&) = default;
};

/// Blocks own disjoint feature slices covering [0, d). Token ids index
/// token_block; each token belongs to exactly one block.
struct BlockPartition {
  std::vector<Block> blocks;
  std::vector<std::size_t> token_block;

  std::size_t block_count() const { return blocks.size(); }
  std::size_t vocab_size() const { return token_block.size(); }
  std::size_t dim() const { return blocks.empty() ? 0 : blocks.back().slice.end; }

  std::size_t block_of(TokenId token) const;
  /// Index of the block with the given id; throws not-found.
  std::size_t find_block(const std::string& id) const;
  bool is_anchor(TokenId token) const;
  /// All tokens of a block: anchors, fillers and the trigger.
  std::vector<TokenId> tokens_of(std::size_t block) const;

  /// Throws invalid-input if any structural invariant is broken.
  void validate() const;

  friend bool operator==(const BlockPartition&, const BlockPartition&) = default;
};

/// Fixed token embeddings, one row per token id.
struct EmbeddingTable {
  Matrix vectors;

  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
  Eigen::Ref<const Eigen::RowVectorXd> row(TokenId token) const { return vectors.row(token); }
};

struct PartitionSpec {
  std::size_t blocks = 2;
  std::size_t anchors_per_block = 1;
  std::size_t fillers_per_block = 0;
  std::size_t dim_per_block = 4;
  // Weight of the block's mean anchor direction in its trigger vector; the
  // rest is a random direction. 0 gives an unrelated trigger.
  double cue_affinity = 0.5;
};

struct PartitionBundle {
  BlockPartition partition;
  EmbeddingTable embeddings;
};

/// Lays out p blocks of (anchors, fillers) followed by one trigger token per
/// block. Anchors are orthonormal within a block; fillers and triggers are
/// random unit vectors inside the block slice.
PartitionBundle build_partition(const PartitionSpec& spec, Rng& rng);

struct AnchorScore {
  TokenId anchor = 0;
  std::size_t block = 0;
  double within_block_spread = 0.0;
  double between_block_min_distance = 0.0;
};

std::vector<AnchorScore> score_anchors(const BlockPartition& partition,
                                       const EmbeddingTable& embeddings);

/// Spectral norm of the uncentered second moment (1/n) sum x x^T over the
/// block's tokens.
double block_cov_norm(const BlockPartition& partition, const EmbeddingTable& embeddings,
                      std::size_t block);
double block_cov_norm(const BlockPartition& partition, const EmbeddingTable& embeddings,
                      const std::string& block_id);

/// Grows a block's anchor list from m to k*m with exact copies under fresh
/// token ids appended to the vocabulary.
PartitionBundle duplicate_anchors(const BlockPartition& partition, const EmbeddingTable& embeddings,
                                  std::size_t block, std::size_t k);

inline constexpr const char* kPartitionSchema = "localist.partition";
inline constexpr int kPartitionSchemaVersion = 1;

nlohmann::json partition_to_json(const BlockPartition& partition, const EmbeddingTable& embeddings);
PartitionBundle partition_from_json(const nlohmann::json& doc);

/// SHA-256 over the canonical JSON text of the partition document.
std::string partition_checksum(const BlockPartition& partition, const EmbeddingTable& embeddings);

}  // namespace localist
