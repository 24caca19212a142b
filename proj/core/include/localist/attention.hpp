// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/numerics.hpp"
#include "localist/partition.hpp"

namespace localist {

struct HeadWeights {
  Matrix query;  // d x d_k
  Matrix key;    // d x d_k
  Matrix value;  // d x d_v
};

struct ModelShape {
  std::size_t heads = 1;
  std::size_t dim = 0;
  std::size_t key_dim = 0;
  std::size_t value_dim = 0;
  std::size_t vocab = 0;
};

/// One attention layer with H heads and a linear readout over the
/// concatenated head contexts.
struct AttentionModel {
  std::vector<HeadWeights> heads;
  Matrix readout;  // (H * d_v) x vocab
  double tau = 1.0;

  std::size_t head_count() const { return heads.size(); }
  std::size_t dim() const;
  std::size_t key_dim() const;
  std::size_t value_dim() const;
  std::size_t vocab() const { return static_cast<std::size_t>(readout.cols()); }
  ModelShape shape() const;

  /// Throws invalid-input on shape mismatch or non-finite weights.
  void validate() const;
};

/// With tie_query_key each head's key projection starts as a copy of its
/// query projection, so q.k starts as a positive semidefinite form.
AttentionModel init_model(const ModelShape& shape, double tau, double init_scale, Rng& rng,
                          bool tie_query_key = false);

/// Row-stack the embeddings of a token sequence.
Matrix embed(std::span<const TokenId> tokens, const EmbeddingTable& embeddings);

enum class SelfMask {
  kNone,
  // The query position is removed from its own key set.
  kExcludeSelf,
};

/// Attention of one query position for one head. keys[j] is the sequence
/// position of entry j; scores are raw q.k, logits are scores / tau.
struct HeadRow {
  std::vector<std::size_t> keys;
  Vector query;         // d_k
  Matrix key_vectors;   // |keys| x d_k
  Matrix value_vectors; // |keys| x d_v
  Vector scores;
  Vector logits;
  Vector weights;
  Vector context;       // d_v
};

struct QueryTrace {
  std::size_t query = 0;
  std::vector<HeadRow> heads;
  Vector output;  // readout logits over the vocabulary
};

QueryTrace attend(const AttentionModel& model, const Matrix& x, std::size_t query,
                  SelfMask mask = SelfMask::kNone);

/// Full forward pass: every position queries every (unmasked) position.
/// Masked logits are -inf and carry zero weight.
struct AttentionTrace {
  std::vector<Matrix> logits;    // per head, n x n
  std::vector<Matrix> weights;   // per head, n x n, row-stochastic
  std::vector<Matrix> contexts;  // per head, n x d_v
  Matrix output;                 // n x vocab
};

AttentionTrace forward(const AttentionModel& model, const Matrix& x,
                       SelfMask mask = SelfMask::kNone);

/// Shannon entropy in nats; 0 log 0 = 0.
double entropy(std::span<const double> weights);
double entropy(const Vector& weights);

/// Attention mass on the target entries (indices into the row).
double fidelity(std::span<const double> weights, std::span<const std::size_t> targets);
double fidelity(const Vector& weights, std::span<const std::size_t> targets);

struct Leakage {
  std::vector<double> per_block_mass;
  double off_block_total = 0.0;
  // max over wrong-block keys / max over correct-block keys
  double max_wrong_key_ratio = 0.0;
};

/// key_blocks[j] is the block of row entry j.
Leakage leakage(const Vector& weights, std::span<const std::size_t> key_blocks,
                const BlockPartition& partition, std::size_t correct_block);

struct ConcentrationVerdict {
  double max_wrong_key_ratio = 0.0;
  double bound = 1.0;  // e^(-delta / tau)
  bool per_key_pass = true;
  // Largest attention mass on any single wrong block.
  double max_wrong_block_mass = 0.0;
  bool block_sum_pass = true;
};

inline constexpr double kBoundRelativeTolerance = 1e-9;

ConcentrationVerdict check_concentration(const HeadRow& row, std::span<const std::size_t> key_blocks,
                                         const BlockPartition& partition, std::size_t correct_block,
                                         double delta, double tau);

/// Per-query verdicts for every position of a full trace, each query taking
/// `correct_block` as its governing block.
std::vector<ConcentrationVerdict> check_concentration(const AttentionTrace& trace,
                                                      std::span<const TokenId> tokens,
                                                      const BlockPartition& partition,
                                                      std::size_t correct_block, double delta,
                                                      double tau, std::size_t head = 0);

nlohmann::json model_to_json(const AttentionModel& model);
AttentionModel model_from_json(const nlohmann::json& doc);

/// Weights and logits rounded to 12 significant digits.
nlohmann::json trace_to_json(const QueryTrace& trace);
nlohmann::json trace_to_json(const AttentionTrace& trace);

}  // namespace localist
