// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/attention.hpp"
#include "localist/partition.hpp"
#include "localist/taskgen.hpp"

namespace localist {

/// The locality dial. alpha(h, i) penalizes the block-i row group of head h's
/// query and key projections. Each head has a designated ("home") block; the
/// other blocks are its off-block groups.
struct DialSettings {
  Matrix alpha;                          // heads x blocks
  double beta = 1e-4;
  double tau = 1.0;
  std::vector<double> delta_target;      // per block
  std::vector<std::size_t> head_home;    // per head

  std::size_t head_count() const { return static_cast<std::size_t>(alpha.rows()); }
  std::size_t block_count() const { return static_cast<std::size_t>(alpha.cols()); }
  bool is_off_block(std::size_t head, std::size_t block) const { return block != head_home.at(head); }

  void validate(std::size_t heads, std::size_t blocks) const;

  friend bool operator==(const DialSettings&, const DialSettings&) = default;
};

nlohmann::json dial_to_json(const DialSettings& dial);
DialSettings dial_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double task_loss = 0.0;
  double group_penalty = 0.0;
  double value_penalty = 0.0;
  double total = 0.0;
};

nlohmann::json loss_to_json(const LossBreakdown& loss);

/// Gradient with the same layout as the model's weights.
struct ModelGradient {
  std::vector<HeadWeights> heads;
  Matrix readout;

  static ModelGradient zeros_like(const AttentionModel& model);
  ModelGradient& operator+=(const ModelGradient& other);
  ModelGradient& operator*=(double scale);
};

LossBreakdown loss(const AttentionModel& model, std::span<const PointerSample> batch,
                   const BlockPartition& partition, const EmbeddingTable& embeddings,
                   const DialSettings& dial);

/// Cross-entropy of one sample's readout under the pointer task (the query
/// attends over every other position).
double sample_task_loss(const AttentionModel& model, const PointerSample& sample,
                        const EmbeddingTable& embeddings);

double group_penalty(const AttentionModel& model, const BlockPartition& partition,
                     const DialSettings& dial);

struct SmoothEvaluation {
  LossBreakdown loss;
  ModelGradient gradient;  // of task_loss + value_penalty only
};

SmoothEvaluation evaluate_smooth(const AttentionModel& model, std::span<const PointerSample> batch,
                                 const BlockPartition& partition, const EmbeddingTable& embeddings,
                                 const DialSettings& dial);

ModelGradient grad_smooth(const AttentionModel& model, std::span<const PointerSample> batch,
                          const BlockPartition& partition, const EmbeddingTable& embeddings,
                          const DialSettings& dial);

/// d loss / d alpha_{t->j} for each head and key of one sample.
std::vector<Vector> attention_partials(const AttentionModel& model, const PointerSample& sample,
                                       const EmbeddingTable& embeddings);

/// Block soft-threshold over disjoint row groups.
Matrix prox_group(const Matrix& w, std::span<const FeatureSlice> groups,
                  std::span<const double> thresholds);

/// Applies prox_group to every head's query and key projections with
/// thresholds step * alpha(h, i).
void apply_group_prox(AttentionModel& model, const BlockPartition& partition, const DialSettings& dial,
                      double step);

/// (c' / tau) * exp(-delta / tau)
double threshold_lambda(double c_prime, double tau, double delta);

struct CPrimeEstimate {
  double c = 0.0;           // max |d loss / d alpha| over the batch
  std::size_t block_size = 0;
  double cov_norm = 0.0;
  double c_prime = 0.0;     // c * block_size * cov_norm
};

CPrimeEstimate estimate_c_prime(const AttentionModel& model, std::span<const PointerSample> batch,
                                const BlockPartition& partition, const EmbeddingTable& embeddings,
                                std::size_t block);

enum class Projection { kQuery, kKey };
enum class KktStatus { kZeroSatisfied, kZeroViolated, kActive };

std::string_view to_string(Projection p);
std::string_view to_string(KktStatus s);

struct KktEntry {
  std::size_t head = 0;
  std::size_t block = 0;
  Projection projection = Projection::kQuery;
  double group_norm = 0.0;
  double grad_norm = 0.0;
  double alpha = 0.0;
  KktStatus status = KktStatus::kActive;
};

struct KktReport {
  std::vector<KktEntry> entries;

  std::size_t violations() const;
  std::size_t zero_groups() const;
};

inline constexpr double kDefaultKktTolerance = 1e-6;

KktReport kkt_check(const AttentionModel& model, std::span<const PointerSample> batch,
                    const BlockPartition& partition, const EmbeddingTable& embeddings,
                    const DialSettings& dial, double tol = kDefaultKktTolerance);

nlohmann::json kkt_to_json(const KktReport& report);

/// Norm of the query-group gradient of `block` from queries governed by a
/// different block, next to the bound (c'/tau) * (max attention mass on the
/// block over those queries).
struct CrossBlockBound {
  std::size_t head = 0;
  double actual_grad_norm = 0.0;
  double key_grad_norm = 0.0;
  double max_block_mass = 0.0;
  double c_prime = 0.0;
  double bound = 0.0;
  bool holds = true;
};

std::vector<CrossBlockBound> cross_block_grad_bound(const AttentionModel& model,
                                                    std::span<const PointerSample> batch,
                                                    const BlockPartition& partition,
                                                    const EmbeddingTable& embeddings, std::size_t block,
                                                    double slack = 1.0);

}  // namespace localist
