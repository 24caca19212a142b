// SPDX-License-Identifier: Apache-2.0
// Fixtures shared by the unit tests and the acceptance runner.
#pragma once

#include <span>
#include <vector>

#include "localist/attention.hpp"
#include "localist/partition.hpp"
#include "localist/taskgen.hpp"
#include "localist/trainer.hpp"

namespace localist::testing {

struct Fixture {
  PartitionBundle bundle;
  std::vector<PointerSample> samples;
  std::string checksum;

  TrainingData data() const {
    return {&bundle.partition, &bundle.embeddings, samples, checksum};
  }
  std::span<const PointerSample> eval(std::size_t n = 256) const {
    return std::span<const PointerSample>(samples).first(std::min(n, samples.size()));
  }
};

inline constexpr std::uint64_t kPartitionSeed = 7;
inline constexpr std::uint64_t kTaskSeed = 11;

/// p blocks with one anchor and two fillers each, 8 dims per block; every
/// query sees its own anchor and one other block's anchor, each repeated k
/// times.
inline Fixture pointer_fixture(std::size_t redundancy = 1, std::size_t samples = 2000, std::size_t blocks = 4) {
  Fixture f;
  Rng prng(kPartitionSeed);
  f.bundle = build_partition({blocks, 1, 2, 8, 0.5}, prng);
  f.checksum = partition_checksum(f.bundle.partition, f.bundle.embeddings);
  TaskConfig tc;
  tc.sequence_length = 1 + 2 * redundancy;
  tc.blocks_present = 2;
  tc.redundancy = redundancy;
  tc.samples = samples;
  tc.seed = kTaskSeed;
  Rng trng(tc.seed);
  f.samples = generate(tc, f.bundle.partition, trng);
  return f;
}

inline TrainerConfig trainer_config(RegimePreset preset, std::size_t blocks = 4, std::size_t heads = 4) {
  TrainerConfig c;
  c.step_size = 0.5;
  c.steps = 400;
  c.batch_size = 32;
  c.seed = 3;
  c.checkpoint_every = 50;
  c.regime_preset = preset;
  c.dial = preset == RegimePreset::kCustom ? uniform_dial(heads, blocks, 0.0, 1.0, 0.0)
                                           : make_dial(preset, heads, blocks);
  return c;
}

/// Hand-built model that reads the governing anchor directly: head h only
/// sees block h's slice with very sharp query-key scores, values are the
/// identity, and the readout maps each anchor vector to its own token.
inline AttentionModel oracle_model(const PartitionBundle& bundle, double tau = 0.1, double sharpness = 1e4) {
  const auto& part = bundle.partition;
  const auto d = static_cast<Eigen::Index>(part.dim());
  const auto p = part.block_count();
  AttentionModel m;
  m.tau = tau;
  m.readout = Matrix::Zero(static_cast<Eigen::Index>(p) * d, static_cast<Eigen::Index>(part.vocab_size()));
  for (std::size_t h = 0; h < p; ++h) {
    const auto& slice = part.blocks[h].slice;
    HeadWeights w;
    w.query = Matrix::Zero(d, d);
    w.key = Matrix::Zero(d, d);
    w.value = Matrix::Identity(d, d);
    for (std::size_t r = slice.begin; r < slice.end; ++r) {
      const auto i = static_cast<Eigen::Index>(r);
      w.query(i, i) = std::sqrt(sharpness);
      w.key(i, i) = std::sqrt(sharpness);
    }
    for (TokenId a : part.blocks[h].anchors)
      m.readout.block(static_cast<Eigen::Index>(h) * d, static_cast<Eigen::Index>(a), d, 1) =
          bundle.embeddings.vectors.row(static_cast<Eigen::Index>(a)).transpose();
    m.heads.push_back(std::move(w));
  }
  return m;
}

}  // namespace localist::testing
