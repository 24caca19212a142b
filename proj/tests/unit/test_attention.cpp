// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "localist/attention.hpp"
#include "localist/margin.hpp"
#include "support.hpp"

namespace localist {
namespace {

struct Setup {
  PartitionBundle bundle;
  AttentionModel model;
  std::vector<TokenId> tokens;
  Matrix x;
};

Setup setup(double tau = 0.7) {
  Setup s;
  Rng rng(21);
  s.bundle = build_partition({3, 1, 1, 4, 0.5}, rng);
  ModelShape shape{2, s.bundle.partition.dim(), 3, 5, s.bundle.partition.vocab_size()};
  s.model = init_model(shape, tau, 0.5, rng);
  s.tokens = {0, 2, 4, 1, 6, 3};
  s.x = embed(s.tokens, s.bundle.embeddings);
  return s;
}

// Straight transcription of softmax(Q K^T / tau) V per head.
Matrix naive_weights(const AttentionModel& m, const Matrix& x, std::size_t h, bool exclude_self) {
  const Matrix q = x * m.heads[h].query;
  const Matrix k = x * m.heads[h].key;
  const Eigen::Index n = x.rows();
  Matrix w(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double z = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      w(i, j) = (exclude_self && i == j) ? 0.0 : std::exp(q.row(i).dot(k.row(j)) / m.tau);
      z += w(i, j);
    }
    w.row(i) /= z;
  }
  return w;
}

TEST(Forward, MatchesNaiveComputation) {
  for (bool exclude : {false, true}) {
    const auto s = setup();
    const auto trace = forward(s.model, s.x, exclude ? SelfMask::kExcludeSelf : SelfMask::kNone);
    Matrix out = Matrix::Zero(s.x.rows(), static_cast<Eigen::Index>(s.model.vocab()));
    for (std::size_t h = 0; h < s.model.head_count(); ++h) {
      const Matrix w = naive_weights(s.model, s.x, h, exclude);
      EXPECT_LT((trace.weights[h] - w).cwiseAbs().maxCoeff(), 1e-13);
      const Matrix ctx = w * (s.x * s.model.heads[h].value);
      EXPECT_LT((trace.contexts[h] - ctx).cwiseAbs().maxCoeff(), 1e-12);
      out += ctx * s.model.readout.middleRows(static_cast<Eigen::Index>(h * s.model.value_dim()),
                                              static_cast<Eigen::Index>(s.model.value_dim()));
    }
    EXPECT_LT((trace.output - out).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, RowsAreStochastic) {
  const auto s = setup();
  const auto trace = forward(s.model, s.x);
  for (const auto& w : trace.weights) {
    EXPECT_GE(w.minCoeff(), 0.0);
    for (Eigen::Index i = 0; i < w.rows(); ++i) EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-12);
  }
}

TEST(Forward, ExcludeSelfZeroesDiagonal) {
  const auto s = setup();
  const auto trace = forward(s.model, s.x, SelfMask::kExcludeSelf);
  for (const auto& w : trace.weights)
    for (Eigen::Index i = 0; i < w.rows(); ++i) EXPECT_EQ(w(i, i), 0.0);
  for (const auto& l : trace.logits) EXPECT_EQ(l(0, 0), -std::numeric_limits<double>::infinity());
}

TEST(Attend, AgreesWithFullForward) {
  const auto s = setup();
  const auto trace = forward(s.model, s.x, SelfMask::kExcludeSelf);
  const auto row = attend(s.model, s.x, 2, SelfMask::kExcludeSelf);
  EXPECT_EQ(row.heads[0].keys.size(), s.tokens.size() - 1);
  for (std::size_t h = 0; h < s.model.head_count(); ++h)
    for (std::size_t j = 0; j < row.heads[h].keys.size(); ++j)
      EXPECT_NEAR(row.heads[h].weights(static_cast<Eigen::Index>(j)),
                  trace.weights[h](2, static_cast<Eigen::Index>(row.heads[h].keys[j])), 1e-14);
  EXPECT_LT((row.output - trace.output.row(2).transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Entropy, KnownValues) {
  const std::vector<double> uniform(4, 0.25);
  EXPECT_NEAR(entropy(uniform), std::log(4.0), 1e-15);
  const std::vector<double> one_hot{0.0, 1.0, 0.0};
  EXPECT_EQ(entropy(one_hot), 0.0);
}

TEST(Entropy, NonIncreasingAsTemperatureDrops) {
  auto s = setup();
  double previous = std::numeric_limits<double>::infinity();
  for (double tau : {4.0, 2.0, 1.0, 0.5, 0.25, 0.1}) {
    s.model.tau = tau;
    const auto row = attend(s.model, s.x, 0, SelfMask::kExcludeSelf);
    const double h = entropy(row.heads[0].weights);
    EXPECT_LE(h, previous + 1e-12);
    previous = h;
  }
}

TEST(Fidelity, SumsTargetMass) {
  const std::vector<double> w{0.1, 0.5, 0.4};
  const std::vector<std::size_t> t{1, 2};
  EXPECT_NEAR(fidelity(w, t), 0.9, 1e-15);
}

TEST(Leakage, SplitsMassByBlock) {
  const auto s = setup();
  Vector w(4);
  w << 0.6, 0.2, 0.15, 0.05;
  const std::vector<std::size_t> kb{0, 0, 1, 2};
  const auto l = leakage(w, kb, s.bundle.partition, 0);
  EXPECT_NEAR(l.per_block_mass[0], 0.8, 1e-15);
  EXPECT_NEAR(l.per_block_mass[1], 0.15, 1e-15);
  EXPECT_NEAR(l.off_block_total, 0.2, 1e-15);
  EXPECT_NEAR(l.max_wrong_key_ratio, 0.15 / 0.6, 1e-15);
}

TEST(Concentration, SharpOracleHeadMeetsBound) {
  const auto f = testing::pointer_fixture();
  // Moderate sharpness keeps exp(-margin / tau) representable.
  const auto model = testing::oracle_model(f.bundle, 0.1, 20.0);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& sample = f.samples[i];
    const Matrix x = embed(sample.tokens, f.bundle.embeddings);
    const auto q = attend(model, x, sample.query_index, SelfMask::kExcludeSelf);
    const auto& row = q.heads[sample.governing_block];
    const auto kb = key_blocks(row, sample.tokens, f.bundle.partition);
    const double margin = query_margin(row.scores, kb, sample.governing_block);
    ASSERT_GT(margin, 0.0);
    const auto v = check_concentration(row, kb, f.bundle.partition, sample.governing_block, margin, model.tau);
    EXPECT_TRUE(v.per_key_pass) << margin << " ratio " << v.max_wrong_key_ratio << " bound " << v.bound << " head " << sample.governing_block;
    EXPECT_TRUE(v.block_sum_pass);
    EXPECT_NEAR(v.bound, std::exp(-margin / model.tau), 1e-15);
  }
}

TEST(Model, JsonRoundTripIsExact) {
  const auto s = setup();
  const auto back = model_from_json(nlohmann::json::parse(model_to_json(s.model).dump()));
  EXPECT_EQ(back.tau, s.model.tau);
  EXPECT_EQ(back.readout, s.model.readout);
  for (std::size_t h = 0; h < s.model.head_count(); ++h) {
    EXPECT_EQ(back.heads[h].query, s.model.heads[h].query);
    EXPECT_EQ(back.heads[h].key, s.model.heads[h].key);
    EXPECT_EQ(back.heads[h].value, s.model.heads[h].value);
  }
}

TEST(Model, TiedInitCopiesQueryIntoKey) {
  Rng rng(2);
  const auto m = init_model({2, 6, 3, 3, 5}, 1.0, 0.3, rng, true);
  for (const auto& h : m.heads) EXPECT_EQ(h.query, h.key);
}

TEST(Model, ValidateRejectsShapeMismatch) {
  auto s = setup();
  s.model.heads[1].key = Matrix::Zero(2, 2);
  EXPECT_THROW(s.model.validate(), Error);
}

}  // namespace
}  // namespace localist
