// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/objective.hpp"
#include "localist/trainer.hpp"
#include "support.hpp"

namespace localist {
namespace {

using testing::pointer_fixture;

// Closed-form block soft-threshold of a single group.
Matrix shrink(const Matrix& g, double t) {
  const double n = g.norm();
  return n <= t ? Matrix::Zero(g.rows(), g.cols()) : Matrix((1.0 - t / n) * g);
}

TEST(Prox, MatchesClosedForm) {
  Rng rng(4);
  const Matrix w = random_normal(6, 3, 1.0, rng);
  const std::vector<FeatureSlice> groups{{0, 2}, {2, 5}, {5, 6}};
  const std::vector<double> t{0.1, 100.0, 0.0};
  const Matrix out = prox_group(w, groups, t);
  EXPECT_LT((out.topRows(2) - shrink(w.topRows(2), 0.1)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(out.middleRows(2, 3).isZero(0.0));
  EXPECT_EQ(out.row(5), w.row(5));
}

TEST(Prox, RejectsOverlapAndNegativeThreshold) {
  const Matrix w = Matrix::Ones(4, 2);
  const std::vector<FeatureSlice> overlap{{0, 3}, {2, 4}};
  const std::vector<double> t{1.0, 1.0};
  EXPECT_THROW(prox_group(w, overlap, t), Error);
  const std::vector<FeatureSlice> ok{{0, 2}, {2, 4}};
  const std::vector<double> neg{1.0, -1.0};
  EXPECT_THROW(prox_group(w, ok, neg), Error);
}

TEST(Prox, IsNonExpansive) {
  Rng rng(8);
  const std::vector<FeatureSlice> groups{{0, 3}, {3, 6}};
  const std::vector<double> t{0.7, 0.2};
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_normal(6, 2, 1.0, rng);
    const Matrix b = random_normal(6, 2, 1.0, rng);
    EXPECT_LE((prox_group(a, groups, t) - prox_group(b, groups, t)).norm(), (a - b).norm() + 1e-12);
  }
}

TEST(ThresholdLambda, WorkedValues) {
  EXPECT_DOUBLE_EQ(threshold_lambda(1.0, 1.0, 0.0), 1.0);
  EXPECT_NEAR(threshold_lambda(2.0, 0.5, 1.0), 4.0 * std::exp(-2.0), 1e-15);
  EXPECT_NEAR(threshold_lambda(3.0, 0.1, 2.0), 30.0 * std::exp(-20.0), 1e-20);
  EXPECT_THROW(threshold_lambda(1.0, 0.0, 1.0), Error);
  EXPECT_THROW(threshold_lambda(-1.0, 1.0, 1.0), Error);
}

TEST(ThresholdLambda, DecreasesWithMargin) {
  double prev = threshold_lambda(1.0, 0.5, 0.0);
  for (double d = 0.25; d <= 3.0; d += 0.25) {
    const double cur = threshold_lambda(1.0, 0.5, d);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

struct Small {
  testing::Fixture f = pointer_fixture(1, 64);
  AttentionModel model;
  DialSettings dial;
  Small() {
    Rng rng(13);
    model = init_model({4, f.bundle.partition.dim(), 8, 8, f.bundle.partition.vocab_size()}, 0.5, 0.3, rng);
    dial = make_dial(RegimePreset::kIntermediate, 4, 4, 1.0, 1e-3);
  }
  std::span<const PointerSample> batch() const { return std::span(f.samples).first(16); }
};

TEST(Loss, ComponentsAddUp) {
  const Small s;
  const auto l = loss(s.model, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, s.dial);
  EXPECT_NEAR(l.total, l.task_loss + l.group_penalty + l.value_penalty, 1e-12);
  EXPECT_NEAR(l.group_penalty, group_penalty(s.model, s.f.bundle.partition, s.dial), 1e-12);
  double task = 0.0;
  for (const auto& x : s.batch()) task += sample_task_loss(s.model, x, s.f.bundle.embeddings);
  EXPECT_NEAR(l.task_loss, task / static_cast<double>(s.batch().size()), 1e-12);
}

TEST(Loss, GroupPenaltyByHand) {
  const Small s;
  double expect = 0.0;
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& sl = s.f.bundle.partition.blocks[i].slice;
      const auto r = static_cast<Eigen::Index>(sl.begin);
      const auto n = static_cast<Eigen::Index>(sl.size());
      expect += s.dial.alpha(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i)) *
                (s.model.heads[h].query.middleRows(r, n).norm() + s.model.heads[h].key.middleRows(r, n).norm());
    }
  EXPECT_NEAR(group_penalty(s.model, s.f.bundle.partition, s.dial), expect, 1e-12);
}

// Finite differences of task + value penalty against the analytic gradient,
// one weight matrix at a time.
TEST(Gradient, MatchesFiniteDifferences) {
  const Small s;
  const auto g = grad_smooth(s.model, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, s.dial);
  const auto smooth = [&](const AttentionModel& m) {
    const auto l = loss(m, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, s.dial);
    return l.task_loss + l.value_penalty;
  };
  for (std::size_t h : {0u, 3u}) {
    for (int which = 0; which < 3; ++which) {
      const auto f = [&](const Matrix& w) {
        AttentionModel m = s.model;
        (which == 0 ? m.heads[h].query : which == 1 ? m.heads[h].key : m.heads[h].value) = w;
        return smooth(m);
      };
      const auto& at = which == 0 ? s.model.heads[h].query : which == 1 ? s.model.heads[h].key : s.model.heads[h].value;
      const auto& an = which == 0 ? g.heads[h].query : which == 1 ? g.heads[h].key : g.heads[h].value;
      EXPECT_LT(grad_check(f, an, at), 1e-6) << "head " << h << " matrix " << which;
    }
  }
  const auto fr = [&](const Matrix& w) {
    AttentionModel m = s.model;
    m.readout = w;
    return smooth(m);
  };
  EXPECT_LT(grad_check(fr, g.readout, s.model.readout), 1e-6);
}

TEST(Kkt, HugeAlphaZeroesEveryOffBlockGroup) {
  Small s;
  s.dial = uniform_dial(4, 4, 1e9, 0.5, 1.0);
  apply_group_prox(s.model, s.f.bundle.partition, s.dial, 0.5);
  const auto rep = kkt_check(s.model, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, s.dial);
  EXPECT_EQ(rep.violations(), 0u);
  // 4 heads x 3 off-home blocks x {query, key}
  EXPECT_EQ(rep.zero_groups(), 24u);
}

TEST(Kkt, ZeroGroupWithoutPenaltyIsViolation) {
  Small s;
  s.dial = uniform_dial(4, 4, 0.0, 0.5, 1.0);
  const auto& sl = s.f.bundle.partition.blocks[1].slice;
  s.model.heads[0].query.middleRows(static_cast<Eigen::Index>(sl.begin), static_cast<Eigen::Index>(sl.size())).setZero();
  const auto rep = kkt_check(s.model, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, s.dial);
  EXPECT_GE(rep.violations(), 1u);
}

TEST(CPrime, ProductOfItsFactors) {
  const Small s;
  const auto est = estimate_c_prime(s.model, s.batch(), s.f.bundle.partition, s.f.bundle.embeddings, 2);
  EXPECT_EQ(est.block_size, 4u);  // anchor, two fillers, trigger
  EXPECT_GT(est.c, 0.0);
  EXPECT_NEAR(est.c_prime, est.c * 4.0 * est.cov_norm, 1e-15);
}

TEST(CrossBlock, BoundHoldsOnRandomModel) {
  const Small s;
  for (std::size_t b = 0; b < 4; ++b)
    for (const auto& r : cross_block_grad_bound(s.model, s.f.samples, s.f.bundle.partition, s.f.bundle.embeddings, b))
      EXPECT_TRUE(r.holds) << "block " << b << " head " << r.head << ": " << r.actual_grad_norm << " > " << r.bound;
}

TEST(Dial, JsonRoundTrip) {
  const auto d = make_dial(RegimePreset::kLocalist, 5, 3);
  EXPECT_EQ(dial_from_json(nlohmann::json::parse(dial_to_json(d).dump())), d);
}

}  // namespace
}  // namespace localist
