// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/partition.hpp"

namespace localist {
namespace {

PartitionBundle make(std::size_t blocks = 3, std::size_t anchors = 2, std::size_t fillers = 1,
                     std::size_t dim = 4, std::uint64_t seed = 7) {
  Rng rng(seed);
  return build_partition({blocks, anchors, fillers, dim, 0.5}, rng);
}

TEST(Partition, SlicesTileTheSpace) {
  const auto b = make();
  const auto& p = b.partition;
  ASSERT_EQ(p.block_count(), 3u);
  std::size_t expect_begin = 0;
  for (const auto& blk : p.blocks) {
    EXPECT_EQ(blk.slice.begin, expect_begin);
    EXPECT_EQ(blk.slice.size(), 4u);
    expect_begin = blk.slice.end;
  }
  EXPECT_EQ(p.dim(), 12u);
  EXPECT_NO_THROW(p.validate());
}

TEST(Partition, EveryTokenInOneBlock) {
  const auto b = make();
  const auto& p = b.partition;
  EXPECT_EQ(p.vocab_size(), 3u * (2 + 1 + 1));
  for (std::size_t blk = 0; blk < p.block_count(); ++blk)
    for (TokenId t : p.tokens_of(blk)) EXPECT_EQ(p.block_of(t), blk);
}

TEST(Partition, EmbeddingsStayInsideTheirSlice) {
  const auto b = make();
  const auto& p = b.partition;
  for (TokenId t = 0; t < p.vocab_size(); ++t) {
    const auto& slice = p.blocks[p.block_of(t)].slice;
    for (std::size_t c = 0; c < p.dim(); ++c)
      if (!slice.contains(c)) EXPECT_EQ(b.embeddings.vectors(t, c), 0.0);
  }
}

TEST(Partition, AnchorsOrthonormalWithinBlock) {
  const auto b = make(2, 3, 0, 5);
  for (const auto& blk : b.partition.blocks) {
    for (TokenId a : blk.anchors)
      for (TokenId c : blk.anchors) {
        const double dot = b.embeddings.row(a).dot(b.embeddings.row(c));
        EXPECT_NEAR(dot, a == c ? 1.0 : 0.0, 1e-12);
      }
  }
}

TEST(Partition, MoreAnchorsThanDimsIsInfeasible) {
  Rng rng(1);
  try {
    build_partition({2, 5, 0, 4, 0.5}, rng);
    FAIL() << "expected infeasible";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
  }
}

TEST(Partition, DeterministicForSeed) {
  const auto a = make();
  const auto b = make();
  EXPECT_EQ(a.partition, b.partition);
  EXPECT_EQ(a.embeddings.vectors, b.embeddings.vectors);
  EXPECT_EQ(partition_checksum(a.partition, a.embeddings), partition_checksum(b.partition, b.embeddings));
  const auto c = make(3, 2, 1, 4, 8);
  EXPECT_NE(partition_checksum(a.partition, a.embeddings), partition_checksum(c.partition, c.embeddings));
}

TEST(Partition, JsonRoundTripIsExact) {
  const auto a = make();
  const auto doc = partition_to_json(a.partition, a.embeddings);
  const auto b = partition_from_json(nlohmann::json::parse(doc.dump()));
  EXPECT_EQ(a.partition, b.partition);
  EXPECT_EQ(a.embeddings.vectors, b.embeddings.vectors);
}

TEST(Partition, FindBlockById) {
  const auto b = make();
  EXPECT_EQ(b.partition.find_block(b.partition.blocks[2].id), 2u);
  EXPECT_THROW(b.partition.find_block("nope"), Error);
}

TEST(Partition, CovNormMatchesDirectComputation) {
  const auto b = make();
  const auto& p = b.partition;
  for (std::size_t blk = 0; blk < p.block_count(); ++blk) {
    const auto toks = p.tokens_of(blk);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(p.dim(), p.dim());
    for (TokenId t : toks) {
      const Eigen::VectorXd x = b.embeddings.row(t).transpose();
      s += x * x.transpose();
    }
    s /= static_cast<double>(toks.size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    EXPECT_NEAR(block_cov_norm(p, b.embeddings, blk), es.eigenvalues().maxCoeff(), 1e-9);
  }
}

TEST(Partition, DuplicateAnchorsCopiesVectors) {
  const auto b = make(2, 1, 1, 4);
  const auto d = duplicate_anchors(b.partition, b.embeddings, 0, 3);
  const auto& anchors = d.partition.blocks[0].anchors;
  ASSERT_EQ(anchors.size(), 3u);
  EXPECT_EQ(d.partition.vocab_size(), b.partition.vocab_size() + 2);
  for (TokenId a : anchors) {
    EXPECT_EQ(d.partition.block_of(a), 0u);
    EXPECT_EQ(d.embeddings.row(a), b.embeddings.row(anchors.front()));
  }
  EXPECT_NO_THROW(d.partition.validate());
}

TEST(Partition, ValidateRejectsOverlappingSlices) {
  auto b = make();
  b.partition.blocks[1].slice.begin -= 1;
  EXPECT_THROW(b.partition.validate(), Error);
}

TEST(Partition, AnchorScoresCoverEveryAnchor) {
  const auto b = make();
  const auto scores = score_anchors(b.partition, b.embeddings);
  EXPECT_EQ(scores.size(), 6u);
  // Different blocks live in orthogonal slices: unit vectors are sqrt(2) apart.
  for (const auto& s : scores) EXPECT_NEAR(s.between_block_min_distance, std::sqrt(2.0), 1e-9);
}

}  // namespace
}  // namespace localist
