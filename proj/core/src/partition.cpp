// SPDX-License-Identifier: Apache-2.0
#include "localist/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/serialization.hpp"

namespace localist {

namespace {

Eigen::RowVectorXd random_unit(std::size_t dim, Rng& rng) {
  Eigen::RowVectorXd v(static_cast<Eigen::Index>(dim));
  double norm = 0.0;
  while (norm < 1e-8) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    norm = v.norm();
  }
  return v / norm;
}

}  // namespace

std::size_t BlockPartition::block_of(TokenId token) const {
  if (token >= token_block.size())
    throw Error(ErrorKind::kNotFound, "token " + std::to_string(token) + " is not in the vocabulary");
  return token_block[token];
}

std::size_t BlockPartition::find_block(const std::string& id) const {
  for (std::size_t i = 0; i < blocks.size(); ++i)
    if (blocks[i].id == id) return i;
  throw Error(ErrorKind::kNotFound, "unknown block '" + id + "'");
}

bool BlockPartition::is_anchor(TokenId token) const {
  const auto& anchors = blocks.at(block_of(token)).anchors;
  return std::find(anchors.begin(), anchors.end(), token) != anchors.end();
}

std::vector<TokenId> BlockPartition::tokens_of(std::size_t block) const {
  if (block >= blocks.size())
    throw Error(ErrorKind::kNotFound, "block index " + std::to_string(block) + " out of range");
  const auto& b = blocks[block];
  std::vector<TokenId> out(b.anchors);
  out.insert(out.end(), b.fillers.begin(), b.fillers.end());
  out.push_back(b.trigger);
  return out;
}

void BlockPartition::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::kInvalidInput, "partition: " + why); };
  if (blocks.empty()) fail("no blocks");
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (b.slice.begin != cursor || b.slice.end <= b.slice.begin)
      fail("feature slices must be contiguous, disjoint and nonempty (block " + b.id + ")");
    cursor = b.slice.end;
    if (b.anchors.empty()) fail("block " + b.id + " has no anchors");
    for (TokenId t : tokens_of(i)) {
      if (t >= token_block.size()) fail("token id out of range in block " + b.id);
      if (token_block[t] != i) fail("token " + std::to_string(t) + " listed under the wrong block");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (blocks[j].id == b.id) fail("duplicate block id " + b.id);
  }
  for (std::size_t t = 0; t < token_block.size(); ++t)
    if (token_block[t] >= blocks.size()) fail("token " + std::to_string(t) + " maps to no block");
}

PartitionBundle build_partition(const PartitionSpec& spec, Rng& rng) {
  if (spec.blocks == 0 || spec.anchors_per_block == 0 || spec.dim_per_block == 0)
    throw Error(ErrorKind::kInvalidParameter, "partition counts must be at least 1");
  if (!(spec.cue_affinity >= 0.0 && spec.cue_affinity <= 1.0))
    throw Error(ErrorKind::kInvalidParameter, "cue_affinity must lie in [0, 1]");
  if (spec.dim_per_block < spec.anchors_per_block)
    throw Error(ErrorKind::kInfeasible,
                "cannot place " + std::to_string(spec.anchors_per_block) +
                    " orthogonal anchors in " + std::to_string(spec.dim_per_block) + " dimensions");

  const std::size_t p = spec.blocks;
  const std::size_t per_block = spec.anchors_per_block + spec.fillers_per_block;
  const std::size_t vocab = p * per_block + p;
  const std::size_t d = p * spec.dim_per_block;
  const auto dim_i = static_cast<Eigen::Index>(spec.dim_per_block);

  PartitionBundle out;
  auto& partition = out.partition;
  partition.token_block.assign(vocab, 0);
  out.embeddings.vectors = Matrix::Zero(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(d));
  Matrix& vectors = out.embeddings.vectors;

  for (std::size_t i = 0; i < p; ++i) {
    Block block;
    block.id = "b" + std::to_string(i);
    block.trigger_class = "cue" + std::to_string(i);
    block.slice = {i * spec.dim_per_block, (i + 1) * spec.dim_per_block};
    const auto offset = static_cast<Eigen::Index>(block.slice.begin);

    // Orthonormal anchors from the Q factor of a Gaussian matrix.
    Matrix gaussian = random_normal(dim_i, static_cast<Eigen::Index>(spec.anchors_per_block), 1.0, rng);
    Eigen::HouseholderQR<Matrix> qr(gaussian);
    Matrix q = qr.householderQ() * Matrix::Identity(dim_i, gaussian.cols());

    TokenId next = i * per_block;
    for (std::size_t a = 0; a < spec.anchors_per_block; ++a, ++next) {
      block.anchors.push_back(next);
      partition.token_block[next] = i;
      vectors.row(static_cast<Eigen::Index>(next)).segment(offset, dim_i) =
          q.col(static_cast<Eigen::Index>(a)).transpose();
    }
    for (std::size_t f = 0; f < spec.fillers_per_block; ++f, ++next) {
      block.fillers.push_back(next);
      partition.token_block[next] = i;
      vectors.row(static_cast<Eigen::Index>(next)).segment(offset, dim_i) =
          random_unit(spec.dim_per_block, rng);
    }
    block.trigger = p * per_block + i;
    partition.token_block[block.trigger] = i;
    const Eigen::RowVectorXd mean_anchor = q.rowwise().sum().transpose().normalized();
    Eigen::RowVectorXd cue =
        spec.cue_affinity * mean_anchor + (1.0 - spec.cue_affinity) * random_unit(spec.dim_per_block, rng);
    if (cue.norm() == 0.0) cue = mean_anchor;
    vectors.row(static_cast<Eigen::Index>(block.trigger)).segment(offset, dim_i) = cue.normalized();
    partition.blocks.push_back(std::move(block));
  }
  return out;
}

std::vector<AnchorScore> score_anchors(const BlockPartition& partition,
                                       const EmbeddingTable& embeddings) {
  std::vector<AnchorScore> scores;
  for (std::size_t i = 0; i < partition.block_count(); ++i) {
    const auto& anchors = partition.blocks[i].anchors;
    for (TokenId a : anchors) {
      AnchorScore s;
      s.anchor = a;
      s.block = i;
      double total = 0.0;
      std::size_t pairs = 0;
      for (TokenId other : anchors) {
        if (other == a) continue;
        total += (embeddings.row(a) - embeddings.row(other)).norm();
        ++pairs;
      }
      s.within_block_spread = pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < partition.block_count(); ++j) {
        if (j == i) continue;
        for (TokenId other : partition.blocks[j].anchors)
          nearest = std::min(nearest, (embeddings.row(a) - embeddings.row(other)).norm());
      }
      s.between_block_min_distance = std::isfinite(nearest) ? nearest : 0.0;
      scores.push_back(s);
    }
  }
  return scores;
}

double block_cov_norm(const BlockPartition& partition, const EmbeddingTable& embeddings,
                      std::size_t block) {
  if (block >= partition.block_count())
    throw Error(ErrorKind::kNotFound, "block index " + std::to_string(block) + " out of range");
  const auto tokens = partition.tokens_of(block);
  const auto& slice = partition.blocks[block].slice;
  Matrix rows(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(slice.size()));
  for (std::size_t r = 0; r < tokens.size(); ++r)
    rows.row(static_cast<Eigen::Index>(r)) =
        embeddings.row(tokens[r]).segment(static_cast<Eigen::Index>(slice.begin),
                                          static_cast<Eigen::Index>(slice.size()));
  // ||(1/n) X^T X|| = ||X||^2 / n
  const double sigma = spectral_norm(rows, 1e-13, 200000);
  return sigma * sigma / static_cast<double>(tokens.size());
}

double block_cov_norm(const BlockPartition& partition, const EmbeddingTable& embeddings,
                      const std::string& block_id) {
  return block_cov_norm(partition, embeddings, partition.find_block(block_id));
}

PartitionBundle duplicate_anchors(const BlockPartition& partition, const EmbeddingTable& embeddings,
                                  std::size_t block, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::kInvalidParameter, "redundancy factor k must be at least 1");
  if (block >= partition.block_count())
    throw Error(ErrorKind::kNotFound, "block index " + std::to_string(block) + " out of range");
  PartitionBundle out{partition, embeddings};
  const auto originals = partition.blocks[block].anchors;
  const std::size_t extra = originals.size() * (k - 1);
  const auto old_vocab = static_cast<Eigen::Index>(partition.vocab_size());
  out.embeddings.vectors.conservativeResize(old_vocab + static_cast<Eigen::Index>(extra),
                                            Eigen::NoChange);
  TokenId next = partition.vocab_size();
  for (std::size_t copy = 1; copy < k; ++copy) {
    for (TokenId a : originals) {
      out.partition.blocks[block].anchors.push_back(next);
      out.partition.token_block.push_back(block);
      out.embeddings.vectors.row(static_cast<Eigen::Index>(next)) = embeddings.row(a);
      ++next;
    }
  }
  return out;
}

nlohmann::json partition_to_json(const BlockPartition& partition, const EmbeddingTable& embeddings) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : partition.blocks) {
    blocks.push_back({{"id", b.id},
                      {"slice", {b.slice.begin, b.slice.end}},
                      {"anchors", b.anchors},
                      {"fillers", b.fillers},
                      {"trigger", b.trigger},
                      {"trigger_class", b.trigger_class}});
  }
  return {{"schema", kPartitionSchema},
          {"version", kPartitionSchemaVersion},
          {"p", partition.block_count()},
          {"dim", partition.dim()},
          {"blocks", std::move(blocks)},
          {"token_block", partition.token_block},
          {"vectors", matrix_to_json(embeddings.vectors)}};
}

PartitionBundle partition_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("schema").get<std::string>() != kPartitionSchema)
      throw Error(ErrorKind::kInvalidInput, "not a partition document");
    if (doc.at("version").get<int>() != kPartitionSchemaVersion)
      throw Error(ErrorKind::kInvalidInput, "unsupported partition schema version");
    PartitionBundle out;
    for (const auto& jb : doc.at("blocks")) {
      Block b;
      b.id = jb.at("id").get<std::string>();
      const auto slice = jb.at("slice").get<std::vector<std::size_t>>();
      if (slice.size() != 2) throw Error(ErrorKind::kInvalidInput, "slice must be [begin, end]");
      b.slice = {slice[0], slice[1]};
      b.anchors = jb.at("anchors").get<std::vector<TokenId>>();
      b.fillers = jb.at("fillers").get<std::vector<TokenId>>();
      b.trigger = jb.at("trigger").get<TokenId>();
      b.trigger_class = jb.at("trigger_class").get<std::string>();
      out.partition.blocks.push_back(std::move(b));
    }
    out.partition.token_block = doc.at("token_block").get<std::vector<std::size_t>>();
    out.embeddings.vectors = matrix_from_json(doc.at("vectors"));
    out.partition.validate();
    if (doc.at("p").get<std::size_t>() != out.partition.block_count())
      throw Error(ErrorKind::kInvalidInput, "block count does not match 'p'");
    if (out.embeddings.vectors.rows() != static_cast<Eigen::Index>(out.partition.vocab_size()) ||
        out.embeddings.dim() != out.partition.dim())
      throw Error(ErrorKind::kInvalidInput, "embedding table shape does not match the partition");
    for (std::size_t t = 0; t < out.partition.vocab_size(); ++t) {
      const auto& slice = out.partition.blocks[out.partition.token_block[t]].slice;
      for (std::size_t c = 0; c < out.partition.dim(); ++c)
        if (!slice.contains(c) && out.embeddings.vectors(static_cast<Eigen::Index>(t),
                                                         static_cast<Eigen::Index>(c)) != 0.0)
          throw Error(ErrorKind::kInvalidInput,
                      "token " + std::to_string(t) + " has support outside its block slice");
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed partition document: ") + e.what());
  }
}

std::string partition_checksum(const BlockPartition& partition, const EmbeddingTable& embeddings) {
  return sha256_hex(partition_to_json(partition, embeddings).dump());
}

}  // namespace localist
