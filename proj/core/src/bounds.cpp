// SPDX-License-Identifier: Apache-2.0
#include "localist/bounds.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "localist/margin.hpp"

namespace localist {

namespace {

// Largest value of -x log x over x in [0, u].
double max_neg_xlogx(double u) {
  if (u <= 0.0) return 0.0;
  if (u <= 1.0 / std::numbers::e) return -u * std::log(u);
  return 1.0 / std::numbers::e;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<BoundRow> evaluate_bounds(const AttentionModel& model, std::span<const PointerSample> samples,
                                      const BlockPartition& partition, const EmbeddingTable& embeddings,
                                      double premise_delta) {
  std::vector<BoundRow> rows;
  const double tau = model.tau;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& sample = samples[s];
    const auto trace = attend(model, embed(sample.tokens, embeddings), sample.query_index,
                              SelfMask::kExcludeSelf);
    const std::size_t correct = sample.governing_block;
    const double anchors = static_cast<double>(partition.blocks[correct].anchors.size());

    // target_span holds sequence positions; map them to row entries.
    for (std::size_t h = 0; h < trace.heads.size(); ++h) {
      const auto& head = trace.heads[h];
      const auto blocks = key_blocks(head, sample.tokens, partition);
      std::vector<std::size_t> targets;
      for (std::size_t j = 0; j < head.keys.size(); ++j)
        for (std::size_t pos : sample.target_span)
          if (head.keys[j] == pos) targets.push_back(j);

      BoundRow r;
      r.sample = s;
      r.head = h;
      r.governing_block = correct;
      r.margin = query_margin(head.scores, blocks, correct);
      r.premise = r.margin >= premise_delta;
      for (std::size_t b : blocks) (b == correct ? r.n_correct : r.n_off)++;

      const double u = std::exp(-r.margin / tau);
      const double n_off = static_cast<double>(r.n_off);
      const double allowed = 1.0 + kBoundRelativeTolerance;

      r.entropy = entropy(head.weights);
      r.log_anchor_count = std::log(anchors * static_cast<double>(sample.target_span.size()));
      r.cor1_bound = r.log_anchor_count + (n_off / std::numbers::e) * u;
      r.cor1_pass = r.entropy <= r.cor1_bound * allowed;
      r.cor1_tight_bound = std::log(static_cast<double>(r.n_correct)) + n_off * (u + max_neg_xlogx(u));
      r.cor1_tight_pass = r.entropy <= r.cor1_tight_bound * allowed;

      r.fidelity = fidelity(head.weights, targets);
      r.cor2_bound = 1.0 - n_off * u;
      r.cor2_pass = r.fidelity >= r.cor2_bound - kBoundRelativeTolerance * std::abs(r.cor2_bound);

      const auto verdict = check_concentration(head, blocks, partition, correct,
                                               std::max(r.margin, 0.0), tau);
      r.per_key_ratio = verdict.max_wrong_key_ratio;
      r.step4_bound = u;
      r.step4_per_key_pass = r.per_key_ratio <= u * allowed;
      r.max_wrong_block_mass = verdict.max_wrong_block_mass;
      r.step4_block_sum_pass = r.max_wrong_block_mass <= u * allowed;
      rows.push_back(r);
    }
  }
  return rows;
}

std::string bounds_csv_header() {
  return "sample,head,governing_block,margin,premise,n_off,H_t,log_A,cor1_bound,cor1_pass,"
         "cor1_tight_bound,cor1_tight_pass,fidelity,cor2_bound,cor2_pass,per_key_ratio,step4_bound,"
         "step4_per_key_pass,max_wrong_block_mass,step4_block_sum_pass";
}

std::string bounds_csv_line(const BoundRow& r) {
  auto flag = [](bool b) { return b ? std::string("true") : std::string("false"); };
  return std::to_string(r.sample) + "," + std::to_string(r.head) + "," + std::to_string(r.governing_block) +
         "," + num(r.margin) + "," + flag(r.premise) + "," + std::to_string(r.n_off) + "," +
         num(r.entropy) + "," + num(r.log_anchor_count) + "," + num(r.cor1_bound) + "," +
         flag(r.cor1_pass) + "," + num(r.cor1_tight_bound) + "," + flag(r.cor1_tight_pass) + "," +
         num(r.fidelity) + "," + num(r.cor2_bound) + "," + flag(r.cor2_pass) + "," +
         num(r.per_key_ratio) + "," + num(r.step4_bound) + "," + flag(r.step4_per_key_pass) + "," +
         num(r.max_wrong_block_mass) + "," + flag(r.step4_block_sum_pass);
}

}  // namespace localist
