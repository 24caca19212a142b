// SPDX-License-Identifier: Apache-2.0
#include "localist/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/serialization.hpp"

namespace localist {

void DialSettings::validate(std::size_t heads, std::size_t blocks) const {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::kInvalidParameter, "dial: " + why); };
  if (head_count() != heads || block_count() != blocks) fail("alpha must be heads x blocks");
  if (!alpha.allFinite() || (alpha.array() < 0.0).any()) fail("alpha must be finite and nonnegative");
  if (!(tau > 0.0) || !std::isfinite(tau)) fail("tau must be positive");
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta must be finite and nonnegative");
  if (delta_target.size() != blocks) fail("one delta target per block");
  for (double d : delta_target)
    if (!(d >= 0.0) || !std::isfinite(d)) fail("delta targets must be finite and nonnegative");
  if (head_home.size() != heads) fail("one home block per head");
  for (std::size_t b : head_home)
    if (b >= blocks) fail("home block out of range");
}

nlohmann::json dial_to_json(const DialSettings& dial) {
  return {{"alpha", matrix_to_json(dial.alpha)},
          {"beta", dial.beta},
          {"tau", dial.tau},
          {"delta_target", dial.delta_target},
          {"head_home", dial.head_home}};
}

DialSettings dial_from_json(const nlohmann::json& j) {
  DialSettings dial;
  dial.alpha = matrix_from_json(j.at("alpha"));
  dial.beta = j.at("beta").get<double>();
  dial.tau = j.at("tau").get<double>();
  dial.delta_target = j.at("delta_target").get<std::vector<double>>();
  dial.head_home = j.at("head_home").get<std::vector<std::size_t>>();
  dial.validate(dial.head_count(), dial.block_count());
  return dial;
}

nlohmann::json loss_to_json(const LossBreakdown& l) {
  return {{"task_loss", l.task_loss},
          {"group_penalty", l.group_penalty},
          {"value_penalty", l.value_penalty},
          {"total", l.total}};
}

ModelGradient ModelGradient::zeros_like(const AttentionModel& model) {
  ModelGradient g;
  for (const auto& h : model.heads)
    g.heads.push_back({Matrix::Zero(h.query.rows(), h.query.cols()),
                       Matrix::Zero(h.key.rows(), h.key.cols()),
                       Matrix::Zero(h.value.rows(), h.value.cols())});
  g.readout = Matrix::Zero(model.readout.rows(), model.readout.cols());
  return g;
}

ModelGradient& ModelGradient::operator+=(const ModelGradient& other) {
  for (std::size_t h = 0; h < heads.size(); ++h) {
    heads[h].query += other.heads[h].query;
    heads[h].key += other.heads[h].key;
    heads[h].value += other.heads[h].value;
  }
  readout += other.readout;
  return *this;
}

ModelGradient& ModelGradient::operator*=(double scale) {
  for (auto& h : heads) {
    h.query *= scale;
    h.key *= scale;
    h.value *= scale;
  }
  readout *= scale;
  return *this;
}

namespace {

void check_batch(const AttentionModel& model, std::span<const PointerSample> batch,
                 const BlockPartition& partition, const EmbeddingTable& embeddings,
                 const DialSettings& dial) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidInput, "batch is empty");
  model.validate();
  if (model.dim() != embeddings.dim() || model.dim() != partition.dim())
    throw Error(ErrorKind::kInvalidInput, "model width does not match the embeddings");
  if (dial.head_count() != model.head_count() || dial.block_count() != partition.block_count())
    throw Error(ErrorKind::kInvalidInput, "dial dimensions do not match the model");
}

double log_sum_exp(const Vector& z) {
  const double peak = z.maxCoeff();
  return peak + std::log((z.array() - peak).exp().sum());
}

auto group_rows(const Matrix& w, const FeatureSlice& slice) {
  return w.middleRows(static_cast<Eigen::Index>(slice.begin), static_cast<Eigen::Index>(slice.size()));
}

double value_penalty(const AttentionModel& model, double beta) {
  double total = 0.0;
  for (const auto& h : model.heads) total += h.value.squaredNorm();
  return beta * total;
}

// Backpropagates one sample's cross-entropy into `grad` (scaled by weight)
// and returns the sample loss.
double accumulate_sample(const AttentionModel& model, const PointerSample& sample,
                         const EmbeddingTable& embeddings, double weight, ModelGradient& grad) {
  const Matrix x = embed(sample.tokens, embeddings);
  const auto trace = attend(model, x, sample.query_index, SelfMask::kExcludeSelf);
  const auto label = static_cast<Eigen::Index>(sample.label);
  if (label >= trace.output.size()) throw Error(ErrorKind::kInvalidInput, "label outside the readout vocabulary");
  const double sample_loss = log_sum_exp(trace.output) - trace.output(label);

  Vector dz = softmax(trace.output);
  dz(label) -= 1.0;
  dz *= weight;

  const auto dv = static_cast<Eigen::Index>(model.value_dim());
  const auto x_query = x.row(static_cast<Eigen::Index>(sample.query_index));
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    const auto& row = trace.heads[h];
    const auto offset = static_cast<Eigen::Index>(h) * dv;
    grad.readout.middleRows(offset, dv).noalias() += row.context * dz.transpose();
    const Vector dcontext = model.readout.middleRows(offset, dv) * dz;

    Matrix x_keys(static_cast<Eigen::Index>(row.keys.size()), x.cols());
    for (std::size_t j = 0; j < row.keys.size(); ++j)
      x_keys.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(row.keys[j]));

    const Vector g = row.value_vectors * dcontext;  // d loss / d alpha_j
    grad.heads[h].value.noalias() += x_keys.transpose() * (row.weights * dcontext.transpose());

    const double g_mean = row.weights.dot(g);
    const Vector dscores = (row.weights.array() * (g.array() - g_mean)).matrix() / model.tau;
    const Vector dquery = row.key_vectors.transpose() * dscores;
    grad.heads[h].query.noalias() += x_query.transpose() * dquery.transpose();
    grad.heads[h].key.noalias() += x_keys.transpose() * (dscores * row.query.transpose());
  }
  return sample_loss;
}

}  // namespace

double group_penalty(const AttentionModel& model, const BlockPartition& partition,
                     const DialSettings& dial) {
  double total = 0.0;
  for (std::size_t h = 0; h < model.head_count(); ++h)
    for (std::size_t i = 0; i < partition.block_count(); ++i) {
      const auto& slice = partition.blocks[i].slice;
      total += dial.alpha(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i)) *
               (group_rows(model.heads[h].query, slice).norm() + group_rows(model.heads[h].key, slice).norm());
    }
  return total;
}

double sample_task_loss(const AttentionModel& model, const PointerSample& sample,
                        const EmbeddingTable& embeddings) {
  const Matrix x = embed(sample.tokens, embeddings);
  const auto trace = attend(model, x, sample.query_index, SelfMask::kExcludeSelf);
  const auto label = static_cast<Eigen::Index>(sample.label);
  if (label >= trace.output.size()) throw Error(ErrorKind::kInvalidInput, "label outside the readout vocabulary");
  return log_sum_exp(trace.output) - trace.output(label);
}

LossBreakdown loss(const AttentionModel& model, std::span<const PointerSample> batch,
                   const BlockPartition& partition, const EmbeddingTable& embeddings,
                   const DialSettings& dial) {
  check_batch(model, batch, partition, embeddings, dial);
  LossBreakdown out;
  for (const auto& s : batch) out.task_loss += sample_task_loss(model, s, embeddings);
  out.task_loss /= static_cast<double>(batch.size());
  out.group_penalty = group_penalty(model, partition, dial);
  out.value_penalty = value_penalty(model, dial.beta);
  out.total = out.task_loss + out.group_penalty + out.value_penalty;
  return out;
}

SmoothEvaluation evaluate_smooth(const AttentionModel& model, std::span<const PointerSample> batch,
                                 const BlockPartition& partition, const EmbeddingTable& embeddings,
                                 const DialSettings& dial) {
  check_batch(model, batch, partition, embeddings, dial);
  SmoothEvaluation out{{}, ModelGradient::zeros_like(model)};
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) out.loss.task_loss += accumulate_sample(model, s, embeddings, weight, out.gradient);
  out.loss.task_loss *= weight;
  for (std::size_t h = 0; h < model.head_count(); ++h)
    out.gradient.heads[h].value += 2.0 * dial.beta * model.heads[h].value;
  out.loss.group_penalty = group_penalty(model, partition, dial);
  out.loss.value_penalty = value_penalty(model, dial.beta);
  out.loss.total = out.loss.task_loss + out.loss.group_penalty + out.loss.value_penalty;
  return out;
}

ModelGradient grad_smooth(const AttentionModel& model, std::span<const PointerSample> batch,
                          const BlockPartition& partition, const EmbeddingTable& embeddings,
                          const DialSettings& dial) {
  return evaluate_smooth(model, batch, partition, embeddings, dial).gradient;
}

std::vector<Vector> attention_partials(const AttentionModel& model, const PointerSample& sample,
                                       const EmbeddingTable& embeddings) {
  const Matrix x = embed(sample.tokens, embeddings);
  const auto trace = attend(model, x, sample.query_index, SelfMask::kExcludeSelf);
  Vector dz = softmax(trace.output);
  dz(static_cast<Eigen::Index>(sample.label)) -= 1.0;
  const auto dv = static_cast<Eigen::Index>(model.value_dim());
  std::vector<Vector> out;
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    const Vector dcontext = model.readout.middleRows(static_cast<Eigen::Index>(h) * dv, dv) * dz;
    out.push_back(trace.heads[h].value_vectors * dcontext);
  }
  return out;
}

Matrix prox_group(const Matrix& w, std::span<const FeatureSlice> groups,
                  std::span<const double> thresholds) {
  if (groups.size() != thresholds.size())
    throw Error(ErrorKind::kInvalidParameter, "one threshold per group");
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return groups[a].begin < groups[b].begin; });
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& g = groups[order[k]];
    if (g.end < g.begin || g.end > static_cast<std::size_t>(w.rows()))
      throw Error(ErrorKind::kInvalidParameter, "group rows out of range");
    if (k > 0 && groups[order[k - 1]].end > g.begin)
      throw Error(ErrorKind::kInvalidParameter, "groups overlap");
  }
  Matrix out = w;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const double t = thresholds[k];
    if (!(t >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "thresholds must be nonnegative");
    auto rows = out.middleRows(static_cast<Eigen::Index>(groups[k].begin),
                               static_cast<Eigen::Index>(groups[k].size()));
    const double norm = rows.norm();
    if (norm <= t) rows.setZero();
    else if (t > 0.0) rows *= 1.0 - t / norm;
  }
  return out;
}

void apply_group_prox(AttentionModel& model, const BlockPartition& partition, const DialSettings& dial,
                      double step) {
  std::vector<FeatureSlice> groups;
  for (const auto& b : partition.blocks) groups.push_back(b.slice);
  std::vector<double> thresholds(groups.size());
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    for (std::size_t i = 0; i < groups.size(); ++i)
      thresholds[i] = step * dial.alpha(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i));
    model.heads[h].query = prox_group(model.heads[h].query, groups, thresholds);
    model.heads[h].key = prox_group(model.heads[h].key, groups, thresholds);
  }
}

double threshold_lambda(double c_prime, double tau, double delta) {
  if (!(tau > 0.0)) throw Error(ErrorKind::kInvalidParameter, "temperature must be positive");
  if (!(c_prime >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "c' must be nonnegative");
  return (c_prime / tau) * std::exp(-delta / tau);
}

CPrimeEstimate estimate_c_prime(const AttentionModel& model, std::span<const PointerSample> batch,
                                const BlockPartition& partition, const EmbeddingTable& embeddings,
                                std::size_t block) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidInput, "calibration batch is empty");
  CPrimeEstimate est;
  for (const auto& s : batch)
    for (const auto& g : attention_partials(model, s, embeddings))
      if (g.size() > 0) est.c = std::max(est.c, g.cwiseAbs().maxCoeff());
  est.block_size = partition.tokens_of(block).size();
  est.cov_norm = block_cov_norm(partition, embeddings, block);
  est.c_prime = est.c * static_cast<double>(est.block_size) * est.cov_norm;
  return est;
}

std::string_view to_string(Projection p) { return p == Projection::kQuery ? "query" : "key"; }

std::string_view to_string(KktStatus s) {
  switch (s) {
    case KktStatus::kZeroSatisfied: return "zero-satisfied";
    case KktStatus::kZeroViolated: return "zero-violated";
    case KktStatus::kActive: return "active";
  }
  return "unknown";
}

std::size_t KktReport::violations() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) {
    return e.status == KktStatus::kZeroViolated;
  }));
}

std::size_t KktReport::zero_groups() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) {
    return e.status != KktStatus::kActive;
  }));
}

KktReport kkt_check(const AttentionModel& model, std::span<const PointerSample> batch,
                    const BlockPartition& partition, const EmbeddingTable& embeddings,
                    const DialSettings& dial, double tol) {
  if (!(tol > 0.0)) throw Error(ErrorKind::kInvalidParameter, "KKT tolerance must be positive");
  const auto grad = grad_smooth(model, batch, partition, embeddings, dial);
  KktReport report;
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    for (std::size_t i = 0; i < partition.block_count(); ++i) {
      const auto& slice = partition.blocks[i].slice;
      const double a = dial.alpha(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i));
      for (auto proj : {Projection::kQuery, Projection::kKey}) {
        const Matrix& w = proj == Projection::kQuery ? model.heads[h].query : model.heads[h].key;
        const Matrix& gw = proj == Projection::kQuery ? grad.heads[h].query : grad.heads[h].key;
        KktEntry e;
        e.head = h;
        e.block = i;
        e.projection = proj;
        e.alpha = a;
        e.group_norm = group_rows(w, slice).norm();
        e.grad_norm = group_rows(gw, slice).norm();
        if (e.group_norm != 0.0) e.status = KktStatus::kActive;
        else e.status = e.grad_norm <= a + tol ? KktStatus::kZeroSatisfied : KktStatus::kZeroViolated;
        report.entries.push_back(e);
      }
    }
  }
  return report;
}

nlohmann::json kkt_to_json(const KktReport& report) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries)
    entries.push_back({{"head", e.head},
                       {"block", e.block},
                       {"projection", to_string(e.projection)},
                       {"group_norm", e.group_norm},
                       {"grad_norm", e.grad_norm},
                       {"alpha", e.alpha},
                       {"status", to_string(e.status)}});
  return {{"entries", std::move(entries)}, {"violations", report.violations()}};
}

std::vector<CrossBlockBound> cross_block_grad_bound(const AttentionModel& model,
                                                    std::span<const PointerSample> batch,
                                                    const BlockPartition& partition,
                                                    const EmbeddingTable& embeddings, std::size_t block,
                                                    double slack) {
  if (block >= partition.block_count())
    throw Error(ErrorKind::kNotFound, "block index " + std::to_string(block) + " out of range");
  std::vector<PointerSample> filtered;
  for (const auto& s : batch)
    if (s.governing_block != block) filtered.push_back(s);

  std::vector<CrossBlockBound> out(model.head_count());
  for (std::size_t h = 0; h < out.size(); ++h) out[h].head = h;
  if (filtered.empty()) return out;

  // Task gradient only: beta is irrelevant to the query and key groups.
  DialSettings plain;
  plain.alpha = Matrix::Zero(static_cast<Eigen::Index>(model.head_count()),
                             static_cast<Eigen::Index>(partition.block_count()));
  plain.beta = 0.0;
  plain.tau = model.tau;
  plain.delta_target.assign(partition.block_count(), 0.0);
  plain.head_home.assign(model.head_count(), 0);
  const auto grad = grad_smooth(model, filtered, partition, embeddings, plain);
  const auto c_prime = estimate_c_prime(model, filtered, partition, embeddings, block).c_prime;
  const auto& slice = partition.blocks[block].slice;

  for (const auto& s : filtered) {
    const Matrix x = embed(s.tokens, embeddings);
    const auto trace = attend(model, x, s.query_index, SelfMask::kExcludeSelf);
    for (std::size_t h = 0; h < out.size(); ++h) {
      const auto& row = trace.heads[h];
      double mass = 0.0;
      for (std::size_t j = 0; j < row.keys.size(); ++j)
        if (partition.block_of(s.tokens[row.keys[j]]) == block) mass += row.weights(static_cast<Eigen::Index>(j));
      out[h].max_block_mass = std::max(out[h].max_block_mass, mass);
    }
  }
  for (std::size_t h = 0; h < out.size(); ++h) {
    auto& r = out[h];
    r.actual_grad_norm = group_rows(grad.heads[h].query, slice).norm();
    r.key_grad_norm = group_rows(grad.heads[h].key, slice).norm();
    r.c_prime = c_prime;
    r.bound = (c_prime / model.tau) * r.max_block_mass;
    r.holds = r.actual_grad_norm <= r.bound * slack + 1e-9;
  }
  return out;
}

}  // namespace localist
