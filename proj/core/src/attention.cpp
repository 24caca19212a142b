// SPDX-License-Identifier: Apache-2.0
#include "localist/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "localist/error.hpp"
#include "localist/serialization.hpp"

namespace localist {

std::size_t AttentionModel::dim() const {
  return heads.empty() ? 0 : static_cast<std::size_t>(heads.front().query.rows());
}
std::size_t AttentionModel::key_dim() const {
  return heads.empty() ? 0 : static_cast<std::size_t>(heads.front().query.cols());
}
std::size_t AttentionModel::value_dim() const {
  return heads.empty() ? 0 : static_cast<std::size_t>(heads.front().value.cols());
}

ModelShape AttentionModel::shape() const {
  return {head_count(), dim(), key_dim(), value_dim(), vocab()};
}

void AttentionModel::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::kInvalidInput, "model: " + why); };
  if (heads.empty()) fail("no heads");
  if (!(tau > 0.0) || !std::isfinite(tau)) fail("temperature must be positive");
  const auto d = heads.front().query.rows();
  const auto dk = heads.front().query.cols();
  const auto dv = heads.front().value.cols();
  for (const auto& h : heads) {
    if (h.query.rows() != d || h.key.rows() != d || h.value.rows() != d) fail("input dim mismatch");
    if (h.query.cols() != dk || h.key.cols() != dk) fail("key dim mismatch");
    if (h.value.cols() != dv) fail("value dim mismatch");
    if (!h.query.allFinite() || !h.key.allFinite() || !h.value.allFinite()) fail("non-finite weights");
  }
  if (readout.rows() != static_cast<Eigen::Index>(heads.size()) * dv) fail("readout rows mismatch");
  if (!readout.allFinite()) fail("non-finite readout");
}

AttentionModel init_model(const ModelShape& shape, double tau, double init_scale, Rng& rng,
                          bool tie_query_key) {
  if (shape.heads == 0 || shape.dim == 0 || shape.key_dim == 0 || shape.value_dim == 0 ||
      shape.vocab == 0)
    throw Error(ErrorKind::kInvalidParameter, "model dimensions must be positive");
  if (!(tau > 0.0)) throw Error(ErrorKind::kInvalidParameter, "temperature must be positive");
  const auto d = static_cast<Eigen::Index>(shape.dim);
  AttentionModel model;
  model.tau = tau;
  for (std::size_t h = 0; h < shape.heads; ++h) {
    HeadWeights w;
    w.query = random_normal(d, static_cast<Eigen::Index>(shape.key_dim), init_scale, rng);
    w.key = random_normal(d, static_cast<Eigen::Index>(shape.key_dim), init_scale, rng);
    if (tie_query_key) w.key = w.query;
    w.value = random_normal(d, static_cast<Eigen::Index>(shape.value_dim), init_scale, rng);
    model.heads.push_back(std::move(w));
  }
  model.readout = random_normal(static_cast<Eigen::Index>(shape.heads * shape.value_dim),
                                static_cast<Eigen::Index>(shape.vocab), init_scale, rng);
  return model;
}

Matrix embed(std::span<const TokenId> tokens, const EmbeddingTable& embeddings) {
  Matrix x(static_cast<Eigen::Index>(tokens.size()), embeddings.vectors.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= static_cast<std::size_t>(embeddings.vectors.rows()))
      throw Error(ErrorKind::kInvalidInput, "token " + std::to_string(tokens[i]) + " has no embedding");
    x.row(static_cast<Eigen::Index>(i)) = embeddings.row(tokens[i]);
  }
  return x;
}

QueryTrace attend(const AttentionModel& model, const Matrix& x, std::size_t query, SelfMask mask) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n == 0) throw Error(ErrorKind::kInvalidInput, "empty sequence");
  if (query >= n) throw Error(ErrorKind::kInvalidInput, "query position out of range");
  if (x.cols() != static_cast<Eigen::Index>(model.dim()))
    throw Error(ErrorKind::kInvalidInput, "embedding width does not match the model");

  QueryTrace trace;
  trace.query = query;
  std::vector<std::size_t> keys;
  for (std::size_t j = 0; j < n; ++j)
    if (mask == SelfMask::kNone || j != query) keys.push_back(j);
  if (keys.empty()) throw Error(ErrorKind::kInvalidInput, "query has no keys to attend to");

  Matrix x_keys(static_cast<Eigen::Index>(keys.size()), x.cols());
  for (std::size_t j = 0; j < keys.size(); ++j)
    x_keys.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(keys[j]));

  const auto dv = static_cast<Eigen::Index>(model.value_dim());
  trace.output = Vector::Zero(static_cast<Eigen::Index>(model.vocab()));
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    const auto& w = model.heads[h];
    HeadRow row;
    row.keys = keys;
    row.query = (x.row(static_cast<Eigen::Index>(query)) * w.query).transpose();
    row.key_vectors = x_keys * w.key;
    row.value_vectors = x_keys * w.value;
    row.scores = row.key_vectors * row.query;
    row.logits = row.scores / model.tau;
    row.weights = softmax(row.logits);
    row.context = row.value_vectors.transpose() * row.weights;
    trace.output.noalias() +=
        model.readout.middleRows(static_cast<Eigen::Index>(h) * dv, dv).transpose() * row.context;
    trace.heads.push_back(std::move(row));
  }
  return trace;
}

AttentionTrace forward(const AttentionModel& model, const Matrix& x, SelfMask mask) {
  const auto n = x.rows();
  if (n == 0) throw Error(ErrorKind::kInvalidInput, "empty sequence");
  if (mask == SelfMask::kExcludeSelf && n == 1) throw Error(ErrorKind::kInvalidInput, "query has no keys to attend to");
  if (x.cols() != static_cast<Eigen::Index>(model.dim()))
    throw Error(ErrorKind::kInvalidInput, "embedding width does not match the model");

  AttentionTrace trace;
  const auto dv = static_cast<Eigen::Index>(model.value_dim());
  trace.output = Matrix::Zero(n, static_cast<Eigen::Index>(model.vocab()));
  for (std::size_t h = 0; h < model.head_count(); ++h) {
    const auto& w = model.heads[h];
    const Matrix q = x * w.query;
    const Matrix k = x * w.key;
    Matrix logits = (q * k.transpose()) / model.tau;
    if (mask == SelfMask::kExcludeSelf) logits.diagonal().setConstant(-std::numeric_limits<double>::infinity());
    Matrix weights(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      // Masked entries are -inf and come out as exact zeros.
      double peak = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        const double v = logits(t, j);
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
          throw Error(ErrorKind::kInvalidInput, "softmax input is not finite");
        peak = std::max(peak, v);
      }
      weights.row(t) = (logits.row(t).array() - peak).exp();
      // Vectorized exp does not return an exact 0 for -inf.
      if (mask == SelfMask::kExcludeSelf) weights(t, t) = 0.0;
      weights.row(t) /= weights.row(t).sum();
    }
    Matrix context = weights * (x * w.value);
    trace.output.noalias() += context * model.readout.middleRows(static_cast<Eigen::Index>(h) * dv, dv);
    trace.logits.push_back(std::move(logits));
    trace.weights.push_back(std::move(weights));
    trace.contexts.push_back(std::move(context));
  }
  return trace;
}

double entropy(std::span<const double> weights) {
  double total = 0.0;
  double h = 0.0;
  for (double w : weights) {
    if (w < -1e-12) throw Error(ErrorKind::kInvalidInput, "negative attention weight");
    total += w;
    if (w > 0.0) h -= w * std::log(w);
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw Error(ErrorKind::kInvalidInput, "attention row does not sum to 1");
  return h;
}

double entropy(const Vector& weights) { return entropy(std::span(weights.data(), weights.size())); }

double fidelity(std::span<const double> weights, std::span<const std::size_t> targets) {
  if (targets.empty()) throw Error(ErrorKind::kInvalidInput, "empty target span");
  std::vector<bool> seen(weights.size(), false);
  double mass = 0.0;
  for (std::size_t t : targets) {
    if (t >= weights.size()) throw Error(ErrorKind::kInvalidInput, "target outside the key positions");
    if (seen[t]) continue;
    seen[t] = true;
    mass += weights[t];
  }
  return mass;
}

double fidelity(const Vector& weights, std::span<const std::size_t> targets) {
  return fidelity(std::span(weights.data(), weights.size()), targets);
}

Leakage leakage(const Vector& weights, std::span<const std::size_t> key_blocks,
                const BlockPartition& partition, std::size_t correct_block) {
  if (correct_block >= partition.block_count())
    throw Error(ErrorKind::kNotFound, "block index " + std::to_string(correct_block) + " out of range");
  if (key_blocks.size() != static_cast<std::size_t>(weights.size()))
    throw Error(ErrorKind::kInvalidInput, "key block labels do not match the row");
  Leakage out;
  out.per_block_mass.assign(partition.block_count(), 0.0);
  double best_correct = 0.0;
  double best_wrong = 0.0;
  bool any_correct = false;
  for (std::size_t j = 0; j < key_blocks.size(); ++j) {
    const std::size_t b = key_blocks[j];
    if (b >= partition.block_count()) throw Error(ErrorKind::kNotFound, "key maps to an unknown block");
    const double w = weights(static_cast<Eigen::Index>(j));
    out.per_block_mass[b] += w;
    if (b == correct_block) {
      any_correct = true;
      best_correct = std::max(best_correct, w);
    } else {
      best_wrong = std::max(best_wrong, w);
    }
  }
  out.off_block_total = 1.0 - out.per_block_mass[correct_block];
  if (!any_correct || best_correct == 0.0) {
    out.max_wrong_key_ratio = best_wrong > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  } else {
    out.max_wrong_key_ratio = best_wrong / best_correct;
  }
  return out;
}

namespace {

ConcentrationVerdict concentration_from(const Vector& weights, std::span<const std::size_t> key_blocks,
                                        const BlockPartition& partition, std::size_t correct_block,
                                        double delta, double tau) {
  if (delta < 0.0) throw Error(ErrorKind::kInvalidParameter, "margin delta must be nonnegative");
  if (!(tau > 0.0)) throw Error(ErrorKind::kInvalidParameter, "temperature must be positive");
  const auto leak = leakage(weights, key_blocks, partition, correct_block);
  ConcentrationVerdict v;
  v.bound = std::exp(-delta / tau);
  v.max_wrong_key_ratio = leak.max_wrong_key_ratio;
  const double allowed = v.bound * (1.0 + kBoundRelativeTolerance);
  v.per_key_pass = v.max_wrong_key_ratio <= allowed;
  for (std::size_t b = 0; b < leak.per_block_mass.size(); ++b)
    if (b != correct_block) v.max_wrong_block_mass = std::max(v.max_wrong_block_mass, leak.per_block_mass[b]);
  v.block_sum_pass = v.max_wrong_block_mass <= allowed;
  return v;
}

}  // namespace

ConcentrationVerdict check_concentration(const HeadRow& row, std::span<const std::size_t> key_blocks,
                                         const BlockPartition& partition, std::size_t correct_block,
                                         double delta, double tau) {
  return concentration_from(row.weights, key_blocks, partition, correct_block, delta, tau);
}

std::vector<ConcentrationVerdict> check_concentration(const AttentionTrace& trace,
                                                      std::span<const TokenId> tokens,
                                                      const BlockPartition& partition,
                                                      std::size_t correct_block, double delta,
                                                      double tau, std::size_t head) {
  if (head >= trace.weights.size()) throw Error(ErrorKind::kInvalidParameter, "head out of range");
  const auto& weights = trace.weights[head];
  const auto& logits = trace.logits[head];
  std::vector<ConcentrationVerdict> out;
  for (Eigen::Index t = 0; t < weights.rows(); ++t) {
    std::vector<double> row;
    std::vector<std::size_t> blocks;
    for (Eigen::Index j = 0; j < weights.cols(); ++j) {
      if (std::isinf(logits(t, j)) && logits(t, j) < 0) continue;  // masked
      row.push_back(weights(t, j));
      blocks.push_back(partition.block_of(tokens[static_cast<std::size_t>(j)]));
    }
    out.push_back(concentration_from(Eigen::Map<const Vector>(row.data(), static_cast<Eigen::Index>(row.size())),
                                     blocks, partition, correct_block, delta, tau));
  }
  return out;
}

nlohmann::json model_to_json(const AttentionModel& model) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : model.heads)
    heads.push_back({{"query", matrix_to_json(h.query)},
                     {"key", matrix_to_json(h.key)},
                     {"value", matrix_to_json(h.value)}});
  return {{"schema", "localist.model"},
          {"version", 1},
          {"tau", model.tau},
          {"heads", std::move(heads)},
          {"readout", matrix_to_json(model.readout)}};
}

AttentionModel model_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("schema").get<std::string>() != "localist.model")
      throw Error(ErrorKind::kInvalidInput, "not a model document");
    AttentionModel model;
    model.tau = doc.at("tau").get<double>();
    for (const auto& jh : doc.at("heads"))
      model.heads.push_back({matrix_from_json(jh.at("query")), matrix_from_json(jh.at("key")),
                             matrix_from_json(jh.at("value"))});
    model.readout = matrix_from_json(doc.at("readout"));
    model.validate();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed model document: ") + e.what());
  }
}

namespace {

nlohmann::json rounded(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(round_significant(v(i), 12));
  return out;
}

nlohmann::json rounded(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      if (std::isfinite(v)) row.push_back(round_significant(v, 12));
      else row.push_back(nullptr);  // masked logit
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

nlohmann::json trace_to_json(const QueryTrace& trace) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : trace.heads)
    heads.push_back({{"keys", h.keys}, {"logits", rounded(h.logits)}, {"weights", rounded(h.weights)}});
  return {{"query", trace.query}, {"heads", std::move(heads)}, {"output", rounded(trace.output)}};
}

nlohmann::json trace_to_json(const AttentionTrace& trace) {
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t h = 0; h < trace.weights.size(); ++h)
    heads.push_back({{"logits", rounded(trace.logits[h])}, {"weights", rounded(trace.weights[h])}});
  return {{"heads", std::move(heads)}, {"output", rounded(trace.output)}};
}

}  // namespace localist
