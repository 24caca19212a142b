// SPDX-License-Identifier: Apache-2.0
#include "localist/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "localist/margin.hpp"
#include "localist/serialization.hpp"

namespace localist {

namespace {

constexpr double kDivergenceLoss = 1e6;
constexpr std::string_view kCheckpointSchema = "localist.checkpoint";
constexpr int kCheckpointVersion = 1;

void check_data(const TrainingData& data) {
  if (!data.partition || !data.embeddings) throw Error(ErrorKind::kInvalidInput, "training data is incomplete");
  if (data.samples.empty()) throw Error(ErrorKind::kInvalidInput, "dataset is empty");
}

}  // namespace

std::string_view to_string(RegimePreset p) {
  switch (p) {
    case RegimePreset::kLocalist:
      return "localist";
    case RegimePreset::kDistributed:
      return "distributed";
    case RegimePreset::kIntermediate:
      return "intermediate";
    case RegimePreset::kCustom:
      return "custom";
  }
  return "custom";
}

std::optional<RegimePreset> parse_preset(std::string_view text) {
  for (auto p : {RegimePreset::kLocalist, RegimePreset::kDistributed, RegimePreset::kIntermediate,
                 RegimePreset::kCustom})
    if (text == to_string(p)) return p;
  return std::nullopt;
}

PresetValues preset_values(RegimePreset preset, double intermediate_alpha) {
  switch (preset) {
    case RegimePreset::kLocalist:
      return {10.0, 2.0, 0.1};
    case RegimePreset::kDistributed:
      return {0.01, 0.1, 1.0};
    case RegimePreset::kIntermediate:
      if (!(intermediate_alpha >= kIntermediateAlphaMin && intermediate_alpha <= kIntermediateAlphaMax))
        throw Error(ErrorKind::kInvalidParameter, "intermediate alpha must lie in [0.1, 5]");
      return {intermediate_alpha, 1.0, 0.5};
    case RegimePreset::kCustom:
      break;
  }
  throw Error(ErrorKind::kInvalidParameter, "the custom preset has no fixed values");
}

DialSettings uniform_dial(std::size_t heads, std::size_t blocks, double alpha, double tau, double delta,
                          double beta) {
  if (heads == 0 || blocks == 0) throw Error(ErrorKind::kInvalidParameter, "dial needs heads and blocks");
  DialSettings d;
  d.alpha = Matrix::Zero(static_cast<Eigen::Index>(heads), static_cast<Eigen::Index>(blocks));
  d.beta = beta;
  d.tau = tau;
  d.delta_target.assign(blocks, delta);
  d.head_home.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    d.head_home[h] = h % blocks;
    for (std::size_t i = 0; i < blocks; ++i)
      if (i != d.head_home[h]) d.alpha(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i)) = alpha;
  }
  d.validate(heads, blocks);
  return d;
}

DialSettings make_dial(RegimePreset preset, std::size_t heads, std::size_t blocks, double intermediate_alpha,
                       double beta) {
  const auto v = preset_values(preset, intermediate_alpha);
  return uniform_dial(heads, blocks, v.alpha, v.tau, v.delta, beta);
}

void TrainerConfig::validate() const {
  if (!(step_size > 0.0) || !std::isfinite(step_size))
    throw Error(ErrorKind::kInvalidParameter, "step_size must be positive");
  if (batch_size == 0) throw Error(ErrorKind::kInvalidParameter, "batch_size must be positive");
  if (checkpoint_every == 0) throw Error(ErrorKind::kInvalidParameter, "checkpoint_every must be positive");
  if (key_dim == 0 || value_dim == 0) throw Error(ErrorKind::kInvalidParameter, "head dims must be positive");
  if (!(init_scale >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "init_scale must be non-negative");
  if (eval_samples == 0) throw Error(ErrorKind::kInvalidParameter, "eval_samples must be positive");
}

nlohmann::json trainer_config_to_json(const TrainerConfig& c) {
  return {{"step_size", c.step_size},   {"steps", c.steps},
          {"batch_size", c.batch_size}, {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every}, {"dial", dial_to_json(c.dial)},
          {"regime_preset", std::string(to_string(c.regime_preset))},
          {"key_dim", c.key_dim},       {"value_dim", c.value_dim},
          {"init_scale", c.init_scale}, {"tie_query_key", c.tie_query_key},
          {"eval_samples", c.eval_samples}};
}

nlohmann::json log_entry_to_json(const LogEntry& entry) {
  if (const auto* m = std::get_if<MetricsRecord>(&entry)) {
    return {{"type", "metrics"},
            {"step", m->step},
            {"loss", loss_to_json(m->loss)},
            {"accuracy", m->accuracy},
            {"entropy_mean", m->entropy_mean},
            {"fidelity_mean", m->fidelity_mean},
            {"off_block_mass", m->off_block_mass},
            {"block_leakage", m->block_leakage},
            {"entropy_all_heads", m->entropy_all_heads},
            {"margin_mean", m->margin_mean},
            {"margin_min", m->margin_min},
            {"kkt_violations", m->kkt_violations},
            {"off_block_groups", m->off_block_groups},
            {"off_block_zero_groups", m->off_block_zero_groups}};
  }
  const auto& e = std::get<InjectionEvent>(entry);
  nlohmann::json changes = nlohmann::json::array();
  for (const auto& c : e.changes)
    changes.push_back({{"head", c.head}, {"block", c.block}, {"before", c.before}, {"after", c.after}});
  nlohmann::json j{{"type", "injection"}, {"step", e.step},   {"status", e.applied ? "applied" : "rejected"},
                   {"rules", e.rules},    {"changes", changes}};
  if (!e.error.empty()) j["error"] = e.error;
  return j;
}

std::string log_entry_json_line(const LogEntry& entry) { return log_entry_to_json(entry).dump(); }

void QueuedConstraintFeed::publish(std::vector<CompiledConstraint> batch) {
  std::lock_guard lock(mutex_);
  pending_.push_back(std::move(batch));
}

std::optional<std::vector<CompiledConstraint>> QueuedConstraintFeed::poll(const TrainingState&) {
  std::lock_guard lock(mutex_);
  if (pending_.empty()) return std::nullopt;
  std::vector<CompiledConstraint> out;
  for (auto& b : pending_)
    for (auto& c : b) out.push_back(std::move(c));
  pending_.clear();
  return out;
}

TrainingState init_training(const TrainerConfig& config, const TrainingData& data) {
  config.validate();
  check_data(data);
  const auto& partition = *data.partition;
  const std::size_t heads = config.dial.head_count();
  config.dial.validate(heads, partition.block_count());
  TrainingState s;
  s.rng = Rng(config.seed);
  ModelShape shape{heads, partition.dim(), config.key_dim, config.value_dim, partition.vocab_size()};
  s.model = init_model(shape, config.dial.tau, config.init_scale, s.rng, config.tie_query_key);
  s.dial = config.dial;
  return s;
}

MetricsRecord evaluate_metrics(const TrainingState& state, const TrainingData& data, std::size_t eval_samples) {
  const auto& partition = *data.partition;
  const auto& emb = *data.embeddings;
  const auto& model = state.model;
  const auto eval = data.samples.first(std::min(eval_samples, data.samples.size()));
  const std::size_t H = model.head_count();
  const std::size_t P = partition.block_count();

  MetricsRecord m;
  m.step = state.step;
  m.loss = loss(model, eval, partition, emb, state.dial);
  m.margin_mean.assign(H, 0.0);
  m.margin_min.assign(H, std::numeric_limits<double>::infinity());
  m.block_leakage.assign(P, 0.0);
  std::vector<std::size_t> block_pairs(P, 0);
  std::size_t home_pairs = 0;
  std::size_t correct = 0;

  for (const auto& s : eval) {
    const auto trace = attend(model, embed(s.tokens, emb), s.query_index, SelfMask::kExcludeSelf);
    Eigen::Index arg = 0;
    trace.output.maxCoeff(&arg);
    if (static_cast<TokenId>(arg) == s.label) ++correct;

    bool any_home = false;
    for (std::size_t h = 0; h < H; ++h) any_home = any_home || state.dial.head_home[h] == s.governing_block;

    for (std::size_t h = 0; h < H; ++h) {
      const auto& row = trace.heads[h];
      const auto blocks = key_blocks(row, s.tokens, partition);
      const double e = entropy(row.weights);
      m.entropy_all_heads += e;
      const double margin = query_margin(row.scores, blocks, s.governing_block);
      m.margin_mean[h] += margin;
      m.margin_min[h] = std::min(m.margin_min[h], margin);

      if (any_home && state.dial.head_home[h] != s.governing_block) continue;
      std::vector<std::size_t> targets;
      for (std::size_t j = 0; j < row.keys.size(); ++j)
        if (std::find(s.target_span.begin(), s.target_span.end(), row.keys[j]) != s.target_span.end())
          targets.push_back(j);
      const auto leak = leakage(row.weights, blocks, partition, s.governing_block);
      m.entropy_mean += e;
      m.fidelity_mean += fidelity(row.weights, targets);
      m.off_block_mass += leak.off_block_total;
      m.block_leakage[s.governing_block] += leak.off_block_total;
      ++block_pairs[s.governing_block];
      ++home_pairs;
    }
  }
  const double n = static_cast<double>(eval.size());
  m.accuracy = static_cast<double>(correct) / n;
  m.entropy_all_heads /= n * static_cast<double>(H);
  for (auto& v : m.margin_mean) v /= n;
  if (home_pairs) {
    m.entropy_mean /= static_cast<double>(home_pairs);
    m.fidelity_mean /= static_cast<double>(home_pairs);
    m.off_block_mass /= static_cast<double>(home_pairs);
  }
  for (std::size_t b = 0; b < P; ++b)
    if (block_pairs[b]) m.block_leakage[b] /= static_cast<double>(block_pairs[b]);

  const auto kkt = kkt_check(model, eval, partition, emb, state.dial);
  m.kkt_violations = kkt.violations();
  for (const auto& e : kkt.entries) {
    if (!state.dial.is_off_block(e.head, e.block)) continue;
    ++m.off_block_groups;
    if (e.group_norm == 0.0) ++m.off_block_zero_groups;
  }
  return m;
}

TrainResult continue_training(TrainingState state, const TrainerConfig& config, const TrainingData& data,
                              ConstraintFeed* feed, std::optional<std::size_t> until_step,
                              const std::function<void(const TrainingState&)>& on_checkpoint) {
  config.validate();
  check_data(data);
  const auto& partition = *data.partition;
  const auto& emb = *data.embeddings;
  state.dial.validate(state.model.head_count(), partition.block_count());
  const std::size_t until = until_step.value_or(config.steps);

  TrainResult result;
  auto boundary = [&] {
    result.log.emplace_back(evaluate_metrics(state, data, config.eval_samples));
    ++state.metrics_cursor;
    if (feed) {
      if (auto batch = feed->poll(state)) {
        if (!batch->empty()) {
          result.log.emplace_back(hot_reload(state, *batch, partition));
          ++state.metrics_cursor;
        }
      }
    }
    if (on_checkpoint) on_checkpoint(state);
  };

  if (state.step == 0 && state.metrics_cursor == 0) boundary();
  TrainingState last_checkpoint = state;

  std::vector<PointerSample> batch(config.batch_size);
  while (state.step < until) {
    for (auto& b : batch) b = data.samples[state.rng.index(data.samples.size())];
    const auto eval = evaluate_smooth(state.model, batch, partition, emb, state.dial);
    // The group penalty is left out: a huge alpha is legitimate and the
    // prox step handles it exactly.
    const double smooth = eval.loss.task_loss + eval.loss.value_penalty;
    if (!std::isfinite(smooth) || smooth > kDivergenceLoss) {
      result.status = TrainStatus::kDiverged;
      result.diverged_at = state.step;
      result.state = std::move(last_checkpoint);
      return result;
    }
    const double eta = config.step_size;
    for (std::size_t h = 0; h < state.model.head_count(); ++h) {
      state.model.heads[h].query -= eta * eval.gradient.heads[h].query;
      state.model.heads[h].key -= eta * eval.gradient.heads[h].key;
      state.model.heads[h].value -= eta * eval.gradient.heads[h].value;
    }
    state.model.readout -= eta * eval.gradient.readout;
    apply_group_prox(state.model, partition, state.dial, eta);
    ++state.step;

    if (!all_finite(state.model.readout)) {
      result.status = TrainStatus::kDiverged;
      result.diverged_at = state.step;
      result.state = std::move(last_checkpoint);
      return result;
    }
    if (state.step % config.checkpoint_every == 0) {
      boundary();
      last_checkpoint = state;
    }
  }
  result.state = std::move(state);
  return result;
}

TrainResult train(const TrainerConfig& config, const TrainingData& data, ConstraintFeed* feed) {
  return continue_training(init_training(config, data), config, data, feed);
}

AttentionModel apply_dial(const AttentionModel& model, const DialSettings& dial) {
  if (!(dial.tau > 0.0) || !std::isfinite(dial.tau)) throw Error(ErrorKind::kInvalidParameter, "tau must be positive");
  dial.validate(model.head_count(), static_cast<std::size_t>(dial.alpha.cols()));
  AttentionModel out = model;
  out.tau = dial.tau;
  return out;
}

TrainingState apply_dial(const TrainingState& state, const DialSettings& dial) {
  TrainingState out = state;
  out.model = apply_dial(state.model, dial);
  out.dial = dial;
  return out;
}

InjectionEvent hot_reload(TrainingState& state, std::span<const CompiledConstraint> constraints,
                          const BlockPartition& partition) {
  InjectionEvent ev;
  ev.step = state.step;
  for (const auto& c : constraints) ev.rules.push_back(c.rule_id + "@" + std::to_string(c.rule_version));

  DialSettings next = state.dial;
  try {
    for (const auto& c : constraints) {
      const std::size_t target = partition.find_block(c.target_block);
      if (!(c.delta >= 0.0)) throw Error(ErrorKind::kInvalidInput, "constraint '" + c.rule_id + "' has a negative delta");
      for (std::size_t h : c.affected_heads)
        if (h >= next.head_count())
          throw Error(ErrorKind::kInvalidInput, "constraint '" + c.rule_id + "' names unknown head " + std::to_string(h));
      next.delta_target.at(target) = c.delta;
      for (const auto& u : c.alpha_updates) {
        if (u.head >= next.head_count())
          throw Error(ErrorKind::kInvalidInput, "constraint '" + c.rule_id + "' names unknown head " +
                                                    std::to_string(u.head));
        const std::size_t block = partition.find_block(u.block);
        if (!(u.alpha >= 0.0) || !std::isfinite(u.alpha))
          throw Error(ErrorKind::kInvalidInput, "constraint '" + c.rule_id + "' has an invalid alpha");
        auto& a = next.alpha(static_cast<Eigen::Index>(u.head), static_cast<Eigen::Index>(block));
        ev.changes.push_back({u.head, block, a, u.alpha});
        a = u.alpha;
      }
    }
  } catch (const Error& e) {
    ev.applied = false;
    ev.changes.clear();
    ev.error = e.what();
    return ev;
  }
  state.dial = std::move(next);
  ev.applied = true;
  return ev;
}

nlohmann::json checkpoint_to_json(const TrainingState& state, const std::string& partition_checksum) {
  nlohmann::json payload{{"step", state.step},
                         {"model", model_to_json(state.model)},
                         {"dial", dial_to_json(state.dial)},
                         {"rng",
                          {{"algorithm", std::string(Rng::kAlgorithm)},
                           {"seed", state.rng.seed()},
                           {"state", state.rng.state()}}},
                         {"metrics_cursor", state.metrics_cursor},
                         {"partition_checksum", partition_checksum}};
  const std::string digest = sha256_hex(payload.dump());
  return {{"schema", kCheckpointSchema}, {"version", kCheckpointVersion}, {"payload", payload},
          {"payload_sha256", digest}};
}

TrainingState checkpoint_from_json(const nlohmann::json& doc, const std::string& expected_partition_checksum) {
  try {
    if (doc.at("schema").get<std::string>() != kCheckpointSchema)
      throw Error(ErrorKind::kInvalidInput, "not a checkpoint");
    if (doc.at("version").get<int>() != kCheckpointVersion)
      throw Error(ErrorKind::kInvalidInput, "unsupported checkpoint version");
    const auto& payload = doc.at("payload");
    if (sha256_hex(payload.dump()) != doc.at("payload_sha256").get<std::string>())
      throw Error(ErrorKind::kChecksumMismatch, "checkpoint payload is corrupt");
    if (payload.at("partition_checksum").get<std::string>() != expected_partition_checksum)
      throw Error(ErrorKind::kChecksumMismatch, "checkpoint was written for a different partition");
    const auto& rng = payload.at("rng");
    if (rng.at("algorithm").get<std::string>() != Rng::kAlgorithm)
      throw Error(ErrorKind::kInvalidInput, "unknown rng algorithm");
    TrainingState s;
    s.step = payload.at("step").get<std::size_t>();
    s.model = model_from_json(payload.at("model"));
    s.dial = dial_from_json(payload.at("dial"));
    s.rng.restore(rng.at("seed").get<std::uint64_t>(), rng.at("state").get<std::string>());
    s.metrics_cursor = payload.at("metrics_cursor").get<std::size_t>();
    s.dial.validate(s.model.head_count(), static_cast<std::size_t>(s.dial.alpha.cols()));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const TrainingState& state, const std::string& partition_checksum,
                     const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_json(state, partition_checksum).dump());
}

TrainingState load_checkpoint(const std::filesystem::path& path, const std::string& expected_partition_checksum) {
  const std::string text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, "checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(doc, expected_partition_checksum);
}

}  // namespace localist
