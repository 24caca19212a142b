// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/attention.hpp"
#include "localist/objective.hpp"
#include "localist/partition.hpp"
#include "localist/rules.hpp"
#include "localist/taskgen.hpp"

namespace localist {

enum class RegimePreset { kLocalist, kDistributed, kIntermediate, kCustom };

std::string_view to_string(RegimePreset p);
std::optional<RegimePreset> parse_preset(std::string_view text);

struct PresetValues {
  double alpha = 0.0;
  double delta = 0.0;
  double tau = 1.0;
};

inline constexpr double kIntermediateAlphaMin = 0.1;
inline constexpr double kIntermediateAlphaMax = 5.0;

/// localist {10, 2.0, 0.1}, distributed {0.01, 0.1, 1.0}; intermediate uses
/// the given alpha, which must lie in [0.1, 5], with delta 1.0 and tau 0.5.
PresetValues preset_values(RegimePreset preset, double intermediate_alpha = 1.0);

/// Head h is homed on block h mod blocks; alpha is the preset value on every
/// off-home group and 0 on the home group.
DialSettings make_dial(RegimePreset preset, std::size_t heads, std::size_t blocks,
                       double intermediate_alpha = 1.0, double beta = 1e-4);

/// Same layout with an explicit off-home alpha, tau and delta.
DialSettings uniform_dial(std::size_t heads, std::size_t blocks, double alpha, double tau, double delta,
                          double beta = 1e-4);

struct TrainerConfig {
  double step_size = 0.5;
  std::size_t steps = 400;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 50;
  DialSettings dial;
  RegimePreset regime_preset = RegimePreset::kCustom;
  std::size_t key_dim = 8;
  std::size_t value_dim = 8;
  double init_scale = 0.3;
  bool tie_query_key = true;
  // Metrics use the first eval_samples samples of the dataset.
  std::size_t eval_samples = 256;

  void validate() const;
};

nlohmann::json trainer_config_to_json(const TrainerConfig& c);

/// What the trainer reads; the spans must outlive the run.
struct TrainingData {
  const BlockPartition* partition = nullptr;
  const EmbeddingTable* embeddings = nullptr;
  std::span<const PointerSample> samples;
  std::string partition_checksum;
};

struct TrainingState {
  AttentionModel model;
  DialSettings dial;
  std::size_t step = 0;
  Rng rng;
  std::size_t metrics_cursor = 0;  // log entries emitted so far
};

struct MetricsRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  double accuracy = 0.0;
  // Over (query, home head) pairs: heads homed on the governing block.
  double entropy_mean = 0.0;
  double fidelity_mean = 0.0;
  double off_block_mass = 0.0;
  std::vector<double> block_leakage;  // per governing block
  // Over all (query, head) pairs.
  double entropy_all_heads = 0.0;
  std::vector<double> margin_mean;  // per head
  std::vector<double> margin_min;   // per head
  std::size_t kkt_violations = 0;
  std::size_t off_block_groups = 0;
  std::size_t off_block_zero_groups = 0;
};

struct AlphaChange {
  std::size_t head = 0;
  std::size_t block = 0;
  double before = 0.0;
  double after = 0.0;
};

struct InjectionEvent {
  std::size_t step = 0;
  bool applied = false;
  std::vector<std::string> rules;  // "id@version"
  std::vector<AlphaChange> changes;
  std::string error;
};

using LogEntry = std::variant<MetricsRecord, InjectionEvent>;

nlohmann::json log_entry_to_json(const LogEntry& entry);
std::string log_entry_json_line(const LogEntry& entry);

/// Compiled constraints handed to the trainer at checkpoint boundaries.
class ConstraintFeed {
 public:
  virtual ~ConstraintFeed() = default;
  /// Called once per checkpoint boundary; nullopt when nothing is pending.
  virtual std::optional<std::vector<CompiledConstraint>> poll(const TrainingState& state) = 0;
};

/// Single-producer single-consumer handoff.
class QueuedConstraintFeed : public ConstraintFeed {
 public:
  void publish(std::vector<CompiledConstraint> batch);
  std::optional<std::vector<CompiledConstraint>> poll(const TrainingState& state) override;

 private:
  std::mutex mutex_;
  std::deque<std::vector<CompiledConstraint>> pending_;
};

/// Calls a function at every boundary; convenient for scripted injections.
class CallbackConstraintFeed : public ConstraintFeed {
 public:
  using Callback = std::function<std::optional<std::vector<CompiledConstraint>>(const TrainingState&)>;
  explicit CallbackConstraintFeed(Callback fn) : fn_(std::move(fn)) {}
  std::optional<std::vector<CompiledConstraint>> poll(const TrainingState& state) override { return fn_(state); }

 private:
  Callback fn_;
};

enum class TrainStatus { kCompleted, kDiverged };

struct TrainResult {
  TrainStatus status = TrainStatus::kCompleted;
  TrainingState state;                  // final, or the last checkpoint when diverged
  std::vector<LogEntry> log;            // entries emitted by this call
  std::optional<std::size_t> diverged_at;
};

TrainingState init_training(const TrainerConfig& config, const TrainingData& data);

/// Steps until state.step == until_step (or config.steps when omitted).
/// Metrics are recorded at step 0 of a fresh state and after every step
/// that is a multiple of checkpoint_every; the feed is polled right after.
TrainResult continue_training(TrainingState state, const TrainerConfig& config, const TrainingData& data,
                              ConstraintFeed* feed = nullptr, std::optional<std::size_t> until_step = {},
                              const std::function<void(const TrainingState&)>& on_checkpoint = {});

TrainResult train(const TrainerConfig& config, const TrainingData& data, ConstraintFeed* feed = nullptr);

MetricsRecord evaluate_metrics(const TrainingState& state, const TrainingData& data, std::size_t eval_samples);

/// New snapshot with the dial's tau; weights are untouched.
AttentionModel apply_dial(const AttentionModel& model, const DialSettings& dial);
TrainingState apply_dial(const TrainingState& state, const DialSettings& dial);

/// Applies every constraint or none. The returned event says which.
InjectionEvent hot_reload(TrainingState& state, std::span<const CompiledConstraint> constraints,
                          const BlockPartition& partition);

nlohmann::json checkpoint_to_json(const TrainingState& state, const std::string& partition_checksum);
TrainingState checkpoint_from_json(const nlohmann::json& doc, const std::string& expected_partition_checksum);
void save_checkpoint(const TrainingState& state, const std::string& partition_checksum,
                     const std::filesystem::path& path);
TrainingState load_checkpoint(const std::filesystem::path& path, const std::string& expected_partition_checksum);

}  // namespace localist
