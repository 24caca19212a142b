// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/error.hpp"
#include "localist/partition.hpp"

namespace localist {

enum class Criticality { kLow, kMedium, kHigh };

std::string_view to_string(Criticality c);
std::optional<Criticality> parse_criticality(std::string_view text);

struct ComplianceStats {
  std::size_t checked = 0;
  std::size_t violated = 0;

  double rate() const {
    return checked == 0 ? 1.0 : 1.0 - static_cast<double>(violated) / static_cast<double>(checked);
  }
  friend bool operator==(const ComplianceStats&, const ComplianceStats&) = default;
};

/// `rule <id> priority <int> criticality <c> { when class "<label>" then
/// attend block "<block>"; }`
struct Rule {
  std::string id;
  int version = 0;
  long priority = 0;
  Criticality criticality = Criticality::kMedium;
  std::string trigger_class;
  std::string target_block;
  std::string created_at;
  std::string updated_at;
  ComplianceStats compliance;
  // Set by margin strengthening; replaces the criticality-derived delta.
  std::optional<double> delta_override;

  /// Equality of the fields the rule language can express.
  bool same_statement(const Rule& other) const {
    return id == other.id && priority == other.priority && criticality == other.criticality &&
           trigger_class == other.trigger_class && target_block == other.target_block;
  }
  friend bool operator==(const Rule&, const Rule&) = default;
};

nlohmann::json rule_to_json(const Rule& rule);
Rule rule_from_json(const nlohmann::json& j);

class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::size_t column, std::size_t offset, std::set<std::string> expected,
             const std::string& found);

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }
  std::size_t offset() const noexcept { return offset_; }
  const std::set<std::string>& expected() const noexcept { return expected_; }

 private:
  std::size_t line_;
  std::size_t column_;
  std::size_t offset_;
  std::set<std::string> expected_;
};

/// Rules in file order. Throws ParseError.
std::vector<Rule> parse_rules(std::string_view text);

std::string render_rule(const Rule& rule);
std::string render_rules(std::span<const Rule> rules);

/// Timestamp source; the default is UTC wall-clock time in ISO-8601.
using Clock = std::function<std::string()>;
std::string utc_now();

/// Versioned rule store with optimistic concurrency. Every put or delete is
/// appended to a JSON-lines journal when one is attached; open() rebuilds
/// the in-memory index by replaying it.
class RuleStore {
 public:
  explicit RuleStore(Clock clock = utc_now);

  static RuleStore open(const std::filesystem::path& journal, Clock clock = utc_now);

  /// A new id needs no expected version (or 0). Updating an existing id
  /// needs its current version; a stale one throws conflict and leaves the
  /// store unchanged.
  Rule put(Rule rule, std::optional<int> expected_version = std::nullopt);
  Rule get(const std::string& id, std::optional<int> version = std::nullopt) const;
  std::vector<Rule> list() const;
  /// Tombstones the id; history stays readable through get(id, version).
  void remove(const std::string& id);
  std::vector<Rule> history(const std::string& id) const;

  RuleStore(RuleStore&& other) noexcept;
  RuleStore& operator=(RuleStore&& other) noexcept;

 private:
  struct Entry {
    std::vector<Rule> versions;
    bool deleted = false;
  };

  void append_journal(const nlohmann::json& record);

  Clock clock_;
  std::optional<std::filesystem::path> journal_;
  std::map<std::string, Entry> entries_;
  mutable std::mutex mutex_;
};

enum class HeadSelection {
  // Heads whose home block is the rule's target; all heads if none is.
  kHomed,
  kAll,
};

struct CompilePolicy {
  std::map<Criticality, double> delta_for = {
      {Criticality::kLow, 0.5}, {Criticality::kMedium, 1.0}, {Criticality::kHigh, 2.0}};
  double safety_factor = 10.0;
  double floor = 10.0;
  HeadSelection heads = HeadSelection::kHomed;
  std::vector<std::size_t> head_home;  // one entry per model head

  double delta_of(const Rule& rule) const;
};

struct Calibration {
  std::vector<double> c_prime;  // per block
  double tau = 1.0;
};

struct AlphaUpdate {
  std::size_t head = 0;
  std::string block;
  double alpha = 0.0;
  double lambda = 0.0;
};

struct CompiledConstraint {
  std::string rule_id;
  int rule_version = 0;
  std::vector<std::size_t> affected_heads;
  std::string target_block;
  double delta = 0.0;
  double tau = 1.0;
  std::vector<AlphaUpdate> alpha_updates;
};

/// For each affected head and every block other than the target:
/// alpha = max(safety_factor * threshold_lambda(c'_i, tau, delta), floor).
CompiledConstraint compile(const Rule& rule, const BlockPartition& partition, const Calibration& calibration,
                           const CompilePolicy& policy);

nlohmann::json constraint_to_json(const CompiledConstraint& c);
CompiledConstraint constraint_from_json(const nlohmann::json& j);

}  // namespace localist
