// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "localist/attention.hpp"
#include "localist/partition.hpp"
#include "localist/rules.hpp"
#include "localist/taskgen.hpp"

namespace localist {

struct Verdict {
  std::size_t sample = 0;
  std::string rule_id;  // empty when skipped
  bool skipped = false;
  bool compliant = false;
  TokenId predicted = 0;
  TokenId expected = 0;
  double attention_fidelity = 0.0;
};

/// The rule covering a sample is the highest-priority rule whose class
/// matches the trigger class of the sample's governing block (ties go to
/// the smaller id). Fidelity is that of the head attending most to T_t.
Verdict check_output(std::size_t sample_ref, const PointerSample& sample, TokenId model_output,
                     const QueryTrace& trace, std::span<const Rule> rules, const BlockPartition& partition);

/// Argmax of the readout.
TokenId predicted_token(const QueryTrace& trace);

struct RuleCompliance {
  std::size_t checked = 0;
  std::size_t violated = 0;
  double rate = 1.0;
};

struct ComplianceReport {
  std::map<std::string, RuleCompliance> per_rule;
  std::map<std::string, std::size_t> violation_patterns;  // block of the wrong prediction
  std::size_t window_begin = 0;
  std::size_t window_end = 0;
  std::size_t skipped = 0;

  /// Pooled over every rule.
  double overall_rate() const;
};

ComplianceReport compliance_report(std::span<const Verdict> verdicts, const BlockPartition& partition,
                                   std::size_t window_begin = 0, std::size_t window_end = 0);

struct StrengthenPolicy {
  double target_rate = 0.95;
  double delta_multiplier = 1.5;
  double delta_cap = 4.0;
  CompilePolicy compile;  // source of the criticality-derived delta
};

enum class StrengthenOutcome { kNoChange, kStrengthened, kSaturated };

std::string_view to_string(StrengthenOutcome o);

struct StrengthenResult {
  StrengthenOutcome outcome = StrengthenOutcome::kNoChange;
  Rule rule;
  double delta_before = 0.0;
  double delta_after = 0.0;
};

StrengthenResult strengthen(const Rule& rule, const ComplianceReport& report, const StrengthenPolicy& policy);

nlohmann::json verdict_to_json(const Verdict& v);
nlohmann::json report_to_json(const ComplianceReport& r);
nlohmann::json strengthen_to_json(const StrengthenResult& r);

}  // namespace localist
