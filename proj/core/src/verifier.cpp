// SPDX-License-Identifier: Apache-2.0
#include "localist/verifier.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace localist {

TokenId predicted_token(const QueryTrace& trace) {
  Eigen::Index best = 0;
  trace.output.maxCoeff(&best);
  return static_cast<TokenId>(best);
}

Verdict check_output(std::size_t sample_ref, const PointerSample& sample, TokenId model_output,
                     const QueryTrace& trace, std::span<const Rule> rules, const BlockPartition& partition) {
  Verdict v;
  v.sample = sample_ref;
  v.predicted = model_output;
  v.expected = sample.label;

  const std::string& cls = partition.blocks.at(sample.governing_block).trigger_class;
  const Rule* chosen = nullptr;
  for (const auto& r : rules) {
    if (r.trigger_class != cls) continue;
    if (!chosen || r.priority > chosen->priority || (r.priority == chosen->priority && r.id < chosen->id))
      chosen = &r;
  }
  if (!chosen) {
    v.skipped = true;
    return v;
  }
  v.rule_id = chosen->id;
  v.compliant = model_output == sample.label;

  for (const auto& head : trace.heads) {
    std::vector<std::size_t> targets;
    for (std::size_t j = 0; j < head.keys.size(); ++j)
      if (std::find(sample.target_span.begin(), sample.target_span.end(), head.keys[j]) != sample.target_span.end())
        targets.push_back(j);
    if (!targets.empty()) v.attention_fidelity = std::max(v.attention_fidelity, fidelity(head.weights, targets));
  }
  return v;
}

double ComplianceReport::overall_rate() const {
  std::size_t checked = 0;
  std::size_t violated = 0;
  for (const auto& [id, c] : per_rule) {
    checked += c.checked;
    violated += c.violated;
  }
  return checked == 0 ? 1.0 : 1.0 - static_cast<double>(violated) / static_cast<double>(checked);
}

ComplianceReport compliance_report(std::span<const Verdict> verdicts, const BlockPartition& partition,
                                   std::size_t window_begin, std::size_t window_end) {
  if (verdicts.empty()) throw Error(ErrorKind::kInvalidInput, "no verdicts to report on");
  ComplianceReport r;
  r.window_begin = window_begin;
  r.window_end = window_end;
  for (const auto& v : verdicts) {
    if (v.skipped) {
      ++r.skipped;
      continue;
    }
    auto& c = r.per_rule[v.rule_id];
    ++c.checked;
    if (!v.compliant) {
      ++c.violated;
      const std::size_t b = partition.block_of(v.predicted);
      ++r.violation_patterns[partition.blocks[b].id];
    }
  }
  for (auto& [id, c] : r.per_rule)
    c.rate = 1.0 - static_cast<double>(c.violated) / static_cast<double>(c.checked);
  return r;
}

std::string_view to_string(StrengthenOutcome o) {
  switch (o) {
    case StrengthenOutcome::kNoChange:
      return "no-change";
    case StrengthenOutcome::kStrengthened:
      return "strengthened";
    case StrengthenOutcome::kSaturated:
      return "saturated";
  }
  return "no-change";
}

StrengthenResult strengthen(const Rule& rule, const ComplianceReport& report, const StrengthenPolicy& policy) {
  if (!(policy.delta_multiplier > 1.0) || !(policy.delta_cap > 0.0))
    throw Error(ErrorKind::kInvalidParameter, "strengthening needs multiplier > 1 and a positive cap");
  StrengthenResult out;
  out.rule = rule;
  out.delta_before = policy.compile.delta_of(rule);
  out.delta_after = out.delta_before;

  const auto it = report.per_rule.find(rule.id);
  if (it == report.per_rule.end() || it->second.rate >= policy.target_rate) return out;
  if (out.delta_before >= policy.delta_cap) {
    out.outcome = StrengthenOutcome::kSaturated;
    return out;
  }
  out.delta_after = std::min(policy.delta_cap, out.delta_before * policy.delta_multiplier);
  out.rule.delta_override = out.delta_after;
  out.rule.version = rule.version + 1;
  out.outcome = StrengthenOutcome::kStrengthened;
  return out;
}

nlohmann::json verdict_to_json(const Verdict& v) {
  nlohmann::json j{{"sample", v.sample}, {"skipped", v.skipped}};
  if (v.skipped) {
    j["rule_id"] = nullptr;
    j["compliant"] = nullptr;
  } else {
    j["rule_id"] = v.rule_id;
    j["compliant"] = v.compliant;
  }
  j["predicted"] = v.predicted;
  j["expected"] = v.expected;
  j["attention_fidelity"] = v.attention_fidelity;
  return j;
}

nlohmann::json report_to_json(const ComplianceReport& r) {
  nlohmann::json rules = nlohmann::json::object();
  for (const auto& [id, c] : r.per_rule)
    rules[id] = {{"checked", c.checked}, {"violated", c.violated}, {"rate", c.rate}};
  nlohmann::json patterns = nlohmann::json::object();
  for (const auto& [b, n] : r.violation_patterns) patterns[b] = n;
  return {{"per_rule", rules},
          {"violation_patterns", patterns},
          {"window", {r.window_begin, r.window_end}},
          {"skipped", r.skipped},
          {"overall_rate", r.overall_rate()}};
}

nlohmann::json strengthen_to_json(const StrengthenResult& r) {
  return {{"rule_id", r.rule.id},
          {"outcome", std::string(to_string(r.outcome))},
          {"version", r.rule.version},
          {"delta_before", r.delta_before},
          {"delta_after", r.delta_after}};
}

}  // namespace localist
