// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "localist/objective.hpp"
#include "localist/rules.hpp"

namespace localist {

double CompilePolicy::delta_of(const Rule& rule) const {
  if (rule.delta_override) return *rule.delta_override;
  const auto it = delta_for.find(rule.criticality);
  if (it == delta_for.end()) throw Error(ErrorKind::kCompile, "no delta for criticality");
  return it->second;
}

CompiledConstraint compile(const Rule& rule, const BlockPartition& partition, const Calibration& calibration,
                           const CompilePolicy& policy) {
  std::size_t target = 0;
  try {
    target = partition.find_block(rule.target_block);
  } catch (const Error&) {
    throw Error(ErrorKind::kCompile, "rule '" + rule.id + "' targets unknown block '" + rule.target_block + "'");
  }
  if (calibration.c_prime.size() != partition.block_count())
    throw Error(ErrorKind::kCompile, "calibration has " + std::to_string(calibration.c_prime.size()) +
                                         " entries for " + std::to_string(partition.block_count()) + " blocks");
  for (double c : calibration.c_prime)
    if (!(c > 0.0) || !std::isfinite(c)) throw Error(ErrorKind::kCompile, "calibration c' must be positive");
  if (!(calibration.tau > 0.0)) throw Error(ErrorKind::kCompile, "calibration tau must be positive");
  if (policy.head_home.empty()) throw Error(ErrorKind::kCompile, "policy lists no heads");
  if (!(policy.safety_factor > 0.0) || policy.floor < 0.0)
    throw Error(ErrorKind::kCompile, "safety factor must be positive and floor non-negative");

  CompiledConstraint out;
  out.rule_id = rule.id;
  out.rule_version = rule.version;
  out.target_block = rule.target_block;
  out.delta = policy.delta_of(rule);
  out.tau = calibration.tau;
  if (!(out.delta >= 0.0)) throw Error(ErrorKind::kCompile, "delta must be non-negative");

  if (policy.heads == HeadSelection::kHomed)
    for (std::size_t h = 0; h < policy.head_home.size(); ++h)
      if (policy.head_home[h] == target) out.affected_heads.push_back(h);
  if (out.affected_heads.empty())
    for (std::size_t h = 0; h < policy.head_home.size(); ++h) out.affected_heads.push_back(h);

  for (std::size_t h : out.affected_heads) {
    for (std::size_t i = 0; i < partition.block_count(); ++i) {
      if (i == target) continue;
      AlphaUpdate u;
      u.head = h;
      u.block = partition.blocks[i].id;
      u.lambda = threshold_lambda(calibration.c_prime[i], calibration.tau, out.delta);
      u.alpha = std::max(policy.safety_factor * u.lambda, policy.floor);
      out.alpha_updates.push_back(u);
    }
  }
  return out;
}

nlohmann::json constraint_to_json(const CompiledConstraint& c) {
  nlohmann::json updates = nlohmann::json::array();
  for (const auto& u : c.alpha_updates)
    updates.push_back({{"head", u.head}, {"block", u.block}, {"alpha", u.alpha}, {"lambda", u.lambda}});
  return {{"rule_id", c.rule_id},       {"rule_version", c.rule_version}, {"affected_heads", c.affected_heads},
          {"target_block", c.target_block}, {"delta", c.delta},           {"tau", c.tau},
          {"alpha_updates", updates}};
}

CompiledConstraint constraint_from_json(const nlohmann::json& j) {
  try {
    CompiledConstraint c;
    c.rule_id = j.at("rule_id").get<std::string>();
    c.rule_version = j.at("rule_version").get<int>();
    c.affected_heads = j.at("affected_heads").get<std::vector<std::size_t>>();
    c.target_block = j.at("target_block").get<std::string>();
    c.delta = j.at("delta").get<double>();
    c.tau = j.at("tau").get<double>();
    for (const auto& u : j.at("alpha_updates"))
      c.alpha_updates.push_back({u.at("head").get<std::size_t>(), u.at("block").get<std::string>(),
                                 u.at("alpha").get<double>(), u.at("lambda").get<double>()});
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed constraint: ") + e.what());
  }
}

}  // namespace localist
