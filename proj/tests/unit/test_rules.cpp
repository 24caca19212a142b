// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "localist/objective.hpp"
#include "localist/rules.hpp"

namespace localist {
namespace {

Clock fixed_clock() {
  return [] { return std::string("2026-01-01T00:00:00Z"); };
}

Rule make_rule(const std::string& id, const std::string& cls = "cue1", const std::string& block = "b1") {
  Rule r;
  r.id = id;
  r.priority = 3;
  r.criticality = Criticality::kHigh;
  r.trigger_class = cls;
  r.target_block = block;
  return r;
}

TEST(Parse, SingleRule) {
  const auto rules =
      parse_rules(R"(rule r1 priority 1 criticality high { when class "drug" then attend block "interactions"; })");
  ASSERT_EQ(rules.size(), 1u);
  EXPECT_EQ(rules[0].id, "r1");
  EXPECT_EQ(rules[0].priority, 1);
  EXPECT_EQ(rules[0].criticality, Criticality::kHigh);
  EXPECT_EQ(rules[0].trigger_class, "drug");
  EXPECT_EQ(rules[0].target_block, "interactions");
}

TEST(Parse, EmptyAndCommentOnlyFiles) {
  EXPECT_TRUE(parse_rules("").empty());
  EXPECT_TRUE(parse_rules("# nothing here\n   \n# still nothing").empty());
}

TEST(Parse, FileOrderAndNegativePriority) {
  const auto rules = parse_rules(
      "rule b priority -2 criticality low { when class \"x\" then attend block \"y\"; }\n"
      "# comment between\n"
      "rule a priority 7 criticality medium { when class \"p q\" then attend block \"z\"; }\n");
  ASSERT_EQ(rules.size(), 2u);
  EXPECT_EQ(rules[0].id, "b");
  EXPECT_EQ(rules[0].priority, -2);
  EXPECT_EQ(rules[1].trigger_class, "p q");
}

TEST(Parse, MissingSemicolonReportsExactPosition) {
  const std::string text = "rule r1 priority 1 criticality high {\n  when class \"a\" then attend block \"b\" }";
  try {
    parse_rules(text);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_EQ(e.offset(), text.rfind('}'));
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.column(), text.size() - text.find('\n') - 1);
    EXPECT_TRUE(e.expected().count("';'")) << e.what();
  }
}

TEST(Parse, UnknownCriticality) {
  try {
    parse_rules("rule r priority 1 criticality urgent { when class \"a\" then attend block \"b\"; }");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_EQ(e.column(), 31u);
    EXPECT_EQ(e.expected(), (std::set<std::string>{"'high'", "'low'", "'medium'"}));
  }
}

TEST(Parse, DuplicateIdRejected) {
  const std::string one = "rule r priority 1 criticality low { when class \"a\" then attend block \"b\"; }\n";
  EXPECT_THROW(parse_rules(one + one), ParseError);
}

TEST(Parse, BadPriorityAndUnterminatedString) {
  EXPECT_THROW(parse_rules("rule r priority x criticality low { when class \"a\" then attend block \"b\"; }"),
               ParseError);
  EXPECT_THROW(parse_rules("rule r priority 1 criticality low { when class \"a then"), ParseError);
}

TEST(Render, RoundTripsCorpus) {
  std::vector<Rule> corpus;
  for (int i = 0; i < 50; ++i) {
    Rule r = make_rule("rule_" + std::to_string(i), "class \"" + std::to_string(i % 7) + "\\",
                       "blk-" + std::to_string(i % 5));
    r.priority = (i * 37) % 23 - 11;
    r.criticality = static_cast<Criticality>(i % 3);
    corpus.push_back(r);
  }
  const auto back = parse_rules(render_rules(corpus));
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_TRUE(back[i].same_statement(corpus[i])) << i;
}

TEST(RuleJson, RoundTrip) {
  Rule r = make_rule("r");
  r.version = 4;
  r.compliance = {10, 2};
  r.delta_override = 3.0;
  EXPECT_EQ(rule_from_json(nlohmann::json::parse(rule_to_json(r).dump())), r);
}

TEST(Store, PutThenGet) {
  RuleStore store(fixed_clock());
  const auto stored = store.put(make_rule("r1"));
  EXPECT_EQ(stored.version, 1);
  const auto got = store.get("r1");
  EXPECT_EQ(got, stored);
  EXPECT_TRUE(got.same_statement(make_rule("r1")));
  EXPECT_EQ(got.created_at, "2026-01-01T00:00:00Z");
}

TEST(Store, UpdateKeepsHistory) {
  RuleStore store(fixed_clock());
  const auto v1 = store.put(make_rule("r1"));
  auto changed = make_rule("r1", "cue1", "b2");
  const auto v2 = store.put(changed, 1);
  EXPECT_EQ(v2.version, 2);
  EXPECT_EQ(store.get("r1", 1), v1);
  EXPECT_EQ(store.get("r1").target_block, "b2");
  const auto h = store.history("r1");
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].version, 1);
  EXPECT_EQ(h[1].version, 2);
}

TEST(Store, StaleVersionConflictLeavesStoreUnchanged) {
  RuleStore store(fixed_clock());
  store.put(make_rule("r1"));
  store.put(make_rule("r1", "cue1", "b2"), 1);
  try {
    store.put(make_rule("r1", "cue1", "b3"), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConflict);
  }
  EXPECT_EQ(store.get("r1").version, 2);
  EXPECT_EQ(store.get("r1").target_block, "b2");
  // Putting an existing id without a version is also stale.
  EXPECT_THROW(store.put(make_rule("r1")), Error);
}

TEST(Store, RacingPutsExactlyOneWins) {
  for (int round = 0; round < 20; ++round) {
    RuleStore store(fixed_clock());
    store.put(make_rule("r"));
    std::atomic<int> ok{0}, conflicts{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back([&, t] {
        try {
          store.put(make_rule("r", "cue", "b" + std::to_string(t)), 1);
          ++ok;
        } catch (const Error& e) {
          if (e.kind() == ErrorKind::kConflict) ++conflicts;
        }
      });
    for (auto& th : threads) th.join();
    EXPECT_EQ(ok.load(), 1);
    EXPECT_EQ(conflicts.load(), 3);
    EXPECT_EQ(store.history("r").size(), 2u);
  }
}

TEST(Store, DeleteIsTombstone) {
  RuleStore store(fixed_clock());
  store.put(make_rule("a"));
  store.put(make_rule("b"));
  store.remove("a");
  EXPECT_EQ(store.list().size(), 1u);
  EXPECT_THROW(store.get("a"), Error);
  EXPECT_EQ(store.get("a", 1).id, "a");
  EXPECT_THROW(store.remove("a"), Error);
  EXPECT_THROW(store.remove("zzz"), Error);
  EXPECT_THROW(store.get("zzz"), Error);
}

TEST(Store, JournalReplayRestoresState) {
  const auto path = std::filesystem::temp_directory_path() / "localist_test_store.rulesdb";
  std::filesystem::remove(path);
  {
    auto store = RuleStore::open(path, fixed_clock());
    store.put(make_rule("a"));
    store.put(make_rule("a", "cue9", "b0"), 1);
    store.put(make_rule("b"));
    store.remove("b");
  }
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  const auto rec = nlohmann::json::parse(first);
  EXPECT_EQ(rec.at("op"), "put");
  EXPECT_EQ(rec.at("version"), 1);
  EXPECT_TRUE(rec.contains("timestamp"));
  EXPECT_TRUE(rec.contains("rule"));

  const auto reopened = RuleStore::open(path, fixed_clock());
  std::filesystem::remove(path);
  EXPECT_EQ(reopened.get("a").version, 2);
  EXPECT_EQ(reopened.get("a").trigger_class, "cue9");
  EXPECT_EQ(reopened.get("a", 1).trigger_class, "cue1");
  EXPECT_THROW(reopened.get("b"), Error);
  EXPECT_EQ(reopened.list().size(), 1u);
}

TEST(Store, HistoryIsContiguousAndImmutable) {
  RuleStore store(fixed_clock());
  store.put(make_rule("r"));
  const auto v1 = store.get("r", 1);
  for (int v = 1; v < 6; ++v) store.put(make_rule("r", "c" + std::to_string(v)), v);
  const auto h = store.history("r");
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(h[i].version, static_cast<int>(i + 1));
  EXPECT_EQ(store.get("r", 1), v1);
}

BlockPartition partition3() {
  Rng rng(1);
  return build_partition({3, 1, 0, 2, 0.5}, rng).partition;
}

CompilePolicy policy(std::size_t heads, std::size_t blocks, double floor = 10.0) {
  CompilePolicy p;
  p.floor = floor;
  for (std::size_t h = 0; h < heads; ++h) p.head_home.push_back(h % blocks);
  return p;
}

TEST(Compile, HighCriticalityAtSmallTau) {
  const auto part = partition3();
  const Calibration cal{{1.5, 2.0, 0.5}, 0.1};
  const auto c = compile(make_rule("r", "cue1", "b1"), part, cal, policy(3, 3));
  EXPECT_EQ(c.delta, 2.0);
  EXPECT_EQ(c.affected_heads, (std::vector<std::size_t>{1}));
  ASSERT_EQ(c.alpha_updates.size(), 2u);
  EXPECT_EQ(c.alpha_updates[0].block, "b0");
  EXPECT_NEAR(c.alpha_updates[0].lambda, (1.5 / 0.1) * std::exp(-20.0), 1e-22);
  EXPECT_NEAR(c.alpha_updates[1].lambda, (0.5 / 0.1) * std::exp(-20.0), 1e-22);
  for (const auto& u : c.alpha_updates) EXPECT_EQ(u.alpha, 10.0);  // the floor dominates
}

TEST(Compile, SafetyFactorTimesLambda) {
  const auto part = partition3();
  auto r = make_rule("r", "cue1", "b1");
  r.delta_override = 0.0;
  const auto c = compile(r, part, {{1.0, 1.0, 1.0}, 1.0}, policy(3, 3, 0.0));
  for (const auto& u : c.alpha_updates) EXPECT_DOUBLE_EQ(u.alpha, 10.0);
}

TEST(Compile, AllHeadsPolicyAndDeterminism) {
  const auto part = partition3();
  auto p = policy(4, 3);
  p.heads = HeadSelection::kAll;
  const Calibration cal{{1.0, 1.0, 1.0}, 0.5};
  const auto a = compile(make_rule("r", "cue0", "b0"), part, cal, p);
  EXPECT_EQ(a.affected_heads.size(), 4u);
  EXPECT_EQ(a.alpha_updates.size(), 8u);
  const auto b = compile(make_rule("r", "cue0", "b0"), part, cal, p);
  EXPECT_EQ(constraint_to_json(a), constraint_to_json(b));
  EXPECT_EQ(constraint_to_json(constraint_from_json(constraint_to_json(a))), constraint_to_json(a));
}

TEST(Compile, AlphaDominatesLambda) {
  const auto part = partition3();
  for (double tau : {0.1, 0.5, 1.0, 3.0})
    for (auto crit : {Criticality::kLow, Criticality::kMedium, Criticality::kHigh}) {
      auto r = make_rule("r", "c", "b2");
      r.criticality = crit;
      const auto c = compile(r, part, {{3.0, 0.2, 1.0}, tau}, policy(3, 3, 0.0));
      for (const auto& u : c.alpha_updates) EXPECT_GE(u.alpha, u.lambda);
    }
}

TEST(Compile, Errors) {
  const auto part = partition3();
  try {
    compile(make_rule("r7", "c", "nowhere"), part, {{1, 1, 1}, 1.0}, policy(3, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCompile);
    EXPECT_NE(std::string(e.what()).find("r7"), std::string::npos);
  }
  EXPECT_THROW(compile(make_rule("r", "c", "b1"), part, {{1, 0, 1}, 1.0}, policy(3, 3)), Error);
}

}  // namespace
}  // namespace localist
