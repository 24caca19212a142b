// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "localist/rules.hpp"

namespace localist {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RuleStore::RuleStore(Clock clock) : clock_(std::move(clock)) {}

RuleStore::RuleStore(RuleStore&& other) noexcept {
  std::lock_guard lock(other.mutex_);
  clock_ = std::move(other.clock_);
  journal_ = std::move(other.journal_);
  entries_ = std::move(other.entries_);
}

RuleStore& RuleStore::operator=(RuleStore&& other) noexcept {
  if (this != &other) {
    std::scoped_lock lock(mutex_, other.mutex_);
    clock_ = std::move(other.clock_);
    journal_ = std::move(other.journal_);
    entries_ = std::move(other.entries_);
  }
  return *this;
}

RuleStore RuleStore::open(const std::filesystem::path& journal, Clock clock) {
  RuleStore store(std::move(clock));
  if (std::filesystem::exists(journal)) {
    std::ifstream in(journal);
    if (!in) throw Error(ErrorKind::kIo, "cannot read " + journal.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto rec = nlohmann::json::parse(line);
        const auto op = rec.at("op").get<std::string>();
        if (op == "put") {
          Rule r = rule_from_json(rec.at("rule"));
          auto& e = store.entries_[r.id];
          e.deleted = false;
          e.versions.push_back(std::move(r));
        } else if (op == "delete") {
          store.entries_.at(rec.at("id").get<std::string>()).deleted = true;
        } else {
          throw Error(ErrorKind::kParse, "unknown op '" + op + "'");
        }
      } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::kParse,
                    journal.string() + ":" + std::to_string(lineno) + ": " + ex.what());
      } catch (const std::out_of_range&) {
        throw Error(ErrorKind::kParse, journal.string() + ":" + std::to_string(lineno) + ": unknown rule");
      }
    }
  }
  store.journal_ = journal;
  return store;
}

void RuleStore::append_journal(const nlohmann::json& record) {
  if (!journal_) return;
  std::ofstream out(*journal_, std::ios::app);
  out << record.dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorKind::kIo, "cannot append to " + journal_->string());
}

Rule RuleStore::put(Rule rule, std::optional<int> expected_version) {
  if (rule.id.empty()) throw Error(ErrorKind::kInvalidInput, "rule id is empty");
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(rule.id);
  const int current = it == entries_.end() ? 0 : it->second.versions.back().version;
  const int expected = expected_version.value_or(0);
  if (expected != current)
    throw Error(ErrorKind::kConflict, "rule '" + rule.id + "' is at version " + std::to_string(current) +
                                          ", not " + std::to_string(expected));
  const std::string now = clock_();
  rule.version = current + 1;
  rule.created_at = it == entries_.end() ? now : it->second.versions.front().created_at;
  rule.updated_at = now;
  append_journal({{"op", "put"}, {"rule", rule_to_json(rule)}, {"version", rule.version}, {"timestamp", now}});
  auto& e = entries_[rule.id];
  e.deleted = false;
  e.versions.push_back(rule);
  return rule;
}

Rule RuleStore::get(const std::string& id, std::optional<int> version) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw Error(ErrorKind::kNotFound, "no rule '" + id + "'");
  if (!version) {
    if (it->second.deleted) throw Error(ErrorKind::kNotFound, "rule '" + id + "' was deleted");
    return it->second.versions.back();
  }
  for (const auto& r : it->second.versions)
    if (r.version == *version) return r;
  throw Error(ErrorKind::kNotFound, "no version " + std::to_string(*version) + " of rule '" + id + "'");
}

std::vector<Rule> RuleStore::list() const {
  std::lock_guard lock(mutex_);
  std::vector<Rule> out;
  for (const auto& [id, e] : entries_)
    if (!e.deleted) out.push_back(e.versions.back());
  return out;
}

void RuleStore::remove(const std::string& id) {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(id);
  if (it == entries_.end() || it->second.deleted) throw Error(ErrorKind::kNotFound, "no rule '" + id + "'");
  append_journal({{"op", "delete"},
                  {"id", id},
                  {"version", it->second.versions.back().version},
                  {"timestamp", clock_()}});
  it->second.deleted = true;
}

std::vector<Rule> RuleStore::history(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw Error(ErrorKind::kNotFound, "no rule '" + id + "'");
  return it->second.versions;
}

}  // namespace localist
