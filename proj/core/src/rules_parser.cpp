// SPDX-License-Identifier: Apache-2.0
#include <cctype>
#include <charconv>
#include <set>

#include <nlohmann/json.hpp>

#include "localist/rules.hpp"

namespace localist {

namespace {

std::string describe_expected(const std::set<std::string>& expected) {
  std::string out;
  for (const auto& e : expected) {
    if (!out.empty()) out += ", ";
    out += e;
  }
  return out;
}

enum class TokKind { kWord, kInt, kString, kLBrace, kRBrace, kSemi, kEnd };

struct Tok {
  TokKind kind = TokKind::kEnd;
  std::string text;
  std::size_t offset = 0;
  std::size_t line = 1;
  std::size_t column = 1;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Tok next() {
    skip_space();
    Tok t;
    t.offset = pos_;
    t.line = line_;
    t.column = col_;
    if (pos_ >= src_.size()) return t;
    const char c = src_[pos_];
    if (c == '{' || c == '}' || c == ';') {
      t.kind = c == '{' ? TokKind::kLBrace : c == '}' ? TokKind::kRBrace : TokKind::kSemi;
      t.text = std::string(1, c);
      advance();
      return t;
    }
    if (c == '"') {
      t.kind = TokKind::kString;
      advance();
      while (true) {
        if (pos_ >= src_.size() || src_[pos_] == '\n')
          throw ParseError(t.line, t.column, t.offset, {"closing '\"'"}, "unterminated string");
        char d = src_[pos_];
        if (d == '"') {
          advance();
          break;
        }
        if (d == '\\') {
          advance();
          if (pos_ >= src_.size()) continue;
          d = src_[pos_];
          if (d != '"' && d != '\\')
            throw ParseError(line_, col_, pos_, {"'\\\"'", "'\\\\'"}, std::string("\\") + d);
        }
        t.text.push_back(d);
        advance();
      }
      return t;
    }
    if (c == '-' || c == '+' || std::isdigit(static_cast<unsigned char>(c))) {
      t.kind = TokKind::kInt;
      t.text.push_back(c);
      advance();
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
        t.text.push_back(src_[pos_]);
        advance();
      }
      return t;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      t.kind = TokKind::kWord;
      while (pos_ < src_.size()) {
        const char d = src_[pos_];
        if (!(std::isalnum(static_cast<unsigned char>(d)) || d == '_' || d == '-' || d == '.')) break;
        t.text.push_back(d);
        advance();
      }
      return t;
    }
    throw ParseError(t.line, t.column, t.offset, {"rule text"}, std::string(1, c));
  }

 private:
  void advance() {
    if (src_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  void skip_space() {
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        advance();
      } else {
        break;
      }
    }
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::size_t col_ = 1;
};

std::string found_text(const Tok& t) {
  switch (t.kind) {
    case TokKind::kEnd:
      return "end of input";
    case TokKind::kString:
      return "\"" + t.text + "\"";
    default:
      return "'" + t.text + "'";
  }
}

class Parser {
 public:
  explicit Parser(std::string_view src) : lex_(src) { cur_ = lex_.next(); }

  std::vector<Rule> parse_all() {
    std::vector<Rule> rules;
    std::set<std::string> seen;
    while (cur_.kind != TokKind::kEnd) {
      const Tok start = cur_;
      keyword("rule", true);
      const Tok id = expect(TokKind::kWord, "rule id");
      if (!seen.insert(id.text).second)
        throw ParseError(id.line, id.column, id.offset, {"unique rule id"}, "duplicate id '" + id.text + "'");
      Rule r;
      r.id = id.text;
      keyword("priority");
      const Tok pri = expect(TokKind::kInt, "integer");
      long value = 0;
      const char* first = pri.text.data() + (pri.text.front() == '+' ? 1 : 0);
      const auto [end, ec] = std::from_chars(first, pri.text.data() + pri.text.size(), value);
      if (ec != std::errc() || end != pri.text.data() + pri.text.size())
        throw ParseError(pri.line, pri.column, pri.offset, {"integer"}, found_text(pri));
      r.priority = value;
      keyword("criticality");
      const Tok crit = cur_;
      const auto c = crit.kind == TokKind::kWord ? parse_criticality(crit.text) : std::nullopt;
      if (!c) throw ParseError(crit.line, crit.column, crit.offset, {"'high'", "'low'", "'medium'"}, found_text(crit));
      r.criticality = *c;
      bump();
      expect(TokKind::kLBrace, "'{'");
      keyword("when");
      keyword("class");
      r.trigger_class = expect(TokKind::kString, "quoted class label").text;
      keyword("then");
      keyword("attend");
      keyword("block");
      r.target_block = expect(TokKind::kString, "quoted block id").text;
      expect(TokKind::kSemi, "';'");
      expect(TokKind::kRBrace, "'}'");
      (void)start;
      rules.push_back(std::move(r));
    }
    return rules;
  }

 private:
  void bump() { cur_ = lex_.next(); }

  [[noreturn]] void fail(std::set<std::string> expected) const {
    throw ParseError(cur_.line, cur_.column, cur_.offset, std::move(expected), found_text(cur_));
  }

  void keyword(const char* word, bool at_rule_start = false) {
    if (cur_.kind != TokKind::kWord || cur_.text != word) {
      std::set<std::string> expected{std::string("'") + word + "'"};
      if (at_rule_start) expected.insert("end of input");
      fail(std::move(expected));
    }
    bump();
  }

  Tok expect(TokKind kind, const char* what) {
    if (cur_.kind != kind) fail({what});
    Tok t = cur_;
    bump();
    return t;
  }

  Lexer lex_;
  Tok cur_;
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

}  // namespace

ParseError::ParseError(std::size_t line, std::size_t column, std::size_t offset, std::set<std::string> expected,
                       const std::string& found)
    : Error(ErrorKind::kParse, std::to_string(line) + ":" + std::to_string(column) + ": expected " +
                                   describe_expected(expected) + ", found " + found),
      line_(line),
      column_(column),
      offset_(offset),
      expected_(std::move(expected)) {}

std::string_view to_string(Criticality c) {
  switch (c) {
    case Criticality::kLow:
      return "low";
    case Criticality::kMedium:
      return "medium";
    case Criticality::kHigh:
      return "high";
  }
  return "medium";
}

std::optional<Criticality> parse_criticality(std::string_view text) {
  if (text == "low") return Criticality::kLow;
  if (text == "medium") return Criticality::kMedium;
  if (text == "high") return Criticality::kHigh;
  return std::nullopt;
}

std::vector<Rule> parse_rules(std::string_view text) { return Parser(text).parse_all(); }

std::string render_rule(const Rule& r) {
  return "rule " + r.id + " priority " + std::to_string(r.priority) + " criticality " +
         std::string(to_string(r.criticality)) + " {\n  when class " + quote(r.trigger_class) +
         " then attend block " + quote(r.target_block) + ";\n}\n";
}

std::string render_rules(std::span<const Rule> rules) {
  std::string out;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    if (i) out += "\n";
    out += render_rule(rules[i]);
  }
  return out;
}

nlohmann::json rule_to_json(const Rule& r) {
  nlohmann::json j{{"id", r.id},
                   {"version", r.version},
                   {"priority", r.priority},
                   {"criticality", std::string(to_string(r.criticality))},
                   {"trigger_class", r.trigger_class},
                   {"target_block", r.target_block},
                   {"created_at", r.created_at},
                   {"updated_at", r.updated_at},
                   {"compliance", {{"checked", r.compliance.checked}, {"violated", r.compliance.violated}}}};
  j["delta_override"] = r.delta_override ? nlohmann::json(*r.delta_override) : nlohmann::json(nullptr);
  return j;
}

Rule rule_from_json(const nlohmann::json& j) {
  try {
    Rule r;
    r.id = j.at("id").get<std::string>();
    r.version = j.at("version").get<int>();
    r.priority = j.at("priority").get<long>();
    const auto c = parse_criticality(j.at("criticality").get<std::string>());
    if (!c) throw Error(ErrorKind::kInvalidInput, "unknown criticality");
    r.criticality = *c;
    r.trigger_class = j.at("trigger_class").get<std::string>();
    r.target_block = j.at("target_block").get<std::string>();
    r.created_at = j.value("created_at", "");
    r.updated_at = j.value("updated_at", "");
    if (j.contains("compliance")) {
      r.compliance.checked = j["compliance"].at("checked").get<std::size_t>();
      r.compliance.violated = j["compliance"].at("violated").get<std::size_t>();
    }
    if (j.contains("delta_override") && !j["delta_override"].is_null())
      r.delta_override = j["delta_override"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, std::string("malformed rule: ") + e.what());
  }
}

}  // namespace localist
