// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "localist/bounds.hpp"
#include "localist/margin.hpp"
#include "localist/rules.hpp"
#include "localist/serialization.hpp"
#include "localist/verifier.hpp"

#ifndef LOCALIST_VERSION
#define LOCALIST_VERSION "0.0.0"
#endif

namespace localist::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kPartitionFile = "partition.json";
constexpr const char* kDatasetFile = "dataset.jsonl";
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kTrainedSchema = "localist.trained";

// ---- config -------------------------------------------------------------

[[noreturn]] void config_error(const std::string& origin, const std::string& msg) {
  throw Error(ErrorKind::kInvalidInput, origin + ": " + msg);
}

template <typename T>
T read_number(const toml::table& tbl, const char* table_name, const char* key, T fallback,
              const std::string& origin) {
  const auto node = tbl[key];
  if (!node) return fallback;
  if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node.value_exact<double>()) return *v;
    if (auto v = node.value_exact<std::int64_t>()) return static_cast<T>(*v);
  } else {
    if (auto v = node.value_exact<std::int64_t>()) {
      if (*v < 0) config_error(origin, std::string("[") + table_name + "] " + key + " must be non-negative");
      return static_cast<T>(*v);
    }
  }
  config_error(origin, std::string("[") + table_name + "] " + key + " has the wrong type");
}

bool read_bool(const toml::table& tbl, const char* table_name, const char* key, bool fallback,
               const std::string& origin) {
  const auto node = tbl[key];
  if (!node) return fallback;
  if (auto v = node.value_exact<bool>()) return *v;
  config_error(origin, std::string("[") + table_name + "] " + key + " must be a boolean");
}

std::vector<double> read_list(const toml::table& tbl, const char* table_name, const char* key,
                              const std::string& origin) {
  std::vector<double> out;
  const auto node = tbl[key];
  if (!node) return out;
  const auto* arr = node.as_array();
  if (!arr) config_error(origin, std::string("[") + table_name + "] " + key + " must be an array");
  for (const auto& el : *arr) {
    if (auto v = el.value<double>())
      out.push_back(*v);
    else
      config_error(origin, std::string("[") + table_name + "] " + key + " must hold numbers");
  }
  return out;
}

const toml::table* sub_table(const toml::table& root, const char* name, const std::string& origin) {
  const auto node = root[name];
  if (!node) return nullptr;
  const auto* t = node.as_table();
  if (!t) config_error(origin, std::string("[") + name + "] must be a table");
  return t;
}

// ---- artifacts ------------------------------------------------------------

struct Manifest {
  std::string command;
  std::optional<fs::path> config;
  std::uint64_t seed = 0;
  fs::path out_dir;
  std::vector<std::string> artifacts;  // relative to out_dir
  json extra = json::object();
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

void write_manifest(const Manifest& m) {
  json artifacts = json::array();
  auto names = m.artifacts;
  std::sort(names.begin(), names.end());
  for (const auto& a : names) artifacts.push_back({{"path", a}, {"sha256", file_sha256(m.out_dir / a)}});
  json config = nullptr;
  if (m.config) config = {{"path", m.config->string()}, {"sha256", file_sha256(*m.config)}};
  json doc{{"command", m.command}, {"config", config},       {"seed", m.seed},
           {"out_dir", m.out_dir.string()}, {"artifacts", artifacts}, {"tool_version", LOCALIST_VERSION}};
  for (auto it = m.extra.begin(); it != m.extra.end(); ++it) doc[it.key()] = it.value();
  write_text(m.out_dir / kManifestFile, doc.dump(2) + "\n");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json parse_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, path.string() + " is not valid JSON: " + e.what());
  }
}

struct LoadedData {
  PartitionBundle bundle;
  Dataset dataset;
  std::string checksum;
};

LoadedData load_data(const fs::path& dir) {
  LoadedData d;
  d.bundle = partition_from_json(parse_json_file(dir / kPartitionFile));
  d.checksum = partition_checksum(d.bundle.partition, d.bundle.embeddings);
  d.dataset = read_dataset(dir / kDatasetFile);
  if (d.dataset.partition_checksum != d.checksum)
    throw Error(ErrorKind::kChecksumMismatch, "dataset was generated for a different partition");
  if (d.dataset.samples.empty()) throw Error(ErrorKind::kInvalidInput, "dataset is empty");
  return d;
}

json trained_to_json(const AttentionModel& model, const DialSettings& dial) {
  return {{"schema", kTrainedSchema}, {"version", 1}, {"model", model_to_json(model)}, {"dial", dial_to_json(dial)}};
}

struct Trained {
  AttentionModel model;
  std::optional<DialSettings> dial;
};

Trained load_trained(const fs::path& path) {
  const json doc = parse_json_file(path);
  Trained t;
  try {
    if (doc.contains("schema") && doc["schema"] == kTrainedSchema) {
      t.model = model_from_json(doc.at("model"));
      t.dial = dial_from_json(doc.at("dial"));
    } else if (doc.contains("payload")) {
      t.model = model_from_json(doc["payload"].at("model"));
      t.dial = dial_from_json(doc["payload"].at("dial"));
    } else {
      t.model = model_from_json(doc);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidInput, path.string() + ": " + e.what());
  }
  return t;
}

std::vector<double> c_prime_per_block(const AttentionModel& model, std::span<const PointerSample> batch,
                                      const PartitionBundle& bundle) {
  std::vector<double> out;
  for (std::size_t b = 0; b < bundle.partition.block_count(); ++b) {
    const auto est = estimate_c_prime(model, batch, bundle.partition, bundle.embeddings, b);
    out.push_back(std::max(est.c_prime, 1e-12));
  }
  return out;
}

// Watches a rules file; recompiles whenever its content hash changes.
class RulesFileFeed : public ConstraintFeed {
 public:
  RulesFileFeed(fs::path path, bool watch, const PartitionBundle& bundle, std::span<const PointerSample> batch,
                CompilePolicy policy)
      : path_(std::move(path)), watch_(watch), bundle_(bundle), batch_(batch), policy_(std::move(policy)),
        store_([] { return std::string("-"); }) {}

  std::optional<std::vector<CompiledConstraint>> poll(const TrainingState& state) override {
    if (polled_ && !watch_) return std::nullopt;
    polled_ = true;
    std::string text;
    try {
      text = read_file(path_);
    } catch (const Error& e) {
      std::cerr << "rules: " << e.what() << "\n";
      return std::nullopt;
    }
    const std::string hash = sha256_hex(text);
    if (hash == last_hash_) return std::nullopt;
    last_hash_ = hash;
    std::vector<Rule> rules;
    try {
      rules = parse_rules(text);
    } catch (const ParseError& e) {
      std::cerr << "rules: " << path_.string() << ":" << e.what() << "\n";
      return std::nullopt;
    }
    Calibration cal{c_prime_per_block(state.model, batch_, bundle_), state.dial.tau};
    CompilePolicy policy = policy_;
    policy.head_home = state.dial.head_home;
    std::vector<CompiledConstraint> out;
    for (const auto& r : rules) {
      Rule stored;
      try {
        const Rule current = store_.get(r.id);
        stored = current.same_statement(r) ? current : store_.put(r, current.version);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNotFound) throw;
        stored = store_.put(r);
      }
      try {
        out.push_back(compile(stored, bundle_.partition, cal, policy));
      } catch (const Error& e) {
        std::cerr << "rules: " << e.what() << "\n";
      }
    }
    ++reloads_;
    return out;
  }

  std::size_t reloads() const { return reloads_; }

 private:
  fs::path path_;
  bool watch_;
  const PartitionBundle& bundle_;
  std::span<const PointerSample> batch_;
  CompilePolicy policy_;
  RuleStore store_;
  std::string last_hash_;
  bool polled_ = false;
  std::size_t reloads_ = 0;
};

std::vector<Rule> load_rules(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::kNotFound, "rules file " + path.string() + " does not exist");
  return parse_rules(read_file(path));
}

CompilePolicy compile_policy(const RunConfig& config, const DialSettings& dial, std::optional<RegimePreset> preset) {
  CompilePolicy p;
  p.safety_factor = config.safety_factor;
  const RegimePreset which = preset.value_or(config.preset);
  if (config.floor)
    p.floor = *config.floor;
  else if (which == RegimePreset::kCustom)
    p.floor = config.alpha;
  else
    p.floor = preset_values(which, config.intermediate_alpha).alpha;
  p.head_home = dial.head_home;
  return p;
}

// ---- commands -------------------------------------------------------------

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig config_with_seed(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::optional<fs::path> config_file(const Common& c) {
  if (c.config_path.empty()) return std::nullopt;
  return fs::path(c.config_path);
}

int cmd_gen(const Common& common) {
  const RunConfig cfg = config_with_seed(common);
  if (!cfg.has_partition) throw Error(ErrorKind::kInvalidInput, "config has no [partition] table");
  if (!cfg.has_task) throw Error(ErrorKind::kInvalidInput, "config has no [task] table");
  const fs::path out = resolve_out_dir(common.out);

  Rng prng(stream_seed(cfg.seed, Stream::kPartition));
  const auto bundle = build_partition(cfg.partition, prng);
  TaskConfig task = cfg.task;
  task.seed = stream_seed(cfg.seed, Stream::kTask);
  Rng trng(task.seed);
  Dataset ds;
  ds.config = task;
  ds.partition_checksum = partition_checksum(bundle.partition, bundle.embeddings);
  ds.samples = generate(task, bundle.partition, trng);

  write_text(out / kPartitionFile, partition_to_json(bundle.partition, bundle.embeddings).dump() + "\n");
  write_dataset(out / kDatasetFile, ds);
  Manifest m{"gen", config_file(common), cfg.seed, out, {kPartitionFile, kDatasetFile}, json::object()};
  m.extra["partition_checksum"] = ds.partition_checksum;
  write_manifest(m);
  return kExitOk;
}

int cmd_train(const Common& common, const std::string& data_dir, const std::string& preset_flag,
              const std::string& rules_path, bool watch) {
  const RunConfig cfg = config_with_seed(common);
  std::optional<RegimePreset> preset;
  if (!preset_flag.empty()) {
    preset = parse_preset(preset_flag);
    if (!preset) throw Error(ErrorKind::kInvalidInput, "unknown preset '" + preset_flag + "'");
  }
  if (watch && rules_path.empty()) throw Error(ErrorKind::kInvalidInput, "--watch-rules needs --rules");
  const fs::path out = resolve_out_dir(common.out);
  const LoadedData data = load_data(data_dir);
  if (!rules_path.empty()) load_rules(rules_path);  // fail fast on a bad file

  TrainerConfig tc = cfg.trainer;
  tc.seed = stream_seed(cfg.seed, Stream::kTrain);
  tc.dial = dial_for(cfg, data.bundle.partition.block_count(), preset);
  tc.regime_preset = preset.value_or(cfg.preset);
  const TrainingData td{&data.bundle.partition, &data.bundle.embeddings, data.dataset.samples, data.checksum};
  const auto eval = td.samples.first(std::min(tc.eval_samples, td.samples.size()));

  std::unique_ptr<RulesFileFeed> feed;
  if (!rules_path.empty())
    feed = std::make_unique<RulesFileFeed>(rules_path, watch, data.bundle, eval,
                                           compile_policy(cfg, tc.dial, preset));

  std::vector<std::string> artifacts;
  auto on_checkpoint = [&](const TrainingState& s) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoints/step-%06zu.json", s.step);
    save_checkpoint(s, data.checksum, out / name);
    artifacts.emplace_back(name);
  };
  fs::create_directories(out);
  const auto result = continue_training(init_training(tc, td), tc, td, feed.get(), {}, on_checkpoint);

  std::string log;
  for (const auto& e : result.log) log += log_entry_json_line(e) + "\n";
  write_text(out / "metrics.jsonl", log);
  write_text(out / "model.json", trained_to_json(result.state.model, result.state.dial).dump() + "\n");
  artifacts.emplace_back("metrics.jsonl");
  artifacts.emplace_back("model.json");

  const PresetValues pv = tc.regime_preset == RegimePreset::kCustom
                              ? PresetValues{cfg.alpha, cfg.delta, cfg.tau}
                              : preset_values(tc.regime_preset, cfg.intermediate_alpha);
  Manifest m{"train", config_file(common), cfg.seed, out, artifacts, json::object()};
  m.extra["preset"] = std::string(to_string(tc.regime_preset));
  m.extra["dial"] = {{"alpha", pv.alpha}, {"delta", pv.delta}, {"tau", pv.tau}};
  m.extra["trainer"] = trainer_config_to_json(tc);
  m.extra["data"] = {{"dir", data_dir}, {"partition_checksum", data.checksum}};
  m.extra["status"] = result.status == TrainStatus::kCompleted ? "completed" : "diverged";
  if (!rules_path.empty()) m.extra["rules"] = {{"path", rules_path}, {"watch", watch}};
  write_manifest(m);
  if (result.status == TrainStatus::kDiverged) {
    std::cerr << "training diverged at step " << *result.diverged_at << "\n";
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_sweep(const Common& common, const std::string& data_dir, std::vector<double> alphas,
              std::vector<double> taus) {
  const RunConfig cfg = config_with_seed(common);
  if (alphas.empty()) alphas = cfg.sweep_alphas;
  if (taus.empty()) taus = cfg.sweep_taus;
  if (alphas.empty() || taus.empty()) throw Error(ErrorKind::kInvalidInput, "sweep grid is empty");
  for (double a : alphas)
    if (!(a >= 0.0) || !std::isfinite(a)) throw Error(ErrorKind::kInvalidInput, "alphas must be non-negative");
  for (double t : taus)
    if (!(t > 0.0) || !std::isfinite(t)) throw Error(ErrorKind::kInvalidInput, "taus must be positive");
  const fs::path out = resolve_out_dir(common.out);
  const LoadedData data = load_data(data_dir);
  const std::size_t blocks = data.bundle.partition.block_count();
  const TrainingData td{&data.bundle.partition, &data.bundle.embeddings, data.dataset.samples, data.checksum};
  const double delta_target =
      cfg.preset == RegimePreset::kCustom ? cfg.delta : preset_values(cfg.preset, cfg.intermediate_alpha).delta;

  std::vector<std::pair<double, double>> grid;
  std::set<std::pair<double, double>> seen;
  for (double a : alphas)
    for (double t : taus) {
      if (!seen.insert({a, t}).second) {
        std::cerr << "warning: duplicate grid point alpha=" << num(a) << " tau=" << num(t) << " skipped\n";
        continue;
      }
      grid.emplace_back(a, t);
    }

  std::string csv =
      "alpha,tau,status,delta_measured_min,delta_measured_mean,entropy_mean,fidelity_mean,off_block_mass,"
      "off_block_groups_zero,kkt_violations\n";
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto [a, t] = grid[g];
    TrainerConfig tc = cfg.trainer;
    tc.seed = Rng::derive_seed(stream_seed(cfg.seed, Stream::kSweep), g);
    tc.dial = uniform_dial(cfg.heads, blocks, a, t, delta_target, cfg.beta);
    tc.checkpoint_every = tc.steps == 0 ? 1 : tc.steps;
    const auto r = train(tc, td);
    csv += num(a) + "," + num(t) + ",";
    if (r.status == TrainStatus::kDiverged) {
      csv += "diverged,,,,,,,\n";
      continue;
    }
    const auto& m = std::get<MetricsRecord>(r.log.back());
    const auto eval = td.samples.first(std::min(tc.eval_samples, td.samples.size()));
    const auto margins = home_margins(r.state.model, eval, data.bundle.partition, data.bundle.embeddings,
                                      r.state.dial.head_home);
    csv += "ok," + num(margins.min_margin) + "," + num(margins.mean_margin) + "," + num(m.entropy_mean) + "," +
           num(m.fidelity_mean) + "," + num(m.off_block_mass) + "," +
           (m.off_block_zero_groups == m.off_block_groups ? "true" : "false") + "," +
           std::to_string(m.kkt_violations) + "\n";
  }
  write_text(out / "sweep.csv", csv);
  Manifest m{"sweep", config_file(common), cfg.seed, out, {"sweep.csv"}, json::object()};
  m.extra["grid"] = {{"alphas", alphas}, {"taus", taus}};
  m.extra["data"] = {{"dir", data_dir}, {"partition_checksum", data.checksum}};
  write_manifest(m);
  return kExitOk;
}

int cmd_check_bounds(const Common& common, const std::string& model_path, const std::string& data_dir,
                     std::optional<double> delta_flag) {
  const RunConfig cfg = config_with_seed(common);
  const double premise = delta_flag.value_or(cfg.premise_delta);
  const fs::path out = resolve_out_dir(common.out);
  const LoadedData data = load_data(data_dir);
  const Trained trained = load_trained(model_path);
  const auto rows =
      evaluate_bounds(trained.model, data.dataset.samples, data.bundle.partition, data.bundle.embeddings, premise);

  std::string csv = bounds_csv_header() + "\n";
  std::size_t premise_rows = 0, step4_fail = 0, cor1_fail = 0, cor1_tight_fail = 0, cor2_fail = 0, block_fail = 0;
  for (const auto& r : rows) {
    csv += bounds_csv_line(r) + "\n";
    if (!r.premise) continue;
    ++premise_rows;
    step4_fail += !r.step4_per_key_pass;
    cor1_fail += !r.cor1_pass;
    cor1_tight_fail += !r.cor1_tight_pass;
    cor2_fail += !r.cor2_pass;
    block_fail += !r.step4_block_sum_pass;
  }
  write_text(out / "bounds.csv", csv);
  const json summary{{"rows", rows.size()},
                     {"premise_delta", premise},
                     {"premise_rows", premise_rows},
                     {"step4_per_key_failures", step4_fail},
                     {"step4_block_sum_failures", block_fail},
                     {"cor1_failures", cor1_fail},
                     {"cor1_tight_failures", cor1_tight_fail},
                     {"cor2_failures", cor2_fail}};
  write_text(out / "bounds_summary.json", summary.dump(2) + "\n");
  Manifest m{"check-bounds", config_file(common), cfg.seed, out, {"bounds.csv", "bounds_summary.json"},
             json::object()};
  m.extra["model"] = {{"path", model_path}, {"sha256", file_sha256(model_path)}};
  m.extra["data"] = {{"dir", data_dir}, {"partition_checksum", data.checksum}};
  write_manifest(m);
  return step4_fail == 0 ? kExitOk : kExitCheckFailed;
}

int cmd_verify(const Common& common, const std::string& model_path, const std::string& data_dir,
               const std::string& rules_path, std::optional<double> target_flag) {
  const RunConfig cfg = config_with_seed(common);
  const double target = target_flag.value_or(cfg.target_rate);
  if (rules_path.empty()) throw Error(ErrorKind::kInvalidInput, "verify needs --rules");
  const auto rules = load_rules(rules_path);
  const fs::path out = resolve_out_dir(common.out);
  const LoadedData data = load_data(data_dir);
  const Trained trained = load_trained(model_path);

  std::vector<Verdict> verdicts;
  std::string lines;
  for (std::size_t i = 0; i < data.dataset.samples.size(); ++i) {
    const auto& s = data.dataset.samples[i];
    const auto trace =
        attend(trained.model, embed(s.tokens, data.bundle.embeddings), s.query_index, SelfMask::kExcludeSelf);
    verdicts.push_back(check_output(i, s, predicted_token(trace), trace, rules, data.bundle.partition));
    lines += verdict_to_json(verdicts.back()).dump() + "\n";
  }
  const auto report = compliance_report(verdicts, data.bundle.partition, 0, verdicts.size());
  bool ok = true;
  for (const auto& [id, c] : report.per_rule) ok = ok && c.rate >= target;
  json doc = report_to_json(report);
  doc["target_rate"] = target;
  doc["pass"] = ok;
  write_text(out / "verdicts.jsonl", lines);
  write_text(out / "compliance.json", doc.dump(2) + "\n");
  Manifest m{"verify", config_file(common), cfg.seed, out, {"compliance.json", "verdicts.jsonl"}, json::object()};
  m.extra["model"] = {{"path", model_path}, {"sha256", file_sha256(model_path)}};
  m.extra["rules"] = {{"path", rules_path}, {"sha256", file_sha256(rules_path)}};
  write_manifest(m);
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_compile_rules(const Common& common, const std::string& rules_path, const std::string& data_dir,
                      const std::string& model_path, const std::string& preset_flag, const std::string& store_path) {
  const RunConfig cfg = config_with_seed(common);
  std::optional<RegimePreset> preset;
  if (!preset_flag.empty()) {
    preset = parse_preset(preset_flag);
    if (!preset) throw Error(ErrorKind::kInvalidInput, "unknown preset '" + preset_flag + "'");
  }
  const auto rules = load_rules(rules_path);
  const fs::path out = resolve_out_dir(common.out);
  const LoadedData data = load_data(data_dir);
  const std::size_t blocks = data.bundle.partition.block_count();

  DialSettings dial = dial_for(cfg, blocks, preset);
  Calibration cal;
  cal.tau = dial.tau;
  if (!model_path.empty()) {
    const Trained trained = load_trained(model_path);
    if (trained.dial) dial = *trained.dial;
    cal.tau = trained.model.tau;
    const auto batch =
        std::span<const PointerSample>(data.dataset.samples)
            .first(std::min(cfg.trainer.eval_samples, data.dataset.samples.size()));
    cal.c_prime = c_prime_per_block(trained.model, batch, data.bundle);
  } else {
    // Without a model the gradient scale C is taken as 1.
    for (std::size_t b = 0; b < blocks; ++b)
      cal.c_prime.push_back(static_cast<double>(data.bundle.partition.tokens_of(b).size()) *
                            block_cov_norm(data.bundle.partition, data.bundle.embeddings, b));
  }
  const CompilePolicy policy = compile_policy(cfg, dial, preset);

  std::optional<RuleStore> store;
  if (!store_path.empty()) store.emplace(RuleStore::open(store_path));
  json constraints = json::array();
  for (const auto& r : rules) {
    Rule stored = r;
    if (store) {
      try {
        const Rule current = store->get(r.id);
        stored = current.same_statement(r) ? current : store->put(r, current.version);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNotFound) throw;
        stored = store->put(r);
      }
    }
    constraints.push_back(constraint_to_json(compile(stored, data.bundle.partition, cal, policy)));
  }
  write_text(out / "constraints.json", constraints.dump(2) + "\n");
  Manifest m{"compile-rules", config_file(common), cfg.seed, out, {"constraints.json"}, json::object()};
  m.extra["rules"] = {{"path", rules_path}, {"sha256", file_sha256(rules_path)}};
  m.extra["calibration"] = {{"c_prime", cal.c_prime}, {"tau", cal.tau}};
  write_manifest(m);
  return kExitOk;
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  toml::table root;
  try {
    root = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line << ", column " << e.source().begin.column;
    config_error(origin, msg.str());
  }
  // A misspelled key would otherwise silently fall back to its default.
  static const std::map<std::string, std::set<std::string>> known = {
      {"partition", {"blocks", "anchors_per_block", "fillers_per_block", "dim_per_block", "cue_affinity"}},
      {"task", {"sequence_length", "blocks_present", "redundancy", "distractors", "samples"}},
      {"model", {"heads", "key_dim", "value_dim", "init_scale", "tie_query_key"}},
      {"train",
       {"preset", "step_size", "steps", "batch_size", "checkpoint_every", "eval_samples", "beta",
        "intermediate_alpha", "alpha", "tau", "delta"}},
      {"sweep", {"alphas", "taus"}},
      {"bounds", {"delta"}},
      {"verify", {"target_rate"}},
      {"compile", {"safety_factor", "floor"}},
  };
  for (const auto& [key, node] : root) {
    const std::string name(key.str());
    if (name == "seed") continue;
    const auto it = known.find(name);
    if (it == known.end()) config_error(origin, "unknown key or table '" + name + "'");
    if (const auto* tbl = node.as_table())
      for (const auto& [sub, unused] : *tbl)
        if (!it->second.count(std::string(sub.str())))
          config_error(origin, "unknown key '" + std::string(sub.str()) + "' in [" + name + "]");
  }

  RunConfig c;
  c.seed = read_number<std::uint64_t>(root, "root", "seed", 0, origin);

  if (const auto* t = sub_table(root, "partition", origin)) {
    c.has_partition = true;
    c.partition.blocks = read_number<std::size_t>(*t, "partition", "blocks", 4, origin);
    c.partition.anchors_per_block = read_number<std::size_t>(*t, "partition", "anchors_per_block", 1, origin);
    c.partition.fillers_per_block = read_number<std::size_t>(*t, "partition", "fillers_per_block", 2, origin);
    c.partition.dim_per_block = read_number<std::size_t>(*t, "partition", "dim_per_block", 8, origin);
    c.partition.cue_affinity = read_number<double>(*t, "partition", "cue_affinity", 0.5, origin);
  }
  if (const auto* t = sub_table(root, "task", origin)) {
    c.has_task = true;
    c.task.sequence_length = read_number<std::size_t>(*t, "task", "sequence_length", 3, origin);
    c.task.blocks_present = read_number<std::size_t>(*t, "task", "blocks_present", 2, origin);
    c.task.redundancy = read_number<std::size_t>(*t, "task", "redundancy", 1, origin);
    c.task.distractors = read_number<std::size_t>(*t, "task", "distractors", 0, origin);
    c.task.samples = read_number<std::size_t>(*t, "task", "samples", 2000, origin);
  }
  if (const auto* t = sub_table(root, "model", origin)) {
    c.heads = read_number<std::size_t>(*t, "model", "heads", c.heads, origin);
    c.trainer.key_dim = read_number<std::size_t>(*t, "model", "key_dim", c.trainer.key_dim, origin);
    c.trainer.value_dim = read_number<std::size_t>(*t, "model", "value_dim", c.trainer.value_dim, origin);
    c.trainer.init_scale = read_number<double>(*t, "model", "init_scale", c.trainer.init_scale, origin);
    c.trainer.tie_query_key = read_bool(*t, "model", "tie_query_key", c.trainer.tie_query_key, origin);
  }
  if (const auto* t = sub_table(root, "train", origin)) {
    if (const auto node = (*t)["preset"]) {
      const auto name = node.value<std::string>();
      const auto p = name ? parse_preset(*name) : std::nullopt;
      if (!p) config_error(origin, "[train] preset must be localist, distributed, intermediate or custom");
      c.preset = *p;
    }
    c.trainer.step_size = read_number<double>(*t, "train", "step_size", c.trainer.step_size, origin);
    c.trainer.steps = read_number<std::size_t>(*t, "train", "steps", c.trainer.steps, origin);
    c.trainer.batch_size = read_number<std::size_t>(*t, "train", "batch_size", c.trainer.batch_size, origin);
    c.trainer.checkpoint_every =
        read_number<std::size_t>(*t, "train", "checkpoint_every", c.trainer.checkpoint_every, origin);
    c.trainer.eval_samples = read_number<std::size_t>(*t, "train", "eval_samples", c.trainer.eval_samples, origin);
    c.beta = read_number<double>(*t, "train", "beta", c.beta, origin);
    c.intermediate_alpha = read_number<double>(*t, "train", "intermediate_alpha", c.intermediate_alpha, origin);
    c.alpha = read_number<double>(*t, "train", "alpha", c.alpha, origin);
    c.tau = read_number<double>(*t, "train", "tau", c.tau, origin);
    c.delta = read_number<double>(*t, "train", "delta", c.delta, origin);
  }
  if (const auto* t = sub_table(root, "sweep", origin)) {
    c.sweep_alphas = read_list(*t, "sweep", "alphas", origin);
    c.sweep_taus = read_list(*t, "sweep", "taus", origin);
  }
  if (const auto* t = sub_table(root, "bounds", origin))
    c.premise_delta = read_number<double>(*t, "bounds", "delta", c.premise_delta, origin);
  if (const auto* t = sub_table(root, "verify", origin))
    c.target_rate = read_number<double>(*t, "verify", "target_rate", c.target_rate, origin);
  if (const auto* t = sub_table(root, "compile", origin)) {
    c.safety_factor = read_number<double>(*t, "compile", "safety_factor", c.safety_factor, origin);
    if ((*t)["floor"]) c.floor = read_number<double>(*t, "compile", "floor", 0.0, origin);
  }
  if (c.heads == 0) config_error(origin, "[model] heads must be positive");
  try {
    c.trainer.validate();
  } catch (const Error& e) {
    config_error(origin, e.what());
  }
  return c;
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::kInvalidInput, "config " + path.string() + " does not exist");
  return parse_config(read_file(path), path.string());
}

DialSettings dial_for(const RunConfig& config, std::size_t blocks, std::optional<RegimePreset> preset) {
  const RegimePreset p = preset.value_or(config.preset);
  if (p == RegimePreset::kCustom)
    return uniform_dial(config.heads, blocks, config.alpha, config.tau, config.delta, config.beta);
  return make_dial(p, config.heads, blocks, config.intermediate_alpha, config.beta);
}

std::uint64_t stream_seed(std::uint64_t seed, Stream stream) {
  return Rng::derive_seed(seed, static_cast<std::uint64_t>(stream));
}

fs::path resolve_out_dir(const std::string& flag_value) {
  if (const char* env = std::getenv("LOCALIST_OUT"); env && *env) return fs::path(env);
  if (flag_value.empty()) throw Error(ErrorKind::kInvalidInput, "no output directory (--out or LOCALIST_OUT)");
  return fs::path(flag_value);
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Block-localized attention laboratory", "localist"};
  app.set_version_flag("--version", LOCALIST_VERSION);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", common.config_path, "TOML config file");
    if (needs_config) opt->required();
    sub->add_option("--out", common.out, "output directory (LOCALIST_OUT overrides)");
    sub->add_option("--seed", common.seed, "run seed (overrides the config)");
  };

  std::string data_dir, preset, rules, model, store;
  bool watch = false;
  std::vector<double> alphas, taus;
  std::optional<double> delta, target;

  auto* gen = app.add_subcommand("gen", "generate a partition and dataset");
  add_common(gen, true);

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, true);
  train_cmd->add_option("--data", data_dir, "directory written by gen")->required();
  train_cmd->add_option("--preset", preset, "localist, distributed, intermediate or custom");
  train_cmd->add_option("--rules", rules, "rules file compiled into the dial");
  train_cmd->add_flag("--watch-rules", watch, "re-read the rules file at every checkpoint");

  auto* sweep = app.add_subcommand("sweep", "train over an alpha x tau grid");
  add_common(sweep, true);
  sweep->add_option("--data", data_dir, "directory written by gen")->required();
  sweep->add_option("--alphas", alphas, "comma-separated alphas")->delimiter(',');
  sweep->add_option("--taus", taus, "comma-separated temperatures")->delimiter(',');

  auto* bounds = app.add_subcommand("check-bounds", "evaluate concentration bounds per query and head");
  add_common(bounds, false);
  bounds->add_option("--model", model, "trained model or checkpoint")->required();
  bounds->add_option("--data", data_dir, "directory written by gen")->required();
  bounds->add_option("--delta", delta, "margin premise");

  auto* verify = app.add_subcommand("verify", "check model outputs against rules");
  add_common(verify, false);
  verify->add_option("--model", model, "trained model or checkpoint")->required();
  verify->add_option("--data", data_dir, "directory written by gen")->required();
  verify->add_option("--rules", rules, "rules file");
  verify->add_option("--target-rate", target, "minimum compliance per rule");

  auto* comp = app.add_subcommand("compile-rules", "compile rules into dial updates");
  add_common(comp, false);
  comp->add_option("--rules", rules, "rules file")->required();
  comp->add_option("--data", data_dir, "directory written by gen")->required();
  comp->add_option("--model", model, "model used to estimate C'");
  comp->add_option("--preset", preset, "preset supplying the alpha floor");
  comp->add_option("--store", store, "rule store journal to record the rules in");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInputError;
  }

  try {
    if (*gen) return cmd_gen(common);
    if (*train_cmd) return cmd_train(common, data_dir, preset, rules, watch);
    if (*sweep) return cmd_sweep(common, data_dir, alphas, taus);
    if (*bounds) return cmd_check_bounds(common, model, data_dir, delta);
    if (*verify) return cmd_verify(common, model, data_dir, rules, target);
    if (*comp) return cmd_compile_rules(common, rules, data_dir, model, preset, store);
  } catch (const Error& e) {
    std::cerr << "localist: " << e.what() << "\n";
    return e.kind() == ErrorKind::kNumericFailure ? kExitDiverged : kExitInputError;
  } catch (const std::exception& e) {
    std::cerr << "localist: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitInputError;
}

}  // namespace localist::cli
