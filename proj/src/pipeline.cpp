#include "mimmx/pipeline.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "mimmx/trainer.hpp"

namespace mimmx {

namespace fs = std::filesystem;
using nlohmann::json;

json RunManifest::to_json() const {
  return {{"command", command},   {"config_hash", config_hash}, {"seeds", seeds},
          {"inputs", inputs},     {"outputs", outputs},         {"started_at", started_at},
          {"finished_at", finished_at}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const RunManifest& manifest, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / kRunManifestName);
  if (!out) throw std::runtime_error("cannot write run manifest in " + dir.string());
  out << manifest.to_json().dump(2) << '\n';
}

json seed_table(std::uint64_t seed) {
  json j = {{"seed", seed}};
  for (const char* label : {"data_train", "data_eval", "init", "mine_init", "shuffle", "rebalance", "probe"}) {
    j[label] = derive_seed(seed, label);
  }
  return j;
}

DatasetManifest make_training_set(const ExperimentConfig& c) {
  const std::uint64_t seed = derive_seed(c.hyper.seed, "data_train");
  const DatasetManifest pool =
      generate_synthetic(c.ordered_factors(), static_cast<std::size_t>(c.data.train_pool_per_cell),
                         static_cast<std::size_t>(c.model.image_size), c.data.noise_sigma, seed, "t");
  return induce_correlation(pool, c.correlation, static_cast<std::size_t>(c.data.per_class_budget),
                            derive_seed(seed, "induce"));
}

namespace {

SplitSizes split_sizes(const ExperimentConfig& c) {
  return {static_cast<std::size_t>(c.data.val_size), static_cast<std::size_t>(c.data.inverted_size),
          static_cast<std::size_t>(c.data.balanced_size)};
}

}  // namespace

SplitBundle make_eval_splits(const ExperimentConfig& c) {
  const std::uint64_t seed = derive_seed(c.hyper.seed, "data_eval");
  const DatasetManifest pool =
      generate_synthetic(c.ordered_factors(), static_cast<std::size_t>(c.data.eval_pool_per_cell),
                         static_cast<std::size_t>(c.model.image_size), c.data.noise_sigma, seed, "e");
  return build_eval_splits(pool, c.correlation, split_sizes(c), derive_seed(seed, "splits"));
}

SplitBundle prepare_splits(const ExperimentConfig& c) {
  const auto factors = c.ordered_factors();
  SplitBundle b;
  if (!c.paths.eval_manifest.empty()) {
    const DatasetManifest pool = load_manifest(c.paths.eval_manifest, factors);
    b = build_eval_splits(pool, c.correlation, split_sizes(c), derive_seed(c.hyper.seed, "data_eval"));
  } else {
    b = make_eval_splits(c);
  }
  // An external training manifest is used as the training set as-is.
  b.train = c.paths.train_manifest.empty() ? make_training_set(c) : load_manifest(c.paths.train_manifest, factors);
  return b;
}

MethodVariant standard_variant(MethodKind kind, const ExperimentConfig& config, std::optional<int> mimm_target) {
  const bool full = kind == MethodKind::rebalance || kind == MethodKind::mimmx;
  return {kind, kind == MethodKind::mimm_single ? mimm_target : std::nullopt, full && config.method.use_dls,
          full && config.method.use_caw};
}

std::vector<RunSpec> comparison_runs(const ExperimentConfig& config) {
  auto variant = [&](MethodKind kind, std::optional<int> target = {}) {
    ExperimentConfig c = config;
    c.method = standard_variant(kind, config, target);
    return c;
  };
  std::vector<RunSpec> runs;
  runs.push_back({"baseline", variant(MethodKind::baseline)});
  runs.push_back({"rebalance", variant(MethodKind::rebalance)});
  runs.push_back({"dcor", variant(MethodKind::dcor)});
  const auto spurious = config.spurious();
  for (std::size_t i = 0; i < spurious.size(); ++i) {
    runs.push_back({"mimm_" + spurious[i].name, variant(MethodKind::mimm_single, static_cast<int>(i + 1))});
  }
  runs.push_back({"mimmx", variant(MethodKind::mimmx)});
  return runs;
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::vector<std::string> all_tasks(const ExperimentResult& r) {
  std::vector<std::string> tasks;
  for (const auto& name : r.order) {
    auto it = r.reports.find(name);
    if (it == r.reports.end()) continue;
    for (const auto& t : it->second.tasks) {
      if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
    }
  }
  return tasks;
}

std::vector<std::pair<std::string, std::string>> all_probe_pairs(const ExperimentResult& r) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& name : r.order) {
    auto it = r.reports.find(name);
    if (it == r.reports.end()) continue;
    for (const auto& [src, row] : it->second.probe) {
      for (const auto& [dst, v] : row) {
        std::pair<std::string, std::string> p{src, dst};
        if (std::find(pairs.begin(), pairs.end(), p) == pairs.end()) pairs.push_back(p);
      }
    }
  }
  return pairs;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << v;
  return s.str();
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      } else {
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << row[c];
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace

json accuracy_table_json(const ExperimentResult& r) {
  json rows = json::array();
  const auto tasks = all_tasks(r);
  for (const auto& name : r.order) {
    json row = {{"method", name}};
    if (auto f = r.failures.find(name); f != r.failures.end()) {
      row["error"] = f->second;
    } else {
      const auto& rep = r.reports.at(name);
      row["accuracy"] = rep.accuracy;
      row["gap_y"] = rep.gap_y;
    }
    rows.push_back(row);
  }
  return {{"tasks", tasks}, {"splits", kSplitNames}, {"rows", rows}};
}

std::string accuracy_table_text(const ExperimentResult& r) {
  const auto tasks = all_tasks(r);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"method"};
  for (const auto& t : tasks)
    for (const auto& s : kSplitNames) head.push_back(t + ":" + s);
  head.push_back("gap_y");
  rows.push_back(head);
  for (const auto& name : r.order) {
    std::vector<std::string> row{name};
    auto it = r.reports.find(name);
    for (const auto& t : tasks) {
      for (const auto& s : kSplitNames) {
        if (it == r.reports.end() || !it->second.accuracy.count(t)) {
          row.push_back("-");
        } else {
          row.push_back(fmt(it->second.accuracy.at(t).at(s)));
        }
      }
    }
    row.push_back(it == r.reports.end() ? "failed" : fmt(it->second.gap_y));
    rows.push_back(row);
  }
  return render(rows);
}

json probe_table_json(const ExperimentResult& r) {
  json rows = json::array();
  for (const auto& name : r.order) {
    auto it = r.reports.find(name);
    rows.push_back({{"method", name}, {"probe", it == r.reports.end() ? json(nullptr) : json(it->second.probe)}});
  }
  return {{"rows", rows}};
}

std::string probe_table_text(const ExperimentResult& r) {
  const auto pairs = all_probe_pairs(r);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"method"};
  for (const auto& [s, t] : pairs) head.push_back(s + "->" + t);
  rows.push_back(head);
  for (const auto& name : r.order) {
    std::vector<std::string> row{name};
    auto it = r.reports.find(name);
    for (const auto& [s, t] : pairs) {
      if (it == r.reports.end() || !it->second.probe.count(s) || !it->second.probe.at(s).count(t)) {
        row.push_back("-");
      } else {
        row.push_back(fmt(it->second.probe.at(s).at(t)));
      }
    }
    rows.push_back(row);
  }
  return render(rows);
}

// ---------------------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentOptions& options) {
  if (auto v = validate(config); !v.empty()) throw ValidationError(std::move(v));
  const fs::path root = config.paths.out;
  const fs::path data_dir = root / "data";
  const std::string started = utc_timestamp();

  const SplitBundle splits = prepare_splits(config);
  write_splits(splits, data_dir);
  write_config(config, root / "config.yaml");
  write_run_manifest({"run_experiment:data", config_hash(config), seed_table(config.hyper.seed),
                      {config.paths.train_manifest, config.paths.eval_manifest},
                      {"train.csv", "val.csv", "inverted.csv", "balanced.csv"}, started, utc_timestamp()},
                     data_dir);

  ExperimentResult result;
  ProbeOptions probe_opts;
  probe_opts.steps = config.hyper.probe_steps;
  probe_opts.learning_rate = config.hyper.probe_learning_rate;
  for (const auto& run : comparison_runs(config)) {
    result.order.push_back(run.name);
    const fs::path dir = root / "runs" / run.name;
    const std::string run_started = utc_timestamp();
    try {
      if (options.verbose) std::cerr << "training " << run.name << '\n';
      fs::create_directories(dir);
      write_config(run.config, dir / "config.yaml");
      auto [state, trained] = train(run.config, splits, {dir, std::nullopt, {}});
      EvalReport report = evaluate(state, splits);
      probe_all(state, splits, report, probe_opts);
      std::ofstream(dir / "eval.json") << report.to_json().dump(2) << '\n';
      result.reports.emplace(run.name, std::move(report));
      write_run_manifest({"run_experiment:train+evaluate " + run.name, state.config_hash,
                          seed_table(run.config.hyper.seed), {(data_dir / "train.csv").string()},
                          {"config.yaml", "checkpoint.bin", "metrics.jsonl", "eval.json"}, run_started,
                          utc_timestamp()},
                         dir);
    } catch (const std::exception& e) {
      result.failures[run.name] = e.what();
      std::ofstream(dir / "error.json") << json{{"error", e.what()}, {"run", run.name}}.dump(2) << '\n';
      write_run_manifest({"run_experiment:train+evaluate " + run.name, config_hash(run.config),
                          seed_table(run.config.hyper.seed), {(data_dir / "train.csv").string()},
                          {"error.json"}, run_started, utc_timestamp()},
                         dir);
    }
  }

  const fs::path reports = root / "reports";
  fs::create_directories(reports);
  std::ofstream(reports / "accuracy.json") << accuracy_table_json(result).dump(2) << '\n';
  std::ofstream(reports / "accuracy.txt") << accuracy_table_text(result);
  std::ofstream(reports / "probes.json") << probe_table_json(result).dump(2) << '\n';
  std::ofstream(reports / "probes.txt") << probe_table_text(result);
  write_run_manifest({"run_experiment:tables", config_hash(config), seed_table(config.hyper.seed),
                      {"runs/"}, {"accuracy.json", "accuracy.txt", "probes.json", "probes.txt"}, started,
                      utc_timestamp()},
                     reports);
  write_run_manifest({"run_experiment", config_hash(config), seed_table(config.hyper.seed),
                      {}, {"config.yaml", "data/", "runs/", "reports/"}, started, utc_timestamp()},
                     root);
  return result;
}

}  // namespace mimmx
