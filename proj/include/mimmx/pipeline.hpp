#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mimmx/config.hpp"
#include "mimmx/data.hpp"
#include "mimmx/evaluation.hpp"

namespace mimmx {

/// Provenance record written once into every artifact directory.
struct RunManifest {
  std::string command;
  std::string config_hash;
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started_at;
  std::string finished_at;

  nlohmann::json to_json() const;
};

inline constexpr const char* kRunManifestName = "run_manifest.json";

std::string utc_timestamp();
/// Writes `<dir>/run_manifest.json`, replacing any previous one.
void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& dir);

/// Named child seeds of the experiment seed.
nlohmann::json seed_table(std::uint64_t seed);

/// Synthetic train pool with the configured skew.
DatasetManifest make_training_set(const ExperimentConfig& config);
/// Synthetic eval pool and the three evaluation splits.
SplitBundle make_eval_splits(const ExperimentConfig& config);
/// Train split plus evaluation splits: generated, or loaded from the
/// manifests named in the config.
SplitBundle prepare_splits(const ExperimentConfig& config);

/// One trained model in the comparison matrix.
struct RunSpec {
  std::string name;  // directory name under runs/
  ExperimentConfig config;
};

/// Standard switches of a method: DLS and CAW only for rebalance and
/// mimmx (which keep the config's settings).
MethodVariant standard_variant(MethodKind kind, const ExperimentConfig& config,
                               std::optional<int> mimm_target = {});

/// baseline, rebalance, dcor, one mimm per spurious factor, mimmx.
std::vector<RunSpec> comparison_runs(const ExperimentConfig& config);

struct ExperimentResult {
  std::map<std::string, EvalReport> reports;   // by run name
  std::map<std::string, std::string> failures; // run name -> error
  std::vector<std::string> order;              // run names in table order
};

/// Accuracy table: rows = runs, columns = task x split.
nlohmann::json accuracy_table_json(const ExperimentResult& result);
std::string accuracy_table_text(const ExperimentResult& result);
/// Probe table: rows = runs, columns = source -> target.
nlohmann::json probe_table_json(const ExperimentResult& result);
std::string probe_table_text(const ExperimentResult& result);

struct ExperimentOptions {
  bool verbose = false;
};

/// Full comparison on shared splits under `config.paths.out`:
/// data/, runs/<name>/, reports/. A failing run is recorded and the others
/// still complete.
ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentOptions& options = {});

}  // namespace mimmx
