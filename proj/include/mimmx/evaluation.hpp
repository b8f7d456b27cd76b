#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mimmx/data.hpp"
#include "mimmx/trainer.hpp"

namespace mimmx {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string> kSplitNames = {"val", "inverted", "balanced"};

struct EvalReport {
  std::vector<std::string> tasks;                                       // primary first
  std::map<std::string, std::map<std::string, double>> accuracy;        // [task][split], percent
  double gap_y = 0.0;                                                   // val - inverted for y
  std::map<std::string, std::map<std::string, double>> probe;           // [source][target], percent
  std::map<std::string, double> chance;                                 // [task]
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Percentage of `predicted[i] == labels[i]`.
double accuracy_percent(std::span<const int> predicted, std::span<const int> labels);

/// Labels of task `task` (0 = primary, i = z_i) for every record.
std::vector<int> task_labels(const DatasetManifest& m, std::size_t task);

/// Eval-mode features of every record, computed in chunks.
FeatureBundle extract_features(const MimmxModel& model, const DatasetManifest& m);

/// Per-task per-split accuracies and the shortcut gap. `splits` are the
/// full splits; mimm models see their projected view.
EvalReport evaluate(const TrainState& state, const SplitBundle& splits);

struct ProbeOptions {
  int steps = 200;
  double learning_rate = 0.05;
  double train_fraction = 0.7;
  bool fit_on_train_split = false;  // fit on the skewed train split, test on all of balanced
};

struct ProbeResult {
  double accuracy = 0.0;  // percent on the held-out part
  double chance = 0.0;
  std::size_t fit_size = 0;
  std::size_t test_size = 0;
};

/// Affine + log-softmax probe on standardized features, fit with full-batch
/// Adam and tested on separate rows.
ProbeResult fit_probe(const Tensor& fit_x, std::span<const int> fit_y, const Tensor& test_x,
                      std::span<const int> test_y, int classes, const ProbeOptions& options);

/// Seeded split of `x` into fit and test rows, then fit_probe.
ProbeResult probe_features(const Tensor& x, std::span<const int> labels, int classes,
                           std::uint64_t seed, const ProbeOptions& options = {});

/// Source subvector `source` (0 = f_y, i = f_{z_i}) predicting task `target`.
ProbeResult probe(const TrainState& state, std::size_t source, std::size_t target,
                  const SplitBundle& splits, std::uint64_t seed, const ProbeOptions& options = {});

/// All cross probes (source != target) into report.probe.
void probe_all(const TrainState& state, const SplitBundle& splits, EvalReport& report,
               const ProbeOptions& options = {});

std::string subvector_name(const TrainState& state, std::size_t source);

/// Subvector features plus every label of a split, in manifest order.
struct EmbeddingTable {
  std::vector<std::string> ids;
  std::vector<std::string> columns;  // e0..e{d-1}, then factor names
  Tensor values;                     // [n, d + 1 + N]
  std::size_t feature_dim = 0;
  nlohmann::json metadata = nlohmann::json::object();

  Tensor features() const { return values.slice_cols(0, feature_dim); }
  std::vector<int> labels(const std::string& factor) const;
};

EmbeddingTable embeddings(const TrainState& state, const DatasetManifest& split, std::size_t source);
/// Writes `<stem>.csv` and a `<stem>.json` sidecar.
void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& csv_path);
EmbeddingTable load_embeddings(const std::filesystem::path& csv_path);
void export_embeddings(const TrainState& state, const DatasetManifest& split, std::size_t source,
                       const std::filesystem::path& csv_path);

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
double silhouette(const Tensor& x, std::span<const int> labels);

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 500;
  double learning_rate = 200.0;
  std::uint64_t seed = 0;
};

/// Exact t-SNE to 2-d.
Tensor tsne(const Tensor& x, const TsneOptions& options);

/// 2-d scatter colored by `labels`, written as binary PPM.
void write_scatter_ppm(const Tensor& points, std::span<const int> labels,
                       const std::filesystem::path& path, int size = 512);

}  // namespace mimmx
