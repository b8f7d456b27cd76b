#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mimmx {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown by load_config when the file parses but violates invariants.
class ValidationError : public ConfigError {
 public:
  explicit ValidationError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

enum class FactorRole { primary, spurious };

struct FactorSpec {
  std::string name;
  int cardinality = 2;
  FactorRole role = FactorRole::spurious;
  // Renderer attributes; `kind` selects the visual channel
  // (shape | intensity | stripes | corner).
  std::map<std::string, std::string> generator_params;

  std::string generator_kind() const;
  double param(const std::string& key, double fallback) const;

  bool operator==(const FactorSpec&) const = default;
};

enum class MethodKind { baseline, rebalance, dcor, mimm_single, mimmx };

struct MethodVariant {
  MethodKind kind = MethodKind::mimmx;
  // 1-based spurious factor index (z1..zN), only for mimm_single.
  std::optional<int> mimm_target;
  bool use_dls = true;
  bool use_caw = true;

  bool uses_mine() const { return kind == MethodKind::mimm_single || kind == MethodKind::mimmx; }
  bool operator==(const MethodVariant&) const = default;
};

struct Hyperparams {
  int subvector_dim = 64;
  int batch_size = 150;
  int n_b = 6;
  double lambda = 1.5;
  double alpha_y_initial = 0.3;
  double alpha_z = 0.8;
  double beta_y = 0.01;
  int n_epoch = 40;
  double learning_rate = 1e-3;
  double mine_learning_rate = 1e-3;
  double mine_ema_decay = 0.99;
  int mine_hidden = 128;
  // Let the dependence-penalty gradient reach f_Z as well as f_y.
  bool penalty_grad_to_fz = true;
  // Standardize MINE inputs per batch (see MineState).
  bool mine_standardize_inputs = true;
  double bn_momentum = 0.1;
  int probe_steps = 200;
  double probe_learning_rate = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const Hyperparams&) const = default;
};

enum class CorrelationMode { joint, per_factor };

struct CorrelationSpec {
  double skew = 0.9;
  // assignment[c][i]: majority class of spurious factor i for primary class c.
  std::vector<std::vector<int>> assignment;
  CorrelationMode mode = CorrelationMode::joint;

  bool operator==(const CorrelationSpec&) const = default;
};

struct ModelSpec {
  std::string encoder = "conv4";
  std::vector<int> channels = {8, 16, 32, 64};
  int image_size = 64;
  int image_channels = 1;

  bool operator==(const ModelSpec&) const = default;
};

/// Sizes for the synthetic pools and derived splits.
struct DataSpec {
  int train_pool_per_cell = 1400;
  int eval_pool_per_cell = 500;
  int per_class_budget = 1500;
  int val_size = 800;
  int inverted_size = 800;
  int balanced_size = 800;
  double noise_sigma = 0.2;

  bool operator==(const DataSpec&) const = default;
};

struct PathSpec {
  std::string out = "experiment";
  // Optional externally supplied manifests; empty means "generate".
  std::string train_manifest;
  std::string eval_manifest;

  bool operator==(const PathSpec&) const = default;
};

struct ExperimentConfig {
  std::vector<FactorSpec> factors;
  CorrelationSpec correlation;
  ModelSpec model;
  MethodVariant method;
  Hyperparams hyper;
  DataSpec data;
  PathSpec paths;

  const FactorSpec& primary() const;
  std::vector<FactorSpec> spurious() const;
  /// Primary factor first, then spurious factors in declaration order.
  std::vector<FactorSpec> ordered_factors() const;
  std::size_t num_spurious() const;

  bool operator==(const ExperimentConfig&) const = default;
};

std::string to_string(MethodKind kind);
MethodKind parse_method_kind(const std::string& text);
std::string to_string(CorrelationMode mode);

/// Every violated invariant; empty when valid.
std::vector<std::string> validate(const ExperimentConfig& config);

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);
void write_config(const ExperimentConfig& config, const std::filesystem::path& path);

/// Hash of the canonical serialization, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Fills omitted defaults (assignment) in place.
void apply_defaults(ExperimentConfig& config);

}  // namespace mimmx
