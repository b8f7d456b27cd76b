#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mimmx/config.hpp"
#include "mimmx/data.hpp"
#include "mimmx/dependence.hpp"
#include "mimmx/dls.hpp"
#include "mimmx/network.hpp"

namespace mimmx {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Phase { main, mine };

struct MetricsRecord {
  std::size_t step = 0;  // batches consumed before this one
  int epoch = 0;
  Phase phase = Phase::main;
  std::vector<double> task_losses;
  std::vector<double> gammas;
  double penalty = 0.0;  // dependence estimate on this batch
  double total = 0.0;
  std::vector<double> caw_weights;
  double learning_rate = 0.0;
  double mine_learning_rate = 0.0;

  nlohmann::json to_json() const;
};

/// Everything needed to continue a run bit-exactly.
struct TrainState {
  ExperimentConfig config;                   // as given by the user
  std::vector<FactorSpec> factors;           // effective factors (projected for mimm)
  std::string config_hash;
  MimmxModel model;
  std::optional<MineState> mine;
  Adam main_optimizer;
  ScheduleState schedule;
  std::size_t step = 0;
  std::size_t main_steps = 0;
  std::size_t mine_steps = 0;
  int epoch = 0;
  std::size_t batch_in_epoch = 0;

  /// Fresh state for `config`; mimm runs are narrowed to their target factor.
  static TrainState create(const ExperimentConfig& config);
  bool finished() const { return epoch >= config.hyper.n_epoch; }
};

/// Effective factors used by the model for `config` (primary first).
std::vector<FactorSpec> effective_factors(const ExperimentConfig& config);

/// Splits narrowed to the factors the method trains on.
SplitBundle effective_splits(const ExperimentConfig& config, const SplitBundle& splits);

/// Batch index lists of one epoch; a trailing singleton joins the batch before.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, int epoch);

/// Phase of batch `b` within an epoch: one main step opens every cycle of
/// n_b batches; variants without MINE only take main steps.
Phase phase_of(std::size_t batch_in_epoch, const ExperimentConfig& config);

struct StepResult {
  MetricsRecord record;
  LossBreakdown breakdown;
};

/// One update of encoder, heads, BN affine and CAW (MINE frozen).
StepResult main_step(TrainState& state, const DatasetManifest& train,
                     std::span<const std::size_t> batch);
/// One MINE ascent step (encoder frozen).
StepResult mine_step(TrainState& state, const DatasetManifest& train,
                     std::span<const std::size_t> batch);

struct TrainOptions {
  std::filesystem::path out_dir;                   // empty: nothing written
  std::optional<std::size_t> stop_after_step;      // stop once `step` reaches this
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  bool completed = false;
};

/// Runs (or continues) the alternating schedule until n_epoch epochs are
/// done or `stop_after_step` is reached. `splits` are the full splits;
/// rebalance and mimm narrowing are applied here.
TrainResult train(TrainState& state, const SplitBundle& splits, const TrainOptions& options = {});

/// Convenience: fresh state, full run.
std::pair<TrainState, TrainResult> train(const ExperimentConfig& config, const SplitBundle& splits,
                                         const TrainOptions& options = {});

/// MIMM against one spurious factor (1-based).
std::pair<TrainState, TrainResult> train_mimm_single(const ExperimentConfig& config,
                                                     const SplitBundle& splits, int target,
                                                     const TrainOptions& options = {});

/// The training split the method actually consumes (rebalanced if asked).
DatasetManifest training_split(const ExperimentConfig& config, const SplitBundle& splits);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Loads a checkpoint; when `expected` is given its hash must match.
TrainState resume(const std::filesystem::path& path,
                  const std::optional<ExperimentConfig>& expected = {});

void write_metrics(const std::vector<MetricsRecord>& metrics, const std::filesystem::path& path,
                   bool append = false);

}  // namespace mimmx
