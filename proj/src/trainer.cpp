#include "mimmx/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace mimmx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* phase_name(Phase p) { return p == Phase::main ? "main" : "mine"; }

std::vector<int> labels_of(const DatasetManifest& m, std::span<const std::size_t> batch, int task) {
  std::vector<int> out;
  out.reserve(batch.size());
  for (std::size_t i : batch) {
    const auto& r = m.records[i];
    out.push_back(task == 0 ? r.y : r.z[static_cast<std::size_t>(task - 1)]);
  }
  return out;
}

double effective_lambda(const ExperimentConfig& c) {
  switch (c.method.kind) {
    case MethodKind::baseline:
    case MethodKind::rebalance:
      return 0.0;
    default:
      return c.hyper.lambda;
  }
}

}  // namespace

json MetricsRecord::to_json() const {
  return {{"step", step},
          {"epoch", epoch},
          {"phase", phase_name(phase)},
          {"task_losses", task_losses},
          {"gammas", gammas},
          {"penalty", penalty},
          {"total", total},
          {"caw_weights", caw_weights},
          {"learning_rate", learning_rate},
          {"mine_learning_rate", mine_learning_rate}};
}

std::vector<FactorSpec> effective_factors(const ExperimentConfig& config) {
  auto ordered = config.ordered_factors();
  if (config.method.kind == MethodKind::mimm_single) {
    const auto target = static_cast<std::size_t>(config.method.mimm_target.value_or(0));
    if (target < 1 || target >= ordered.size()) throw TrainingError("mimm target out of range");
    return {ordered[0], ordered[target]};
  }
  return ordered;
}

SplitBundle effective_splits(const ExperimentConfig& config, const SplitBundle& splits) {
  if (config.method.kind != MethodKind::mimm_single) return splits;
  const int t = config.method.mimm_target.value_or(0);
  return {project_to_factor(splits.train, t), project_to_factor(splits.val, t),
          project_to_factor(splits.inverted, t), project_to_factor(splits.balanced, t)};
}

TrainState TrainState::create(const ExperimentConfig& config) {
  if (auto v = validate(config); !v.empty()) throw ValidationError(std::move(v));
  const auto factors = effective_factors(config);
  const auto& h = config.hyper;
  TrainState s{config,
               factors,
               mimmx::config_hash(config),
               MimmxModel(config.model, factors, static_cast<std::size_t>(h.subvector_dim),
                          config.method.use_caw, h.bn_momentum, derive_seed(h.seed, "init")),
               std::nullopt,
               Adam{},
               ScheduleState{0, h.n_epoch, h.alpha_y_initial, h.beta_y, h.alpha_z}};
  if (config.method.uses_mine()) {
    const std::size_t d = static_cast<std::size_t>(h.subvector_dim);
    s.mine.emplace(d, d * (factors.size() - 1), static_cast<std::size_t>(h.mine_hidden),
                   h.mine_ema_decay, derive_seed(h.seed, "mine_init"), h.mine_standardize_inputs);
  }
  return s;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, int epoch) {
  Rng rng(derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
  const auto perm = permutation(n, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

Phase phase_of(std::size_t batch_in_epoch, const ExperimentConfig& config) {
  if (!config.method.uses_mine()) return Phase::main;
  return batch_in_epoch % static_cast<std::size_t>(config.hyper.n_b) == 0 ? Phase::main : Phase::mine;
}

DatasetManifest training_split(const ExperimentConfig& config, const SplitBundle& splits) {
  if (config.method.kind == MethodKind::rebalance) {
    return rebalance(splits.train, derive_seed(config.hyper.seed, "rebalance"));
  }
  return splits.train;
}

StepResult main_step(TrainState& state, const DatasetManifest& train, std::span<const std::size_t> batch) {
  const auto& cfg = state.config;
  auto& model = state.model;
  const std::size_t n_z = model.num_spurious();
  const Tensor images = gather_images(train, batch);

  auto params = model.params();
  zero_grads(params);

  const FeatureBundle f = encode(model, images, Mode::train);
  const Tensor logits_y = model.primary.logits(f.f_y);
  std::vector<ClassificationLoss> losses{cross_entropy(log_softmax(logits_y), labels_of(train, batch, 0))};
  SpuriousHead::Cache head_cache;
  const auto logits_z = model.spurious.logits(f.stacked_f_z, Mode::train, &head_cache);
  for (std::size_t i = 0; i < n_z; ++i) {
    losses.push_back(cross_entropy(log_softmax(logits_z[i]), labels_of(train, batch, static_cast<int>(i + 1))));
  }
  std::vector<double> task_losses;
  for (const auto& l : losses) task_losses.push_back(l.loss);

  // Dependence penalty and its input gradients.
  const double lambda = effective_lambda(cfg);
  double penalty = 0.0;
  Tensor g_pen_y, g_pen_z;
  if (cfg.method.uses_mine()) {
    auto g = mine_estimate_with_grad(f.f_y, f.stacked_f_z, *state.mine);
    penalty = g.estimate.value;
    g_pen_y = std::move(g.grad_x);
    g_pen_z = std::move(g.grad_z);
  } else if (cfg.method.kind == MethodKind::dcor) {
    auto g = dcor_with_grad(f.f_y, f.stacked_f_z);
    penalty = g.estimate.value;
    g_pen_y = std::move(g.grad_a);
    g_pen_z = std::move(g.grad_b);
  }

  std::vector<double> gamma(task_losses.size(), 1.0);
  for (double l : task_losses) {
    if (!std::isfinite(l)) throw TrainingError("non-finite task loss at step " + std::to_string(state.step));
  }
  if (cfg.method.use_dls) {
    state.schedule.epoch = state.epoch;
    gamma = gammas(task_losses, alpha_y(state.schedule), cfg.hyper.alpha_z);
  }
  if (!std::isfinite(penalty)) throw TrainingError("non-finite penalty at step " + std::to_string(state.step));
  StepResult out;
  out.breakdown = total_loss(task_losses, gamma, penalty, lambda);

  // Backward: gamma is a constant of this step.
  Tensor g_logits_y = losses[0].grad_logits;
  for (double& v : g_logits_y.values()) v *= gamma[0];
  Tensor g_fy = model.primary.backward(f.f_y, g_logits_y);
  std::vector<Tensor> g_logits_z;
  for (std::size_t i = 0; i < n_z; ++i) {
    g_logits_z.push_back(losses[i + 1].grad_logits);
    for (double& v : g_logits_z.back().values()) v *= gamma[i + 1];
  }
  Tensor g_fz = model.spurious.backward(g_logits_z, head_cache);
  if (lambda != 0.0 && !g_pen_y.empty()) {
    for (std::size_t k = 0; k < g_fy.size(); ++k) g_fy[k] += lambda * g_pen_y[k];
    if (cfg.hyper.penalty_grad_to_fz) {
      for (std::size_t k = 0; k < g_fz.size(); ++k) g_fz[k] += lambda * g_pen_z[k];
    }
  }
  FeatureBundle grad_bundle;
  grad_bundle.f_y = std::move(g_fy);
  for (std::size_t i = 0; i < n_z; ++i) {
    grad_bundle.f_z.push_back(g_fz.slice_cols(i * model.subvector_dim(), model.subvector_dim()));
  }
  model.encoder().backward(join(grad_bundle));
  state.main_optimizer.step(params, cfg.hyper.learning_rate);

  auto& r = out.record;
  r.step = state.step;
  r.epoch = state.epoch;
  r.phase = Phase::main;
  r.task_losses = task_losses;
  r.gammas = gamma;
  r.penalty = penalty;
  r.total = out.breakdown.total;
  r.caw_weights = model.spurious.weights();
  r.learning_rate = cfg.hyper.learning_rate;
  r.mine_learning_rate = cfg.method.uses_mine() ? cfg.hyper.mine_learning_rate : 0.0;
  ++state.main_steps;
  return out;
}

StepResult mine_step(TrainState& state, const DatasetManifest& train, std::span<const std::size_t> batch) {
  if (!state.mine) throw TrainingError("mine_step on a variant without MINE");
  const auto& cfg = state.config;
  const FeatureBundle f = encode(static_cast<const MimmxModel&>(state.model), gather_images(train, batch));
  StepResult out;
  const auto est = mine_update(f.f_y, f.stacked_f_z, *state.mine, cfg.hyper.mine_learning_rate);
  auto& r = out.record;
  r.step = state.step;
  r.epoch = state.epoch;
  r.phase = Phase::mine;
  r.penalty = est.value;
  r.total = est.value;
  r.caw_weights = state.model.spurious.weights();
  r.learning_rate = cfg.hyper.learning_rate;
  r.mine_learning_rate = cfg.hyper.mine_learning_rate;
  ++state.mine_steps;
  return out;
}

TrainResult train(TrainState& state, const SplitBundle& splits, const TrainOptions& options) {
  const auto& cfg = state.config;
  const SplitBundle narrowed = effective_splits(cfg, splits);
  const DatasetManifest train_set = training_split(cfg, narrowed);
  if (train_set.size() < 2) throw TrainingError("training split is empty");
  if (train_set.factors != state.factors) {
    throw TrainingError("training split factors do not match the config");
  }
  const auto shape = train_set.images->shape();
  if (shape.height != static_cast<std::size_t>(cfg.model.image_size) ||
      shape.width != static_cast<std::size_t>(cfg.model.image_size) ||
      shape.channels != static_cast<std::size_t>(cfg.model.image_channels)) {
    throw TrainingError("training images do not match the model's image size");
  }

  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
  const fs::path metrics_path = options.out_dir.empty() ? fs::path{} : options.out_dir / "metrics.jsonl";
  std::ofstream metrics_out;
  if (!metrics_path.empty()) {
    metrics_out.open(metrics_path, state.step == 0 ? std::ios::trunc : std::ios::app);
  }

  TrainResult result;
  const std::uint64_t shuffle_seed = derive_seed(cfg.hyper.seed, "shuffle");
  const auto bs = static_cast<std::size_t>(cfg.hyper.batch_size);
  while (!state.finished()) {
    const auto batches = epoch_batches(train_set.size(), bs, shuffle_seed, state.epoch);
    while (state.batch_in_epoch < batches.size()) {
      if (options.stop_after_step && state.step >= *options.stop_after_step) {
        if (!options.out_dir.empty()) save_checkpoint(state, options.out_dir / "checkpoint.bin");
        return result;
      }
      const auto& batch = batches[state.batch_in_epoch];
      StepResult step;
      try {
        step = phase_of(state.batch_in_epoch, cfg) == Phase::main ? main_step(state, train_set, batch)
                                                                   : mine_step(state, train_set, batch);
      } catch (const std::exception& e) {
        if (!options.out_dir.empty()) save_checkpoint(state, options.out_dir / "checkpoint.bin");
        throw TrainingError(std::string("training aborted: ") + e.what());
      }
      ++state.step;
      ++state.batch_in_epoch;
      if (metrics_out) metrics_out << step.record.to_json().dump() << '\n';
      if (options.on_record) options.on_record(step.record);
      result.metrics.push_back(std::move(step.record));
    }
    ++state.epoch;
    state.batch_in_epoch = 0;
  }
  state.schedule.epoch = state.epoch;
  result.completed = true;
  if (!options.out_dir.empty()) save_checkpoint(state, options.out_dir / "checkpoint.bin");
  return result;
}

std::pair<TrainState, TrainResult> train(const ExperimentConfig& config, const SplitBundle& splits,
                                         const TrainOptions& options) {
  TrainState state = TrainState::create(config);
  TrainResult result = train(state, splits, options);
  return {std::move(state), std::move(result)};
}

std::pair<TrainState, TrainResult> train_mimm_single(const ExperimentConfig& config,
                                                     const SplitBundle& splits, int target,
                                                     const TrainOptions& options) {
  if (target < 1 || static_cast<std::size_t>(target) > config.num_spurious()) {
    throw TrainingError("mimm target " + std::to_string(target) + " out of range 1.." +
                        std::to_string(config.num_spurious()));
  }
  ExperimentConfig c = config;
  c.method.kind = MethodKind::mimm_single;
  c.method.mimm_target = target;
  return train(c, splits, options);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'M', 'X', 'C', 'K', 'P'};

struct NamedTensors {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  void add(std::string name, const Tensor* t) { entries.emplace_back(std::move(name), t); }
};

void add_optimizer(NamedTensors& out, const std::string& prefix, const Adam& opt) {
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    out.add(prefix + ".m." + std::to_string(i), &opt.first_moments()[i]);
    out.add(prefix + ".v." + std::to_string(i), &opt.second_moments()[i]);
  }
}

NamedTensors collect(const TrainState& s) {
  NamedTensors out;
  for (auto& [name, t] : const_cast<MimmxModel&>(s.model).state()) out.add("model." + name, t);
  add_optimizer(out, "opt.main", s.main_optimizer);
  if (s.mine) {
    auto& net = const_cast<StatisticsNetwork&>(s.mine->net);
    for (Param* p : net.params()) out.add(p->name, &p->value);
    add_optimizer(out, "opt.mine", s.mine->optimizer);
  }
  return out;
}

void restore_optimizer(Adam& opt, const std::string& prefix, std::map<std::string, Tensor>& tensors,
                       std::size_t steps) {
  opt.set_steps(steps);
  for (std::size_t i = 0;; ++i) {
    auto m = tensors.find(prefix + ".m." + std::to_string(i));
    auto v = tensors.find(prefix + ".v." + std::to_string(i));
    if (m == tensors.end() || v == tensors.end()) break;
    opt.first_moments().push_back(std::move(m->second));
    opt.second_moments().push_back(std::move(v->second));
  }
}

void assign(Tensor& dst, std::map<std::string, Tensor>& tensors, const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + name);
  if (!it->second.same_shape(dst)) throw CheckpointError("checkpoint tensor " + name + " has the wrong shape");
  dst = std::move(it->second);
}

}  // namespace

void save_checkpoint(const TrainState& s, const fs::path& path) {
  const NamedTensors tensors = collect(s);
  json index = json::array();
  for (const auto& [name, t] : tensors.entries) index.push_back({{"name", name}, {"shape", t->shape()}});
  json header = {{"config", serialize_config(s.config)},
                 {"config_hash", s.config_hash},
                 {"method", to_string(s.config.method.kind)},
                 {"step", s.step},
                 {"main_steps", s.main_steps},
                 {"mine_steps", s.mine_steps},
                 {"epoch", s.epoch},
                 {"batch_in_epoch", s.batch_in_epoch},
                 {"opt_main_steps", s.main_optimizer.steps()},
                 {"has_mine", s.mine.has_value()},
                 {"tensors", index}};
  if (s.mine) {
    header["mine_ema_bits"] = std::bit_cast<std::uint64_t>(s.mine->ema);
    header["mine_ema_initialized"] = s.mine->ema_initialized;
    header["opt_mine_steps"] = s.mine->optimizer.steps();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    for (const auto& [name, t] : tensors.entries) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
  }
  fs::rename(tmp, path);
}

TrainState resume(const fs::path& path, const std::optional<ExperimentConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const json header = json::parse(text);

  const ExperimentConfig config = parse_config(header.at("config").get<std::string>());
  const std::string hash = header.at("config_hash").get<std::string>();
  if (hash != config_hash(config)) throw CheckpointError("checkpoint config hash is inconsistent");
  if (expected && config_hash(*expected) != hash) {
    throw CheckpointError("config hash " + config_hash(*expected) + " does not match checkpoint " + hash);
  }

  std::map<std::string, Tensor> tensors;
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<std::vector<std::size_t>>());
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint truncated at " + entry.at("name").get<std::string>());
    tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }

  TrainState s = TrainState::create(config);
  for (auto& [name, t] : s.model.state()) assign(*t, tensors, "model." + name);
  restore_optimizer(s.main_optimizer, "opt.main", tensors, header.at("opt_main_steps").get<std::size_t>());
  if (header.at("has_mine").get<bool>() != s.mine.has_value()) {
    throw CheckpointError("checkpoint MINE section does not match the method");
  }
  if (s.mine) {
    for (Param* p : s.mine->net.params()) assign(p->value, tensors, p->name);
    s.mine->ema = std::bit_cast<double>(header.at("mine_ema_bits").get<std::uint64_t>());
    s.mine->ema_initialized = header.at("mine_ema_initialized").get<bool>();
    restore_optimizer(s.mine->optimizer, "opt.mine", tensors, header.at("opt_mine_steps").get<std::size_t>());
  }
  s.step = header.at("step").get<std::size_t>();
  s.main_steps = header.at("main_steps").get<std::size_t>();
  s.mine_steps = header.at("mine_steps").get<std::size_t>();
  s.epoch = header.at("epoch").get<int>();
  s.batch_in_epoch = header.at("batch_in_epoch").get<std::size_t>();
  s.schedule.epoch = s.epoch;
  return s;
}

void write_metrics(const std::vector<MetricsRecord>& metrics, const fs::path& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw TrainingError("cannot write metrics " + path.string());
  for (const auto& r : metrics) out << r.to_json().dump() << '\n';
}

}  // namespace mimmx
