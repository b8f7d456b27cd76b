// Command-line front end for the MIMM-X pipeline.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mimmx/config.hpp"
#include "mimmx/data.hpp"
#include "mimmx/evaluation.hpp"
#include "mimmx/pipeline.hpp"
#include "mimmx/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mimmx;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load(const Common& c) {
  if (c.config.empty()) throw ValidationError({"--config is required"});
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.hyper.seed = *c.seed;
  return cfg;
}

// Directory that receives the RunManifest for an output path.
fs::path artifact_dir(const fs::path& out) {
  if (out.has_extension()) return out.has_parent_path() ? out.parent_path() : fs::path(".");
  return out;
}

void record(const std::string& command, const std::string& hash, std::uint64_t seed,
            std::vector<std::string> inputs, const fs::path& out, const std::string& started) {
  write_run_manifest({command, hash, seed_table(seed), std::move(inputs), {out.string()}, started, utc_timestamp()},
                     artifact_dir(out));
}

std::size_t subvector_index(const TrainState& s, const std::string& name) {
  for (std::size_t i = 0; i < s.factors.size(); ++i) {
    if (name == "f_" + s.factors[i].name || name == s.factors[i].name || (i == 0 && name == "f_y")) return i;
  }
  throw EvaluationError("unknown subvector '" + name + "'");
}

std::size_t task_index(const TrainState& s, const std::string& name) {
  for (std::size_t i = 0; i < s.factors.size(); ++i) {
    if (name == s.factors[i].name || (i == 0 && name == "y")) return i;
  }
  throw EvaluationError("unknown task '" + name + "'");
}

const DatasetManifest& split_by_name(const SplitBundle& b, const std::string& name) {
  if (name == "train") return b.train;
  if (name == "val") return b.val;
  if (name == "inverted") return b.inverted;
  if (name == "balanced") return b.balanced;
  throw DataError("unknown split '" + name + "'");
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  if (dynamic_cast<const EvaluationError*>(&e)) return "evaluation";
  if (dynamic_cast<const MineOverflowError*>(&e)) return "mine_overflow";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIMM-X: train classifiers disentangled from known spurious factors"};
  app.require_subcommand(1);
  Common c;
  std::string input, train_path, data_dir, checkpoint, method, split = "balanced", source = "f_y", target,
                                                              color_by = "z1";
  std::optional<int> mimm_target, count;
  std::optional<std::size_t> stop_after;
  bool with_probes = false, resume_run = false, verbose = false, probe_on_train = false;

  auto add_common = [&](CLI::App* sub, bool need_config) {
    auto* opt = sub->add_option("--config", c.config, "experiment YAML");
    if (need_config) opt->required();
    sub->add_option("--seed", c.seed, "override the config seed");
    sub->add_option("--out", c.out, "output path")->required();
  };

  auto* gen = app.add_subcommand("generate", "render a synthetic pool");
  add_common(gen, true);
  gen->add_option("--count-per-cell", count, "samples per joint cell (default: train pool size)");

  auto* ind = app.add_subcommand("induce", "apply the correlation skew to a pool");
  add_common(ind, true);
  ind->add_option("--input", input, "pool manifest CSV")->required();

  auto* spl = app.add_subcommand("splits", "build train/val/inverted/balanced manifests");
  add_common(spl, true);
  spl->add_option("--input", input, "pool manifest CSV")->required();
  spl->add_option("--train", train_path, "existing training manifest (its ids are excluded)");

  auto* reb = app.add_subcommand("rebalance", "oversample a training manifest");
  add_common(reb, false);
  reb->add_option("--input", input, "training manifest CSV")->required();

  auto* trn = app.add_subcommand("train", "train one method");
  add_common(trn, true);
  trn->add_option("--data", data_dir, "splits directory")->required();
  trn->add_option("--method", method, "baseline|rebalance|dcor|mimm|mimmx (overrides the config method)");
  trn->add_option("--mimm-target", mimm_target, "spurious factor index for mimm (1-based)");
  trn->add_option("--stop-after-step", stop_after, "checkpoint and stop at this step");
  trn->add_flag("--resume", resume_run, "continue from <out>/checkpoint.bin");

  auto* evl = app.add_subcommand("evaluate", "accuracy report for a checkpoint");
  evl->add_option("--checkpoint", checkpoint)->required();
  evl->add_option("--data", data_dir, "splits directory")->required();
  evl->add_option("--out", c.out, "report JSON")->required();
  evl->add_flag("--probes", with_probes, "include every cross probe");
  evl->add_flag("--probe-on-train", probe_on_train, "fit probes on the training split");

  auto* prb = app.add_subcommand("probe", "one disentanglement probe");
  prb->add_option("--checkpoint", checkpoint)->required();
  prb->add_option("--data", data_dir, "splits directory")->required();
  prb->add_option("--source", source, "subvector (f_y, f_z1, ...)");
  prb->add_option("--target", target, "task name")->required();
  prb->add_option("--seed", c.seed, "probe split seed");
  prb->add_option("--out", c.out, "result JSON")->required();
  prb->add_flag("--probe-on-train", probe_on_train, "fit on the training split");

  auto* exp = app.add_subcommand("export", "write subvector embeddings");
  exp->add_option("--checkpoint", checkpoint)->required();
  exp->add_option("--data", data_dir, "splits directory")->required();
  exp->add_option("--split", split, "train|val|inverted|balanced");
  exp->add_option("--source", source, "subvector (f_y, f_z1, ...)");
  exp->add_option("--out", c.out, "embedding CSV")->required();

  auto* plt = app.add_subcommand("plot", "2-d t-SNE scatter of an export");
  plt->add_option("--input", input, "embedding CSV")->required();
  plt->add_option("--color-by", color_by, "label column");
  plt->add_option("--seed", c.seed, "t-SNE seed");
  plt->add_option("--out", c.out, "PPM image")->required();

  auto* run = app.add_subcommand("run", "full method comparison");
  run->add_option("--config", c.config, "experiment YAML")->required();
  run->add_option("--seed", c.seed, "override the config seed");
  run->add_option("--out", c.out, "experiment directory (default: paths.out)");
  run->add_flag("--verbose", verbose);

  CLI11_PARSE(app, argc, argv);

  const std::string started = utc_timestamp();
  try {
    if (*gen) {
      const auto cfg = load(c);
      const auto n = static_cast<std::size_t>(count.value_or(cfg.data.train_pool_per_cell));
      const auto seed = derive_seed(cfg.hyper.seed, "data_train");
      const auto pool = generate_synthetic(cfg.ordered_factors(), n, static_cast<std::size_t>(cfg.model.image_size),
                                           cfg.data.noise_sigma, seed);
      write_manifest(pool, c.out);
      record("generate", config_hash(cfg), cfg.hyper.seed, {c.config}, c.out, started);
    } else if (*ind) {
      const auto cfg = load(c);
      const auto pool = load_manifest(input, cfg.ordered_factors());
      const auto out = induce_correlation(pool, cfg.correlation, static_cast<std::size_t>(cfg.data.per_class_budget),
                                          derive_seed(derive_seed(cfg.hyper.seed, "data_train"), "induce"));
      write_manifest(out, c.out);
      record("induce", config_hash(cfg), cfg.hyper.seed, {c.config, input}, c.out, started);
    } else if (*spl) {
      const auto cfg = load(c);
      const auto pool = load_manifest(input, cfg.ordered_factors());
      DatasetManifest train = train_path.empty()
                                  ? induce_correlation(pool, cfg.correlation,
                                                       static_cast<std::size_t>(cfg.data.per_class_budget),
                                                       derive_seed(derive_seed(cfg.hyper.seed, "data_train"), "induce"))
                                  : load_manifest(train_path, cfg.ordered_factors());
      std::set<std::string> used;
      for (const auto& r : train.records) used.insert(r.origin.empty() ? r.id : r.origin);
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (!used.count(pool.records[i].id)) rest.push_back(i);
      SplitBundle b = build_eval_splits(subset(pool, rest), cfg.correlation,
                                        {static_cast<std::size_t>(cfg.data.val_size),
                                         static_cast<std::size_t>(cfg.data.inverted_size),
                                         static_cast<std::size_t>(cfg.data.balanced_size)},
                                        derive_seed(cfg.hyper.seed, "data_eval"));
      b.train = std::move(train);
      write_splits(b, c.out);
      record("splits", config_hash(cfg), cfg.hyper.seed, {c.config, input}, c.out, started);
    } else if (*reb) {
      const auto m = load_manifest(input);
      const std::uint64_t seed = c.seed.value_or(0);
      write_manifest(rebalance(m, derive_seed(seed, "rebalance")), c.out);
      record("rebalance", "", seed, {input}, c.out, started);
    } else if (*trn) {
      auto cfg = load(c);
      if (!method.empty()) {
        cfg.method = standard_variant(parse_method_kind(method), cfg, mimm_target);
      } else if (mimm_target) {
        cfg.method.mimm_target = mimm_target;
      }
      if (auto v = validate(cfg); !v.empty()) throw ValidationError(std::move(v));
      const auto splits = load_splits(data_dir);
      const fs::path out = c.out;
      TrainState state = resume_run ? resume(out / "checkpoint.bin", cfg) : TrainState::create(cfg);
      fs::create_directories(out);
      write_config(cfg, out / "config.yaml");
      const auto result = train(state, splits, {out, stop_after, {}});
      write_run_manifest({"train --method " + to_string(cfg.method.kind), state.config_hash, seed_table(cfg.hyper.seed),
                          {c.config, data_dir}, {"config.yaml", "checkpoint.bin", "metrics.jsonl"}, started,
                          utc_timestamp()},
                         out);
      std::cout << json{{"step", state.step}, {"completed", result.completed}, {"config_hash", state.config_hash}}.dump()
                << '\n';
    } else if (*evl) {
      const TrainState state = resume(checkpoint);
      const auto splits = load_splits(data_dir);
      EvalReport report = evaluate(state, splits);
      if (with_probes) {
        ProbeOptions po{state.config.hyper.probe_steps, state.config.hyper.probe_learning_rate, 0.7, probe_on_train};
        probe_all(state, splits, report, po);
      }
      if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
      std::ofstream(c.out) << report.to_json().dump(2) << '\n';
      record("evaluate", state.config_hash, state.config.hyper.seed, {checkpoint, data_dir}, c.out, started);
    } else if (*prb) {
      const TrainState state = resume(checkpoint);
      const auto splits = load_splits(data_dir);
      ProbeOptions po{state.config.hyper.probe_steps, state.config.hyper.probe_learning_rate, 0.7, probe_on_train};
      const std::uint64_t seed = c.seed.value_or(derive_seed(state.config.hyper.seed, "probe"));
      const auto r = probe(state, subvector_index(state, source), task_index(state, target), splits, seed, po);
      if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
      std::ofstream(c.out) << json{{"source", source}, {"target", target},     {"accuracy", r.accuracy},
                                   {"chance", r.chance},  {"fit_size", r.fit_size}, {"test_size", r.test_size}}
                                  .dump(2)
                           << '\n';
      record("probe", state.config_hash, seed, {checkpoint, data_dir}, c.out, started);
    } else if (*exp) {
      const TrainState state = resume(checkpoint);
      const auto splits = effective_splits(state.config, load_splits(data_dir));
      export_embeddings(state, split_by_name(splits, split), subvector_index(state, source), c.out);
      record("export", state.config_hash, state.config.hyper.seed, {checkpoint, data_dir}, c.out, started);
    } else if (*plt) {
      const auto table = load_embeddings(input);
      TsneOptions opts;
      opts.seed = c.seed.value_or(0);
      write_scatter_ppm(tsne(table.features(), opts), table.labels(color_by), c.out);
      record("plot --color-by " + color_by, table.metadata.value("config_hash", ""), opts.seed, {input}, c.out,
             started);
    } else if (*run) {
      auto cfg = load(c);
      if (!c.out.empty()) cfg.paths.out = c.out;
      ExperimentOptions opts;
      opts.verbose = verbose;
      const auto result = run_experiment(cfg, opts);
      std::cout << accuracy_table_text(result) << '\n' << probe_table_text(result);
      if (!result.failures.empty()) {
        std::cerr << json{{"error", "run_failed"}, {"failures", result.failures}}.dump() << '\n';
        return 2;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", error_kind(e)}, {"message", e.what()}, {"command", app.get_subcommands().front()->get_name()}}
                     .dump()
              << '\n';
    return 1;
  }
  return 0;
}
