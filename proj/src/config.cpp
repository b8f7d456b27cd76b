#include "mimmx/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mimmx/tensor.hpp"

namespace mimmx {

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& into) {
  if (node && node[key]) into = node[key].as<T>();
}

FactorRole parse_role(const std::string& s) {
  if (s == "primary") return FactorRole::primary;
  if (s == "spurious") return FactorRole::spurious;
  throw ConfigError("unknown factor role '" + s + "'");
}

CorrelationMode parse_mode(const std::string& s) {
  if (s == "joint") return CorrelationMode::joint;
  if (s == "per_factor") return CorrelationMode::per_factor;
  throw ConfigError("unknown correlation mode '" + s + "'");
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> violations)
    : ConfigError("invalid config: " + join(violations, "; ")),
      violations_(std::move(violations)) {}

std::string FactorSpec::generator_kind() const {
  auto it = generator_params.find("kind");
  if (it != generator_params.end()) return it->second;
  return role == FactorRole::primary ? "shape" : "intensity";
}

double FactorSpec::param(const std::string& key, double fallback) const {
  auto it = generator_params.find(key);
  return it == generator_params.end() ? fallback : std::stod(it->second);
}

const FactorSpec& ExperimentConfig::primary() const {
  auto it = std::find_if(factors.begin(), factors.end(),
                         [](const FactorSpec& f) { return f.role == FactorRole::primary; });
  if (it == factors.end()) throw ConfigError("config declares no primary factor");
  return *it;
}

std::vector<FactorSpec> ExperimentConfig::spurious() const {
  std::vector<FactorSpec> out;
  for (const auto& f : factors) {
    if (f.role == FactorRole::spurious) out.push_back(f);
  }
  return out;
}

std::vector<FactorSpec> ExperimentConfig::ordered_factors() const {
  std::vector<FactorSpec> out{primary()};
  for (auto& f : spurious()) out.push_back(std::move(f));
  return out;
}

std::size_t ExperimentConfig::num_spurious() const { return spurious().size(); }

std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::baseline: return "baseline";
    case MethodKind::rebalance: return "rebalance";
    case MethodKind::dcor: return "dcor";
    case MethodKind::mimm_single: return "mimm";
    case MethodKind::mimmx: return "mimmx";
  }
  return "unknown";
}

MethodKind parse_method_kind(const std::string& text) {
  if (text == "baseline") return MethodKind::baseline;
  if (text == "rebalance") return MethodKind::rebalance;
  if (text == "dcor") return MethodKind::dcor;
  if (text == "mimm" || text == "mimm_single") return MethodKind::mimm_single;
  if (text == "mimmx" || text == "mimm-x") return MethodKind::mimmx;
  throw ConfigError("unknown method '" + text + "'");
}

std::string to_string(CorrelationMode mode) {
  return mode == CorrelationMode::joint ? "joint" : "per_factor";
}

void apply_defaults(ExperimentConfig& config) {
  const auto primaries = std::count_if(config.factors.begin(), config.factors.end(),
                                       [](const auto& f) { return f.role == FactorRole::primary; });
  if (primaries != 1 || !config.correlation.assignment.empty()) return;
  // Default majority cell: primary class c pairs with class c (mod K_i).
  const auto spurious = config.spurious();
  for (int c = 0; c < config.primary().cardinality; ++c) {
    std::vector<int> tuple;
    for (const auto& f : spurious) tuple.push_back(f.cardinality > 0 ? c % f.cardinality : 0);
    config.correlation.assignment.push_back(std::move(tuple));
  }
}

std::vector<std::string> validate(const ExperimentConfig& config) {
  std::vector<std::string> v;
  const auto primaries = std::count_if(config.factors.begin(), config.factors.end(),
                                       [](const auto& f) { return f.role == FactorRole::primary; });
  if (primaries != 1) {
    v.push_back("exactly one primary factor required (found " + std::to_string(primaries) + ")");
  }
  std::vector<std::string> names;
  for (const auto& f : config.factors) {
    if (f.cardinality < 2) {
      v.push_back("factor '" + f.name + "' cardinality " + std::to_string(f.cardinality) +
                  " below 2");
    }
    if (std::find(names.begin(), names.end(), f.name) != names.end()) {
      v.push_back("duplicate factor name '" + f.name + "'");
    }
    names.push_back(f.name);
  }
  const int n_spurious = static_cast<int>(config.num_spurious());
  if (n_spurious < 1) v.push_back("at least one spurious factor required");

  const auto& m = config.method;
  if (m.kind == MethodKind::mimm_single) {
    if (!m.mimm_target) {
      v.push_back("method mimm requires mimm_target");
    } else if (*m.mimm_target < 1 || *m.mimm_target > n_spurious) {
      v.push_back("mimm_target " + std::to_string(*m.mimm_target) + " outside 1.." +
                  std::to_string(n_spurious));
    }
  } else if (m.mimm_target) {
    v.push_back("mimm_target given for method " + to_string(m.kind));
  }

  const auto& h = config.hyper;
  if (h.subvector_dim <= 0) v.push_back("subvector_dim must be positive");
  if (h.batch_size <= 0) v.push_back("batch_size must be positive");
  if (m.uses_mine() && h.n_b < 2) v.push_back("n_b below 2 leaves no MINE update per cycle");
  if (h.n_b < 1) v.push_back("n_b must be at least 1");
  if (h.lambda < 0) v.push_back("lambda negative");
  if (h.n_epoch <= 0) v.push_back("n_epoch must be positive");
  if (h.learning_rate <= 0) v.push_back("learning_rate must be positive");
  if (h.mine_learning_rate <= 0) v.push_back("mine_learning_rate must be positive");
  if (!(h.mine_ema_decay > 0 && h.mine_ema_decay < 1)) v.push_back("mine_ema_decay outside (0,1)");
  if (h.mine_hidden <= 0) v.push_back("mine_hidden must be positive");
  if (!(h.bn_momentum > 0 && h.bn_momentum <= 1)) v.push_back("bn_momentum outside (0,1]");
  if (h.probe_steps <= 0) v.push_back("probe_steps must be positive");

  const auto& c = config.correlation;
  if (c.skew < 0.5) v.push_back("skew below 0.5");
  if (c.skew > 1.0) v.push_back("skew above 1.0");
  if (primaries == 1) {
    const int k_y = config.primary().cardinality;
    const auto spurious = config.spurious();
    if (static_cast<int>(c.assignment.size()) != k_y) {
      v.push_back("assignment covers " + std::to_string(c.assignment.size()) + " of " +
                  std::to_string(k_y) + " primary classes");
    }
    for (std::size_t cls = 0; cls < c.assignment.size(); ++cls) {
      const auto& tuple = c.assignment[cls];
      if (tuple.size() != spurious.size()) {
        v.push_back("assignment for class " + std::to_string(cls) + " has " +
                    std::to_string(tuple.size()) + " entries, expected " +
                    std::to_string(spurious.size()));
        continue;
      }
      for (std::size_t i = 0; i < tuple.size(); ++i) {
        if (spurious[i].cardinality < 2) continue;  // already reported above
        if (tuple[i] < 0 || tuple[i] >= spurious[i].cardinality) {
          v.push_back("assignment for class " + std::to_string(cls) + " names invalid class " +
                      std::to_string(tuple[i]) + " of factor '" + spurious[i].name + "'");
        }
      }
    }
  }

  const auto& md = config.model;
  if (md.image_size < 16) v.push_back("image_size below 16");
  if (md.image_channels < 1) v.push_back("image_channels must be positive");
  if (md.encoder != "conv4") v.push_back("unknown encoder '" + md.encoder + "'");
  if (md.channels.size() != 4) v.push_back("conv4 encoder needs 4 channel widths");
  for (int ch : md.channels) {
    if (ch <= 0) v.push_back("channel widths must be positive");
  }

  const auto& d = config.data;
  if (d.train_pool_per_cell < 1 || d.eval_pool_per_cell < 1) v.push_back("pool sizes must be >= 1");
  if (d.per_class_budget < 1) v.push_back("per_class_budget must be >= 1");
  if (d.val_size < 1 || d.inverted_size < 1 || d.balanced_size < 1) {
    v.push_back("split sizes must be >= 1");
  }
  if (d.noise_sigma < 0) v.push_back("noise_sigma negative");
  return v;
}

ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!root.IsMap()) throw ConfigError("config parse error: top level must be a mapping");

  ExperimentConfig cfg;
  try {
    if (!root["factors"] || !root["factors"].IsSequence()) {
      throw ConfigError("config parse error: 'factors' must be a list");
    }
    for (const auto& node : root["factors"]) {
      FactorSpec f;
      f.name = node["name"].as<std::string>();
      read(node, "cardinality", f.cardinality);
      if (node["role"]) f.role = parse_role(node["role"].as<std::string>());
      if (node["generator"]) {
        for (const auto& kv : node["generator"]) {
          f.generator_params[kv.first.as<std::string>()] = kv.second.as<std::string>();
        }
      }
      cfg.factors.push_back(std::move(f));
    }

    if (const auto c = root["correlation"]) {
      read(c, "skew", cfg.correlation.skew);
      if (c["mode"]) cfg.correlation.mode = parse_mode(c["mode"].as<std::string>());
      read(c, "assignment", cfg.correlation.assignment);
    }
    if (const auto m = root["model"]) {
      read(m, "encoder", cfg.model.encoder);
      read(m, "channels", cfg.model.channels);
      read(m, "image_size", cfg.model.image_size);
      read(m, "image_channels", cfg.model.image_channels);
    }
    if (const auto m = root["method"]) {
      if (m["kind"]) cfg.method.kind = parse_method_kind(m["kind"].as<std::string>());
      if (m["mimm_target"]) cfg.method.mimm_target = m["mimm_target"].as<int>();
      read(m, "use_dls", cfg.method.use_dls);
      read(m, "use_caw", cfg.method.use_caw);
    }
    bool has_seed = false;
    if (const auto h = root["hyperparams"]) {
      auto& hp = cfg.hyper;
      read(h, "subvector_dim", hp.subvector_dim);
      read(h, "batch_size", hp.batch_size);
      read(h, "n_b", hp.n_b);
      read(h, "lambda", hp.lambda);
      read(h, "alpha_y_initial", hp.alpha_y_initial);
      read(h, "alpha_z", hp.alpha_z);
      read(h, "beta_y", hp.beta_y);
      read(h, "n_epoch", hp.n_epoch);
      read(h, "learning_rate", hp.learning_rate);
      read(h, "mine_learning_rate", hp.mine_learning_rate);
      read(h, "mine_ema_decay", hp.mine_ema_decay);
      read(h, "mine_hidden", hp.mine_hidden);
      read(h, "penalty_grad_to_fz", hp.penalty_grad_to_fz);
      read(h, "mine_standardize_inputs", hp.mine_standardize_inputs);
      read(h, "bn_momentum", hp.bn_momentum);
      read(h, "probe_steps", hp.probe_steps);
      read(h, "probe_learning_rate", hp.probe_learning_rate);
      if (h["seed"]) {
        hp.seed = h["seed"].as<std::uint64_t>();
        has_seed = true;
      }
    }
    if (!has_seed) throw ValidationError({"hyperparams.seed is required"});
    if (const auto d = root["data"]) {
      read(d, "train_pool_per_cell", cfg.data.train_pool_per_cell);
      read(d, "eval_pool_per_cell", cfg.data.eval_pool_per_cell);
      read(d, "per_class_budget", cfg.data.per_class_budget);
      read(d, "val_size", cfg.data.val_size);
      read(d, "inverted_size", cfg.data.inverted_size);
      read(d, "balanced_size", cfg.data.balanced_size);
      read(d, "noise_sigma", cfg.data.noise_sigma);
    }
    if (const auto p = root["paths"]) {
      read(p, "out", cfg.paths.out);
      read(p, "train_manifest", cfg.paths.train_manifest);
      read(p, "eval_manifest", cfg.paths.eval_manifest);
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }

  apply_defaults(cfg);
  if (auto violations = validate(cfg); !violations.empty()) {
    throw ValidationError(std::move(violations));
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;

  out << YAML::Key << "factors" << YAML::Value << YAML::BeginSeq;
  for (const auto& f : cfg.factors) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << f.name;
    out << YAML::Key << "role" << YAML::Value
        << (f.role == FactorRole::primary ? "primary" : "spurious");
    out << YAML::Key << "cardinality" << YAML::Value << f.cardinality;
    if (!f.generator_params.empty()) {
      out << YAML::Key << "generator" << YAML::Value << YAML::Flow << YAML::BeginMap;
      for (const auto& [k, v] : f.generator_params) out << YAML::Key << k << YAML::Value << v;
      out << YAML::EndMap;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;

  out << YAML::Key << "correlation" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "skew" << YAML::Value << cfg.correlation.skew;
  out << YAML::Key << "mode" << YAML::Value << to_string(cfg.correlation.mode);
  out << YAML::Key << "assignment" << YAML::Value << YAML::BeginSeq;
  for (const auto& t : cfg.correlation.assignment) out << YAML::Flow << t;
  out << YAML::EndSeq << YAML::EndMap;

  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "encoder" << YAML::Value << cfg.model.encoder;
  out << YAML::Key << "channels" << YAML::Value << YAML::Flow << cfg.model.channels;
  out << YAML::Key << "image_size" << YAML::Value << cfg.model.image_size;
  out << YAML::Key << "image_channels" << YAML::Value << cfg.model.image_channels;
  out << YAML::EndMap;

  out << YAML::Key << "method" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << to_string(cfg.method.kind);
  if (cfg.method.mimm_target) {
    out << YAML::Key << "mimm_target" << YAML::Value << *cfg.method.mimm_target;
  }
  out << YAML::Key << "use_dls" << YAML::Value << cfg.method.use_dls;
  out << YAML::Key << "use_caw" << YAML::Value << cfg.method.use_caw;
  out << YAML::EndMap;

  const auto& h = cfg.hyper;
  out << YAML::Key << "hyperparams" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "subvector_dim" << YAML::Value << h.subvector_dim;
  out << YAML::Key << "batch_size" << YAML::Value << h.batch_size;
  out << YAML::Key << "n_b" << YAML::Value << h.n_b;
  out << YAML::Key << "lambda" << YAML::Value << h.lambda;
  out << YAML::Key << "alpha_y_initial" << YAML::Value << h.alpha_y_initial;
  out << YAML::Key << "alpha_z" << YAML::Value << h.alpha_z;
  out << YAML::Key << "beta_y" << YAML::Value << h.beta_y;
  out << YAML::Key << "n_epoch" << YAML::Value << h.n_epoch;
  out << YAML::Key << "learning_rate" << YAML::Value << h.learning_rate;
  out << YAML::Key << "mine_learning_rate" << YAML::Value << h.mine_learning_rate;
  out << YAML::Key << "mine_ema_decay" << YAML::Value << h.mine_ema_decay;
  out << YAML::Key << "mine_hidden" << YAML::Value << h.mine_hidden;
  out << YAML::Key << "penalty_grad_to_fz" << YAML::Value << h.penalty_grad_to_fz;
  out << YAML::Key << "mine_standardize_inputs" << YAML::Value << h.mine_standardize_inputs;
  out << YAML::Key << "bn_momentum" << YAML::Value << h.bn_momentum;
  out << YAML::Key << "probe_steps" << YAML::Value << h.probe_steps;
  out << YAML::Key << "probe_learning_rate" << YAML::Value << h.probe_learning_rate;
  out << YAML::Key << "seed" << YAML::Value << h.seed;
  out << YAML::EndMap;

  const auto& d = cfg.data;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "train_pool_per_cell" << YAML::Value << d.train_pool_per_cell;
  out << YAML::Key << "eval_pool_per_cell" << YAML::Value << d.eval_pool_per_cell;
  out << YAML::Key << "per_class_budget" << YAML::Value << d.per_class_budget;
  out << YAML::Key << "val_size" << YAML::Value << d.val_size;
  out << YAML::Key << "inverted_size" << YAML::Value << d.inverted_size;
  out << YAML::Key << "balanced_size" << YAML::Value << d.balanced_size;
  out << YAML::Key << "noise_sigma" << YAML::Value << d.noise_sigma;
  out << YAML::EndMap;

  out << YAML::Key << "paths" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "out" << YAML::Value << cfg.paths.out;
  out << YAML::Key << "train_manifest" << YAML::Value << cfg.paths.train_manifest;
  out << YAML::Key << "eval_manifest" << YAML::Value << cfg.paths.eval_manifest;
  out << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

void write_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path.string());
  out << serialize_config(config);
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(serialize_config(config))));
  return buf;
}

}  // namespace mimmx
