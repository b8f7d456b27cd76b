#include "mimmx/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mimmx/kernels.hpp"

namespace mimmx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 200;

int cardinality(const TrainState& s, std::size_t task) { return s.factors.at(task).cardinality; }

void check_factors(const TrainState& s, const DatasetManifest& m, const std::string& what) {
  if (m.factors != s.factors) {
    throw EvaluationError(what + " factors do not match the checkpoint's factor specs");
  }
}

}  // namespace

json EvalReport::to_json() const {
  return {{"tasks", tasks}, {"accuracy", accuracy}, {"gap_y", gap_y},
          {"probe", probe}, {"chance", chance},     {"metadata", metadata}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.tasks = j.at("tasks").get<std::vector<std::string>>();
  r.accuracy = j.at("accuracy").get<decltype(r.accuracy)>();
  r.gap_y = j.at("gap_y").get<double>();
  r.probe = j.value("probe", decltype(r.probe){});
  r.chance = j.at("chance").get<decltype(r.chance)>();
  r.metadata = j.value("metadata", json::object());
  return r;
}

double accuracy_percent(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw EvaluationError("prediction/label count mismatch");
  if (labels.empty()) throw EvaluationError("accuracy of an empty split");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<int> task_labels(const DatasetManifest& m, std::size_t task) {
  std::vector<int> out;
  out.reserve(m.size());
  for (const auto& r : m.records) out.push_back(task == 0 ? r.y : r.z.at(task - 1));
  return out;
}

FeatureBundle extract_features(const MimmxModel& model, const DatasetManifest& m) {
  const std::size_t n = m.size();
  const std::size_t width = model.subvector_dim() * (model.num_spurious() + 1);
  Tensor all({n, width});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor feats = join(encode(model, gather_images(m, idx)));
    std::copy(feats.values().begin(), feats.values().end(), all.data() + start * width);
  }
  return partition(all, model.num_spurious(), model.subvector_dim());
}

EvalReport evaluate(const TrainState& state, const SplitBundle& full) {
  const SplitBundle splits = effective_splits(state.config, full);
  const DatasetManifest* parts[] = {&splits.val, &splits.inverted, &splits.balanced};
  EvalReport report;
  for (const auto& f : state.factors) {
    report.tasks.push_back(f.name);
    report.chance[f.name] = 100.0 / f.cardinality;
  }
  json sizes = json::object();
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& m = *parts[s];
    check_factors(state, m, kSplitNames[s]);
    if (m.size() == 0) throw EvaluationError(kSplitNames[s] + " split is empty");
    sizes[kSplitNames[s]] = m.size();
    const FeatureBundle f = extract_features(state.model, m);
    report.accuracy[report.tasks[0]][kSplitNames[s]] =
        accuracy_percent(argmax_rows(predict_primary(state.model, f.f_y)), task_labels(m, 0));
    const auto z_logits = state.model.spurious.logits_eval(f.stacked_f_z);
    for (std::size_t i = 0; i < z_logits.size(); ++i) {
      report.accuracy[report.tasks[i + 1]][kSplitNames[s]] =
          accuracy_percent(argmax_rows(z_logits[i]), task_labels(m, i + 1));
    }
  }
  const auto& acc_y = report.accuracy[report.tasks[0]];
  report.gap_y = acc_y.at("val") - acc_y.at("inverted");
  report.metadata = {{"config_hash", state.config_hash},
                     {"method", to_string(state.config.method.kind)},
                     {"step", state.step},
                     {"seed", state.config.hyper.seed},
                     {"split_sizes", sizes}};
  if (state.config.method.mimm_target) report.metadata["mimm_target"] = *state.config.method.mimm_target;
  return report;
}

// ---------------------------------------------------------------------------
// Probes

ProbeResult fit_probe(const Tensor& fit_x, std::span<const int> fit_y, const Tensor& test_x,
                      std::span<const int> test_y, int classes, const ProbeOptions& options) {
  const std::size_t d = fit_x.cols();
  if (fit_x.rows() != fit_y.size() || test_x.rows() != test_y.size() || test_x.cols() != d) {
    throw EvaluationError("probe inputs have inconsistent shapes");
  }
  if (fit_y.empty() || test_y.empty()) throw EvaluationError("probe needs non-empty fit and test rows");

  // Standardize with fit statistics.
  std::vector<double> mean(d, 0.0), scale(d, 0.0);
  for (std::size_t r = 0; r < fit_x.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += fit_x(r, c);
  for (double& m : mean) m /= static_cast<double>(fit_x.rows());
  for (std::size_t r = 0; r < fit_x.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) scale[c] += (fit_x(r, c) - mean[c]) * (fit_x(r, c) - mean[c]);
  for (double& s : scale) {
    s = std::sqrt(s / static_cast<double>(fit_x.rows()));
    s = s > 1e-12 ? 1.0 / s : 1.0;
  }
  auto standardize = [&](const Tensor& x) {
    Tensor out = x;
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) out(r, c) = (x(r, c) - mean[c]) * scale[c];
    return out;
  };
  const Tensor xf = standardize(fit_x);
  const Tensor xt = standardize(test_x);

  Linear affine("probe", d, static_cast<std::size_t>(classes));  // zero init
  Adam opt;
  auto params = affine.params();
  for (int step = 0; step < options.steps; ++step) {
    zero_grads(params);
    const auto loss = cross_entropy(log_softmax(affine.forward(xf)), fit_y);
    affine.backward(xf, loss.grad_logits);
    opt.step(params, options.learning_rate);
  }
  ProbeResult r;
  r.accuracy = accuracy_percent(argmax_rows(affine.forward(xt)), test_y);
  r.chance = 100.0 / classes;
  r.fit_size = fit_y.size();
  r.test_size = test_y.size();
  return r;
}

ProbeResult probe_features(const Tensor& x, std::span<const int> labels, int classes, std::uint64_t seed,
                           const ProbeOptions& options) {
  std::vector<std::size_t> per_class(static_cast<std::size_t>(classes), 0);
  for (int l : labels) ++per_class.at(static_cast<std::size_t>(l));
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] < 20) {
      throw EvaluationError("probe split too small: class " + std::to_string(c) + " has " +
                            std::to_string(per_class[c]) + " samples (need 20)");
    }
  }
  Rng rng(seed);
  const auto perm = permutation(labels.size(), rng);
  const auto n_fit = static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(labels.size())));
  const std::vector<std::size_t> fit_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_fit));
  const std::vector<std::size_t> test_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_fit), perm.end());
  std::vector<int> fy, ty;
  for (auto i : fit_rows) fy.push_back(labels[i]);
  for (auto i : test_rows) ty.push_back(labels[i]);
  return fit_probe(take_rows(x, fit_rows), fy, take_rows(x, test_rows), ty, classes, options);
}

std::string subvector_name(const TrainState& state, std::size_t source) {
  if (source >= state.factors.size()) throw EvaluationError("no subvector " + std::to_string(source));
  return "f_" + state.factors[source].name;
}

namespace {

Tensor subvector(const FeatureBundle& f, std::size_t source) {
  return source == 0 ? f.f_y : f.f_z.at(source - 1);
}

}  // namespace

ProbeResult probe(const TrainState& state, std::size_t source, std::size_t target, const SplitBundle& full,
                  std::uint64_t seed, const ProbeOptions& options) {
  if (source >= state.factors.size() || target >= state.factors.size()) {
    throw EvaluationError("probe source/target out of range");
  }
  if (source == target) {
    throw EvaluationError("probing " + subvector_name(state, source) + " for its own task is not a disentanglement probe");
  }
  const SplitBundle splits = effective_splits(state.config, full);
  check_factors(state, splits.balanced, "balanced");
  const int classes = cardinality(state, target);
  const FeatureBundle bal = extract_features(state.model, splits.balanced);
  const std::vector<int> bal_labels = task_labels(splits.balanced, target);
  if (!options.fit_on_train_split) {
    return probe_features(subvector(bal, source), bal_labels, classes, seed, options);
  }
  check_factors(state, splits.train, "train");
  const FeatureBundle tr = extract_features(state.model, splits.train);
  return fit_probe(subvector(tr, source), task_labels(splits.train, target), subvector(bal, source), bal_labels,
                   classes, options);
}

void probe_all(const TrainState& state, const SplitBundle& full, EvalReport& report, const ProbeOptions& options) {
  const SplitBundle splits = effective_splits(state.config, full);
  check_factors(state, splits.balanced, "balanced");
  const FeatureBundle bal = extract_features(state.model, splits.balanced);
  std::optional<FeatureBundle> tr;
  if (options.fit_on_train_split) tr = extract_features(state.model, splits.train);
  const std::uint64_t base = derive_seed(state.config.hyper.seed, "probe");
  for (std::size_t s = 0; s < state.factors.size(); ++s) {
    for (std::size_t t = 0; t < state.factors.size(); ++t) {
      if (s == t) continue;
      const auto labels = task_labels(splits.balanced, t);
      ProbeResult r =
          tr ? fit_probe(subvector(*tr, s), task_labels(splits.train, t), subvector(bal, s), labels,
                         cardinality(state, t), options)
             : probe_features(subvector(bal, s), labels, cardinality(state, t),
                              derive_seed(base, "pair", s * 1000 + t), options);
      report.probe[subvector_name(state, s)][state.factors[t].name] = r.accuracy;
    }
  }
}

// ---------------------------------------------------------------------------
// Embeddings

std::vector<int> EmbeddingTable::labels(const std::string& factor) const {
  const auto it = std::find(columns.begin() + static_cast<std::ptrdiff_t>(feature_dim), columns.end(), factor);
  if (it == columns.end()) throw EvaluationError("embedding has no label column '" + factor + "'");
  const auto c = static_cast<std::size_t>(it - columns.begin());
  std::vector<int> out;
  for (std::size_t r = 0; r < values.rows(); ++r) out.push_back(static_cast<int>(values(r, c)));
  return out;
}

EmbeddingTable embeddings(const TrainState& state, const DatasetManifest& split, std::size_t source) {
  if (split.size() == 0) throw EvaluationError("cannot export an empty split");
  check_factors(state, split, "export");
  const FeatureBundle f = extract_features(state.model, split);
  const Tensor sub = subvector(f, source);
  EmbeddingTable t;
  t.feature_dim = sub.cols();
  for (std::size_t c = 0; c < t.feature_dim; ++c) t.columns.push_back("e" + std::to_string(c));
  for (const auto& fs : state.factors) t.columns.push_back(fs.name);
  t.values = Tensor({split.size(), t.columns.size()});
  for (std::size_t r = 0; r < split.size(); ++r) {
    const auto& rec = split.records[r];
    t.ids.push_back(rec.id);
    for (std::size_t c = 0; c < t.feature_dim; ++c) t.values(r, c) = sub(r, c);
    t.values(r, t.feature_dim) = rec.y;
    for (std::size_t i = 0; i < rec.z.size(); ++i) t.values(r, t.feature_dim + 1 + i) = rec.z[i];
  }
  t.metadata = {{"source", subvector_name(state, source)},
                {"config_hash", state.config_hash},
                {"method", to_string(state.config.method.kind)}};
  return t;
}

void write_embeddings(const EmbeddingTable& t, const fs::path& csv_path) {
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw EvaluationError("cannot write " + csv_path.string());
  for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << t.columns[c];
  out << '\n';
  char buf[64];
  for (std::size_t r = 0; r < t.values.rows(); ++r) {
    for (std::size_t c = 0; c < t.values.cols(); ++c) {
      // Shortest round-trip representation.
      auto res = std::to_chars(buf, buf + sizeof buf, t.values(r, c));
      if (c) out << ',';
      out.write(buf, res.ptr - buf);
    }
    out << '\n';
  }
  if (!out) throw EvaluationError("failed writing " + csv_path.string());
  json side = {{"ids", t.ids}, {"feature_dim", t.feature_dim}, {"metadata", t.metadata}};
  std::ofstream(fs::path(csv_path).replace_extension(".json")) << side.dump(2) << '\n';
}

EmbeddingTable load_embeddings(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw EvaluationError("cannot read " + csv_path.string());
  std::ifstream side_in(fs::path(csv_path).replace_extension(".json"));
  if (!side_in) throw EvaluationError("missing sidecar for " + csv_path.string());
  const json side = json::parse(side_in);
  EmbeddingTable t;
  t.ids = side.at("ids").get<std::vector<std::string>>();
  t.feature_dim = side.at("feature_dim").get<std::size_t>();
  t.metadata = side.value("metadata", json::object());
  std::string line;
  std::getline(in, line);
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) t.columns.push_back(col);
  }
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    std::size_t cols = 0;
    while (p < end) {
      double v = 0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc{}) throw EvaluationError("bad number in " + csv_path.string());
      values.push_back(v);
      ++cols;
      p = res.ptr;
      if (p < end && *p == ',') ++p;
    }
    if (cols != t.columns.size()) throw EvaluationError("ragged row in " + csv_path.string());
    ++rows;
  }
  if (rows != t.ids.size()) throw EvaluationError("row count does not match sidecar ids");
  t.values = Tensor::from({rows, t.columns.size()}, std::move(values));
  return t;
}

void export_embeddings(const TrainState& state, const DatasetManifest& split, std::size_t source,
                       const fs::path& csv_path) {
  write_embeddings(embeddings(state, split, source), csv_path);
}

// ---------------------------------------------------------------------------
// Separation and visualization

double silhouette(const Tensor& x, std::span<const int> labels) {
  const std::size_t n = x.rows();
  if (labels.size() != n) throw EvaluationError("silhouette label count mismatch");
  std::vector<double> dist(n * n);
  kernels::pairwise_distances(x.data(), n, x.cols(), dist.data());
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++count[static_cast<std::size_t>(l)];
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) sums[static_cast<std::size_t>(labels[j])] += dist[i * n + j];
    const auto own = static_cast<std::size_t>(labels[i]);
    if (count[own] < 2) continue;
    const double a = sums[own] / static_cast<double>(count[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c) {
      if (c != own && count[c] > 0) b = std::min(b, sums[c] / static_cast<double>(count[c]));
    }
    if (!std::isfinite(b)) continue;
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

Tensor tsne(const Tensor& x, const TsneOptions& o) {
  const std::size_t n = x.rows();
  if (n < 4) throw EvaluationError("t-SNE needs at least 4 points");
  std::vector<double> d2(n * n);
  kernels::pairwise_distances(x.data(), n, x.cols(), d2.data());
  for (double& v : d2) v *= v;

  // Conditional affinities with per-point bandwidth matched to the perplexity.
  const double perplexity = std::min(o.perplexity, (static_cast<double>(n) - 1) / 3.0);
  const double target = std::log(perplexity);
  std::vector<double> p(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 64; ++it) {
      double sum = 0.0, wsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double e = std::exp(-beta * d2[i * n + j]);
        p[i * n + j] = e;
        sum += e;
        wsum += e * d2[i * n + j];
      }
      sum = std::max(sum, 1e-300);
      const double h = std::log(sum) + beta * wsum / sum;
      for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= sum;
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
      } else {
        hi = beta;
        beta = (beta + lo) / 2;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::max((p[i * n + j] + p[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);
      p[i * n + j] = p[j * n + i] = v;
    }
  }

  Rng rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1e-4);
  Tensor y({n, 2});
  for (double& v : y.values()) v = normal(rng);
  Tensor vel({n, 2}), gains({n, 2}, 1.0), grad({n, 2});
  std::vector<double> q(n * n);
  for (int it = 0; it < o.iterations; ++it) {
    const double exaggeration = it < 100 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) {
          q[i * n + j] = 0.0;
          continue;
        }
        const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
        q[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
        qsum += q[i * n + j];
      }
    }
    grad.fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = q[i * n + j];
        const double m = 4.0 * (exaggeration * p[i * n + j] - w / qsum) * w;
        grad(i, 0) += m * (y(i, 0) - y(j, 0));
        grad(i, 1) += m * (y(i, 1) - y(j, 1));
      }
    }
    for (std::size_t k = 0; k < y.size(); ++k) {
      gains[k] = (grad[k] > 0) != (vel[k] > 0) ? gains[k] + 0.2 : std::max(gains[k] * 0.8, 0.01);
      vel[k] = momentum * vel[k] - o.learning_rate * gains[k] * grad[k];
      y[k] += vel[k];
    }
  }
  return y;
}

void write_scatter_ppm(const Tensor& points, std::span<const int> labels, const fs::path& path, int size) {
  static constexpr unsigned char palette[][3] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
                                                 {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
  if (points.rows() != labels.size()) throw EvaluationError("scatter label count mismatch");
  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  for (std::size_t r = 0; r < points.rows(); ++r) {
    for (int c = 0; c < 2; ++c) {
      lo[c] = std::min(lo[c], points(r, static_cast<std::size_t>(c)));
      hi[c] = std::max(hi[c], points(r, static_cast<std::size_t>(c)));
    }
  }
  const auto s = static_cast<std::size_t>(size);
  std::vector<unsigned char> img(s * s * 3, 255);
  const double margin = 0.05 * size;
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const double span0 = hi[0] > lo[0] ? hi[0] - lo[0] : 1.0, span1 = hi[1] > lo[1] ? hi[1] - lo[1] : 1.0;
    const int px = static_cast<int>(margin + (points(r, 0) - lo[0]) / span0 * (size - 2 * margin));
    const int py = static_cast<int>(margin + (hi[1] - points(r, 1)) / span1 * (size - 2 * margin));
    const auto* col = palette[static_cast<std::size_t>(labels[r]) % 8];
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) {
        const int x = px + dx, y = py + dy;
        if (x < 0 || y < 0 || x >= size || y >= size || dx * dx + dy * dy > 5) continue;
        std::copy(col, col + 3, img.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)) * 3));
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << "P6\n" << size << ' ' << size << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace mimmx
